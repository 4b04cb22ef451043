"""Content digests used for cache keys, prepare idempotence and run manifests."""

import hashlib
import json
from pathlib import Path
from typing import Any, Union


def digest_update_from_file(filename: Union[str, Path], hash) -> Any:
    """Feed the content of a file into a running hash."""
    assert Path(filename).is_file()
    with open(str(filename), "rb") as f:
        for chunk in iter(lambda: f.read(4096), b""):
            hash.update(chunk)
    return hash


def digest_file(filename: Union[str, Path]) -> str:
    """Generate the sha256 of a file."""
    return digest_update_from_file(filename, hashlib.sha256()).hexdigest()


def digest_bytes(data: bytes) -> str:
    """Generate the sha256 of raw bytes."""
    return hashlib.sha256(data).hexdigest()


def digest_text(text: str) -> str:
    """Generate the sha256 of a string."""
    return digest_bytes(text.encode("utf-8"))


def digest_dict(dict: dict) -> str:
    """Generate the hash of a dictionary."""
    json_str = json.dumps(dict, sort_keys=True)
    return digest_text(json_str)
