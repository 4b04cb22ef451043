"""Prompting, response parsing and resumable querying of localization backends.

Each :class:`LocalizationTask` becomes one request: the gridded image plus a fixed
system/user prompt. Raw responses are appended to a newline-delimited JSON journal keyed
by (backend id, image digest, prompt digest), so interrupted runs resume without
re-sending finished tasks.
"""

import base64
import json
import logging
import os
import re
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import requests

from canvas import CellOutOfRangeError, GridCell, GridSpec, cell_of, label_of
from corpus import LocalizationTask, Pathology, ViewPosition
from hashing import digest_bytes, digest_text
from scorer import OverlapGrid, ParseFailure
from tracing import span

logger = logging.getLogger(__name__)

__all__ = [
    "BackendConfig",
    "LocalizationTask",
    "ParseFailure",
    "ParsedCell",
    "PromptBundle",
    "QueryRecord",
    "build_prompt",
    "journal_records",
    "parse_cell",
    "run_queries",
]

SYSTEM_TEMPLATE = (
    "You are an expert chest radiologist specializing in analyzing {view} chest X-rays. "
    "Your task is to precisely localize abnormalities using a grid overlay."
)
USER_TEMPLATE = (
    "This is a gridded {view} view of a chest X-ray. "
    "The abnormality '{condition}' is confirmed to be present in this image.\n"
    "Your task:\n"
    "1. Identify the single grid cell where this abnormality is the MOST prominent.\n"
    "2. Provide only the grid coordinate for this most representative cell. A grid "
    "coordinate is defined as a letter followed by a number.{axes} If the abnormality spans "
    "multiple cells, choose the cell that is most representative.\n"
    "3. Do not include any explanations or additional text in your response."
)
AXES_SENTENCE = (
    " Letters label rows from top to bottom and numbers label columns from left to right, "
    "so A1 is the top-left cell."
)

REASONING_EFFORTS = ("minimal", "low", "medium", "high")
BACKEND_KINDS = ("http_chat", "simulated")
TRANSPORT_FAILURE = "transport_error"

_COORDINATE_RE = re.compile(r"(?<![A-Za-z0-9])([A-Za-z]{1,2})(\d{1,4})(?![A-Za-z0-9])")


class QueryError(Exception):
    """Base class for querier errors."""

    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


class BackendConfigError(QueryError):
    """Raised if a backend configuration is invalid."""


class BackendAuthError(QueryError):
    """Raised if a backend rejects our credentials; fatal for that backend."""


class TransientBackendError(QueryError):
    """Raised for failures worth retrying (timeouts, rate limits, server errors)."""


class PermanentBackendError(QueryError):
    """Raised for failures retrying will not fix (malformed responses, client errors)."""


class JournalError(QueryError):
    """Raised if the query journal cannot be read or written."""


@dataclass(frozen=True)
class PromptBundle:
    """Prompt text and image for one query."""

    system_text: str
    user_text: str
    image_bytes: bytes = b""

    @property
    def prompt_hash(self) -> str:
        """Digest of both prompt texts."""
        return digest_text(self.system_text + "\x00" + self.user_text)

    @property
    def image_hash(self) -> str:
        """Digest of the image bytes."""
        return digest_bytes(self.image_bytes)


@dataclass(frozen=True)
class ParsedCell:
    """A cell recovered from a reply."""

    cell: GridCell
    label: str
    ambiguous: bool = False


ParseResult = Union[ParsedCell, ParseFailure]


@dataclass(frozen=True)
class BackendConfig:
    """One model backend; unknown knobs are passed through untouched."""

    backend_id: str
    kind: str = "simulated"
    endpoint: Optional[str] = None
    model: Optional[str] = None
    api_key_env: Optional[str] = None
    temperature: Optional[float] = None
    reasoning_effort: Optional[str] = None
    max_retries: int = 3
    min_request_interval: float = 0.0
    max_in_flight: int = 1
    request_timeout: float = 60.0
    backoff_base: float = 1.0
    strategy: Optional[str] = None
    options: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.backend_id or not re.fullmatch(r"[A-Za-z0-9._\-]+", self.backend_id):
            raise BackendConfigError(
                f"Backend id '{self.backend_id}' must be non-empty and use [A-Za-z0-9._-]"
            )
        if self.kind not in BACKEND_KINDS:
            raise BackendConfigError(f"Backend '{self.backend_id}' has unknown kind '{self.kind}'")
        if self.temperature is not None and not 0 <= self.temperature <= 2:
            raise BackendConfigError(
                f"Backend '{self.backend_id}' temperature must be in [0, 2], "
                f"got {self.temperature}"
            )
        if self.reasoning_effort is not None and self.reasoning_effort not in REASONING_EFFORTS:
            raise BackendConfigError(
                f"Backend '{self.backend_id}' reasoning_effort must be one of {REASONING_EFFORTS}"
            )
        if self.max_in_flight < 1:
            raise BackendConfigError(f"Backend '{self.backend_id}' needs max_in_flight >= 1")
        if self.max_retries < 0 or self.min_request_interval < 0:
            raise BackendConfigError(
                f"Backend '{self.backend_id}' max_retries and min_request_interval must be >= 0"
            )
        if self.kind == "http_chat" and not (self.endpoint and self.model):
            raise BackendConfigError(f"Backend '{self.backend_id}' needs an endpoint and model")
        if self.kind == "simulated" and not self.strategy:
            raise BackendConfigError(f"Simulated backend '{self.backend_id}' needs a strategy")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BackendConfig":
        """Build a config, rejecting unknown keys."""
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise BackendConfigError(f"Unknown backend settings {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise BackendConfigError(f"Invalid backend settings: {e}")

    def to_dict(self) -> Dict[str, Any]:
        """Plain dict of every field."""
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass(frozen=True)
class QueryRecord:
    """One journalled query and its parsed answer."""

    task: LocalizationTask
    backend_id: str
    prompt_hash: str
    image_hash: str
    raw_response: str
    received_at: str
    parse_result: ParseResult
    attempts: int = 1
    transport_error: Optional[str] = None

    @property
    def cache_key(self) -> Tuple[str, str, str]:
        """Key shared with the response cache."""
        return self.backend_id, self.image_hash, self.prompt_hash

    @property
    def cell(self) -> Optional[GridCell]:
        """Parsed cell, if any."""
        if isinstance(self.parse_result, ParsedCell):
            return self.parse_result.cell
        return None

    def to_json(self) -> str:
        """Serialize to one JSON line."""
        task = self.task
        if isinstance(self.parse_result, ParsedCell):
            parsed = {
                "cell": self.parse_result.label,
                "row": self.parse_result.cell.row,
                "col": self.parse_result.cell.col,
                "ambiguous": self.parse_result.ambiguous,
            }
        else:
            parsed = {"failure": self.parse_result.reason}
        return json.dumps(
            {
                "task": {
                    "image_id": task.image_id,
                    "pathology": task.pathology.value,
                    "view": str(task.view),
                    "grid": {
                        "rows": task.grid.rows,
                        "cols": task.grid.cols,
                        "canvas_side": task.grid.canvas_side,
                    },
                },
                "backend_id": self.backend_id,
                "prompt_hash": self.prompt_hash,
                "image_hash": self.image_hash,
                "raw_response": self.raw_response,
                "received_at": self.received_at,
                "parse_result": parsed,
                "attempts": self.attempts,
                "transport_error": self.transport_error,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "QueryRecord":
        """Parse one JSON line."""
        data = json.loads(line)
        task_data = data["task"]
        grid = GridSpec(**task_data["grid"])
        task = LocalizationTask(
            image_id=task_data["image_id"],
            pathology=Pathology(task_data["pathology"]),
            view=ViewPosition.parse(task_data["view"]),
            grid=grid,
        )
        parsed = data["parse_result"]
        if "failure" in parsed:
            result: ParseResult = ParseFailure(parsed["failure"])
        else:
            result = ParsedCell(
                GridCell(parsed["row"], parsed["col"]), parsed["cell"], parsed["ambiguous"]
            )
        return cls(
            task=task,
            backend_id=data["backend_id"],
            prompt_hash=data["prompt_hash"],
            image_hash=data["image_hash"],
            raw_response=data["raw_response"],
            received_at=data["received_at"],
            parse_result=result,
            attempts=data.get("attempts", 1),
            transport_error=data.get("transport_error"),
        )


def build_prompt(task: LocalizationTask, image_bytes: bytes = b"", describe_axes: bool = True):
    """Fill the localization prompt template for a task.

    Args:
        task: the (image, pathology) query.
        image_bytes: rendered gridded image.
        describe_axes: state the row-letter/column-number convention in the prompt.

    Returns:
        PromptBundle with byte-stable texts.
    """
    view = task.view.word
    return PromptBundle(
        system_text=SYSTEM_TEMPLATE.format(view=view),
        user_text=USER_TEMPLATE.format(
            view=view,
            condition=task.pathology.display_name,
            axes=AXES_SENTENCE if describe_axes else "",
        ),
        image_bytes=image_bytes,
    )


def parse_cell(raw: str, spec: GridSpec) -> ParseResult:
    """Find the grid coordinate in a free-text response.

    The first distinct in-range coordinate wins; more than one distinct coordinate marks
    the result ambiguous.
    """
    if not raw or not raw.strip():
        return ParseFailure("empty_response")
    found: List[GridCell] = []
    out_of_range = False
    for letters, digits in _COORDINATE_RE.findall(raw):
        try:
            cell = cell_of(spec, f"{letters}{digits}")
        except CellOutOfRangeError:
            out_of_range = True
            continue
        if cell not in found:
            found.append(cell)
    if not found:
        return ParseFailure("out_of_range" if out_of_range else "no_coordinate")
    return ParsedCell(found[0], label_of(spec, found[0]), ambiguous=len(found) > 1)


class TaskResources(Protocol):
    """What a backend run needs to know about a task besides the prompt."""

    def rendered_image(self, task: LocalizationTask) -> bytes:
        """PNG bytes of the rendered overlay."""
        ...

    def overlap_grid(self, task: LocalizationTask) -> OverlapGrid:
        """Overlap fractions for the task."""
        ...


class Backend(ABC):
    """A model answering one localization prompt with free text."""

    def __init__(self, config: BackendConfig):
        self.config = config
        self._lock = threading.Lock()
        self.request_count = 0

    @property
    def backend_id(self) -> str:
        """Identifier of this backend."""
        return self.config.backend_id

    def complete(
        self, task: LocalizationTask, bundle: PromptBundle, resources: TaskResources
    ) -> str:
        """Send one request and return the raw text answer."""
        with self._lock:
            self.request_count += 1
        return self._complete(task, bundle, resources)

    @abstractmethod
    def _complete(
        self, task: LocalizationTask, bundle: PromptBundle, resources: TaskResources
    ) -> str: ...


class HttpChatBackend(Backend):
    """OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(self, config: BackendConfig, session: Optional[requests.Session] = None):
        super().__init__(config)
        self.session = session or requests.Session()

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env:
            key = os.environ.get(self.config.api_key_env, "")
            if not key:
                raise BackendAuthError(
                    f"Environment variable '{self.config.api_key_env}' for backend "
                    f"'{self.backend_id}' is not set"
                )
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def payload(self, bundle: PromptBundle) -> Dict[str, Any]:
        """Request body: system message, then user text and the base64 PNG."""
        image_url = "data:image/png;base64," + base64.b64encode(bundle.image_bytes).decode()
        body: Dict[str, Any] = {
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": bundle.system_text},
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": bundle.user_text},
                        {"type": "image_url", "image_url": {"url": image_url}},
                    ],
                },
            ],
        }
        if self.config.temperature is not None:
            body["temperature"] = self.config.temperature
        if self.config.reasoning_effort is not None:
            body["reasoning_effort"] = self.config.reasoning_effort
        return body

    def _complete(
        self, task: LocalizationTask, bundle: PromptBundle, resources: TaskResources
    ) -> str:
        url = str(self.config.endpoint)
        try:
            response = self.session.post(
                url,
                json=self.payload(bundle),
                headers=self._headers(),
                timeout=self.config.request_timeout,
            )
        except (requests.exceptions.Timeout, requests.exceptions.ConnectionError) as e:
            raise TransientBackendError(f"Request to '{url}' failed: {e}")
        except requests.exceptions.RequestException as e:
            raise PermanentBackendError(f"Request to '{url}' failed: {e}")

        if response.status_code in (401, 403):
            raise BackendAuthError(
                f"Backend '{self.backend_id}' rejected credentials ({response.status_code})"
            )
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientBackendError(
                f"Backend '{self.backend_id}' answered {response.status_code}"
            )
        try:
            response.raise_for_status()
            return response.json()["choices"][0]["message"]["content"] or ""
        except requests.exceptions.RequestException as e:
            raise PermanentBackendError(f"Backend '{self.backend_id}' failed: {e}")
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise PermanentBackendError(
                f"Backend '{self.backend_id}' returned an unexpected body: {e!r}"
            )


def create_backend(config: BackendConfig, seed: int = 0) -> Backend:
    """Instantiate the backend a configuration describes."""
    if config.kind == "http_chat":
        return HttpChatBackend(config)
    from simulated import create_simulated_backend

    return create_simulated_backend(config, seed)


class RateLimiter:
    """Spaces request starts at least ``min_interval`` seconds apart."""

    def __init__(self, min_interval: float):
        self.min_interval = min_interval
        self._lock = threading.Lock()
        self._next_slot = 0.0

    def wait(self) -> None:
        """Sleep until the next request may go out."""
        if self.min_interval <= 0:
            return
        with self._lock:
            now = time.monotonic()
            start = max(now, self._next_slot)
            self._next_slot = start + self.min_interval
        if start > now:
            time.sleep(start - now)


class QueryJournal:
    """Append-only newline-delimited JSON journal of QueryRecords."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def load(self) -> Dict[Tuple[str, str, str], QueryRecord]:
        """Read all complete records; a torn final line is ignored."""
        records: Dict[Tuple[str, str, str], QueryRecord] = {}
        if not self.path.exists():
            return records
        try:
            lines = self.path.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise JournalError(f"Failed to read journal '{self.path}': {e}")
        for number, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                record = QueryRecord.from_json(line)
            except (ValueError, KeyError, TypeError) as e:
                logger.warning(f"Ignoring unreadable journal line {number} of '{self.path}': {e}")
                continue
            if record.cache_key in records:
                logger.warning(f"Duplicate journal entry {record.cache_key} in '{self.path}'")
            records[record.cache_key] = record
        return records

    def _ends_with_newline(self) -> bool:
        with open(self.path, "rb") as f:
            f.seek(-1, os.SEEK_END)
            return f.read(1) == b"\n"

    def append(self, record: QueryRecord) -> None:
        """Append one record, first closing off a torn final line left by a crash."""
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            torn = self.path.exists() and self.path.stat().st_size > 0
            torn = torn and not self._ends_with_newline()
            with open(self.path, "ab") as f:
                line = record.to_json() + "\n"
                f.write((("\n" + line) if torn else line).encode("utf-8"))
                f.flush()
                os.fsync(f.fileno())
        except OSError as e:
            raise JournalError(f"Failed to write journal '{self.path}': {e}")

    def drop_transport_failures(self) -> int:
        """Rewrite the journal without transport-failure records; returns how many went."""
        records = self.load()
        kept = [r for r in records.values() if r.transport_error is None]
        dropped = len(records) - len(kept)
        if dropped == 0:
            return 0
        temporary = self.path.with_suffix(self.path.suffix + ".tmp")
        try:
            with open(temporary, "w", encoding="utf-8") as f:
                for record in kept:
                    f.write(record.to_json() + "\n")
            os.replace(temporary, self.path)
        except OSError as e:
            raise JournalError(f"Failed to rewrite journal '{self.path}': {e}")
        logger.info(f"Dropped {dropped} transport failures from '{self.path}'")
        return dropped


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _query_with_retries(
    backend: Backend,
    task: LocalizationTask,
    bundle: PromptBundle,
    resources: TaskResources,
    limiter: RateLimiter,
) -> QueryRecord:
    config = backend.config
    last_error = None
    attempt = 0
    for attempt in range(1, config.max_retries + 2):
        limiter.wait()
        try:
            with span("query", backend=backend.backend_id, image_id=task.image_id):
                raw = backend.complete(task, bundle, resources)
        except TransientBackendError as e:
            last_error = e.message
            logger.info(
                f"Attempt {attempt}/{config.max_retries + 1} for {task.key} on "
                f"'{backend.backend_id}' failed: {e.message}"
            )
            if attempt <= config.max_retries:
                time.sleep(config.backoff_base * 2 ** (attempt - 1))
            continue
        except PermanentBackendError as e:
            last_error = e.message
            break
        logger.debug(f"{task.key} on '{backend.backend_id}' answered after {attempt} attempt(s)")
        return QueryRecord(
            task=task,
            backend_id=backend.backend_id,
            prompt_hash=bundle.prompt_hash,
            image_hash=bundle.image_hash,
            raw_response=raw,
            received_at=_now(),
            parse_result=parse_cell(raw, task.grid),
            attempts=attempt,
        )
    logger.error(f"Giving up on {task.key} for '{backend.backend_id}': {last_error}")
    return QueryRecord(
        task=task,
        backend_id=backend.backend_id,
        prompt_hash=bundle.prompt_hash,
        image_hash=bundle.image_hash,
        raw_response="",
        received_at=_now(),
        parse_result=ParseFailure(TRANSPORT_FAILURE),
        attempts=attempt,
        transport_error=last_error,
    )


def run_queries(
    tasks: Sequence[LocalizationTask],
    backend_config: BackendConfig,
    cache_path: Union[str, Path],
    resources: TaskResources,
    backend: Optional[Backend] = None,
    seed: int = 0,
    describe_axes: bool = True,
    retry_transport_failures: bool = False,
) -> List[QueryRecord]:
    """Query every task not already journalled and return one record per task.

    Raises:
        BackendAuthError: the backend rejected our credentials; nothing further is sent.
        JournalError: the journal cannot be written.

    Any error raised by a request stops new submissions; requests already in flight are
    awaited and their answers journalled before the first error is re-raised.
    """
    backend = backend or create_backend(backend_config, seed)
    journal = QueryJournal(cache_path)
    if retry_transport_failures:
        journal.drop_transport_failures()
    cached = journal.load()

    bundles: List[Tuple[LocalizationTask, PromptBundle]] = []
    results: Dict[int, QueryRecord] = {}
    pending: List[int] = []
    first_by_key: Dict[Tuple[str, str, str], int] = {}
    for index, task in enumerate(tasks):
        bundle = build_prompt(task, resources.rendered_image(task), describe_axes)
        bundles.append((task, bundle))
        key = (backend_config.backend_id, bundle.image_hash, bundle.prompt_hash)
        if key in cached:
            results[index] = replace(cached[key], task=task)
        elif key not in first_by_key:
            first_by_key[key] = index
            pending.append(index)
    logger.info(
        f"Journal '{journal.path}' has {len(results)} of {len(tasks)} tasks for "
        f"'{backend_config.backend_id}', sending {len(pending)} new requests"
    )

    limiter = RateLimiter(backend_config.min_request_interval)
    fatal: Optional[Exception] = None
    with ThreadPoolExecutor(max_workers=backend_config.max_in_flight) as pool:
        in_flight = {}
        queue = list(pending)
        while (queue and fatal is None) or in_flight:
            while fatal is None and queue and len(in_flight) < backend_config.max_in_flight:
                index = queue.pop(0)
                task, bundle = bundles[index]
                future = pool.submit(
                    _query_with_retries, backend, task, bundle, resources, limiter
                )
                in_flight[future] = index
            done, _ = wait(in_flight, return_when=FIRST_COMPLETED)
            for future in done:
                index = in_flight.pop(future)
                if future.cancelled():
                    queue.append(index)
                    continue
                try:
                    record = future.result()
                except Exception as e:
                    # keep draining so answers already received still reach the journal
                    if fatal is None:
                        fatal = e
                        for other in in_flight:
                            other.cancel()
                    continue
                # the calling thread is the journal's only writer
                journal.append(record)
                results[index] = record
    if fatal is not None:
        if isinstance(fatal, BackendAuthError):
            logger.error(
                f"Backend '{backend_config.backend_id}' failed authentication, "
                f"{len(queue)} tasks not sent"
            )
        raise fatal

    records = []
    for index, (task, bundle) in enumerate(bundles):
        record = results.get(index)
        if record is None:
            # repeated task: reuse the answer of its first occurrence
            key = (backend_config.backend_id, bundle.image_hash, bundle.prompt_hash)
            record = replace(results[first_by_key[key]], task=task)
        records.append(record)
    return records


def journal_records(
    tasks: Sequence[LocalizationTask],
    backend_id: str,
    cache_path: Union[str, Path],
    resources: TaskResources,
    describe_axes: bool = True,
) -> Tuple[List[QueryRecord], List[LocalizationTask]]:
    """Journalled records of the given tasks, without contacting any backend.

    Returns:
        (records in task order, tasks with no journalled answer)
    """
    cached = QueryJournal(cache_path).load()
    records, missing = [], []
    for task in tasks:
        bundle = build_prompt(task, resources.rendered_image(task), describe_axes)
        record = cached.get((backend_id, bundle.image_hash, bundle.prompt_hash))
        if record is None:
            missing.append(task)
        else:
            records.append(replace(record, task=task))
    return records, missing
