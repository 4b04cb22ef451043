import hashlib
import tempfile
import unittest
from pathlib import Path

from hashing import digest_bytes, digest_dict, digest_file, digest_text, digest_update_from_file


class TestDigest(unittest.TestCase):
    def create_file(self, name, content):
        with open(self.directory_path / Path(name), "w") as f:
            f.write(content)

    def setUp(self):
        self.temporary_directory = tempfile.TemporaryDirectory()
        self.addCleanup(self.temporary_directory.cleanup)
        self.directory_path = Path(self.temporary_directory.name)

    def test_digest_update_file(self):
        self.create_file("index.yaml", "images: []\n")
        hash = hashlib.sha256()
        result = digest_update_from_file(self.directory_path / Path("index.yaml"), hash)
        self.assertEqual(result.hexdigest(), hashlib.sha256(b"images: []\n").hexdigest())

    def test_digest_file_matches_bytes(self):
        self.create_file("a.json", '{"counts": [1, 2]}')
        self.assertEqual(
            digest_file(self.directory_path / "a.json"), digest_bytes(b'{"counts": [1, 2]}')
        )

    def test_digest_text_is_utf8(self):
        self.assertEqual(digest_text("é"), digest_bytes("é".encode("utf-8")))

    def test_digest_dict_ignores_key_order(self):
        first = {"key1": "value1", "key2": [1, 2]}
        second = {"key2": [1, 2], "key1": "value1"}

        self.assertEqual(digest_dict(first), digest_dict(second))
        self.assertNotEqual(digest_dict(first), digest_dict({"key1": "value1"}))
