import unittest

import numpy as np

from masks import (
    BinaryMask,
    MaskError,
    RleChecksumError,
    RleMask,
    canonical_rle,
    decode_rle,
    encode_rle,
)


class TestBinaryMask(unittest.TestCase):
    def test_from_flat_is_row_major(self):
        mask = BinaryMask.from_flat(3, 2, [1, 0, 0, 0, 0, 1])

        self.assertEqual(mask.size, (3, 2))
        self.assertTrue(mask.bits[0, 0])
        self.assertTrue(mask.bits[1, 2])
        self.assertEqual(mask.foreground_count(), 2)

    def test_from_flat_rejects_wrong_length(self):
        with self.assertRaises(MaskError):
            BinaryMask.from_flat(3, 2, [1, 0, 0])

    def test_bits_are_read_only(self):
        mask = BinaryMask.empty(4, 4)
        with self.assertRaises(ValueError):
            mask.bits[0, 0] = True

    def test_caller_array_stays_writable(self):
        bits = np.zeros((4, 4), dtype=bool)
        mask = BinaryMask(bits)

        bits[0, 0] = True
        self.assertTrue(bits.flags.writeable)
        self.assertFalse(mask.bits[0, 0])

    def test_equality_compares_pixels(self):
        self.assertEqual(BinaryMask.empty(2, 3), BinaryMask(np.zeros((3, 2), dtype=bool)))
        self.assertNotEqual(BinaryMask.empty(2, 3), BinaryMask.empty(3, 2))


class TestRle(unittest.TestCase):
    def test_decode_is_column_major(self):
        # 2 wide, 3 high: first column background, second column foreground
        mask = decode_rle(RleMask((3, 3), width=2, height=3))

        expected = np.array([[0, 1], [0, 1], [0, 1]], dtype=bool)
        np.testing.assert_array_equal(mask.bits, expected)

    def test_decode_leading_zero_means_foreground_first(self):
        mask = decode_rle(RleMask((0, 1, 3), width=2, height=2))

        self.assertTrue(mask.bits[0, 0])
        self.assertEqual(mask.foreground_count(), 1)

    def test_checksum_mismatch(self):
        with self.assertRaises(RleChecksumError) as raised:
            decode_rle(RleMask((3, 2), width=2, height=2))
        self.assertIn("5", raised.exception.message)

    def test_negative_counts_rejected(self):
        with self.assertRaises(MaskError):
            RleMask((-1, 5), width=2, height=2)

    def test_encode_empty_mask(self):
        self.assertEqual(encode_rle(BinaryMask.empty(4, 2)).counts, (8,))

    def test_encode_full_mask(self):
        mask = BinaryMask(np.ones((2, 3), dtype=bool))
        self.assertEqual(encode_rle(mask).counts, (0, 6))

    def test_canonical_merges_zero_runs(self):
        rle = RleMask((2, 0, 3, 1, 0, 0, 0), width=3, height=2)
        self.assertEqual(canonical_rle(rle).counts, (5, 1))

    def test_round_trips_on_random_masks(self):
        rng = np.random.default_rng(7)
        for _ in range(500):
            height, width = rng.integers(1, 24, size=2)
            density = rng.uniform(0.0, 1.0)
            mask = BinaryMask(rng.random((height, width)) < density)
            self.assertEqual(decode_rle(encode_rle(mask)), mask)

    def test_encode_decode_gives_canonical_runs(self):
        rng = np.random.default_rng(11)
        for _ in range(500):
            width, height = (int(v) for v in rng.integers(1, 12, size=2))
            area = width * height
            cuts = np.sort(rng.integers(0, area + 1, size=int(rng.integers(0, 6))))
            counts = np.diff(np.concatenate(([0], cuts, [area]))).tolist()
            rle = RleMask(tuple(counts), width=width, height=height)
            self.assertEqual(encode_rle(decode_rle(rle)), canonical_rle(rle))
