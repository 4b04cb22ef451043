"""Binary segmentation masks and their run-length encoding.

Run-length counts follow the published annotation convention of the chest radiograph
localization corpora: pixels are scanned in column-major order and the counts alternate
background, foreground, background, ... starting with a (possibly empty) background run.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class MaskError(Exception):
    """Base class for mask errors."""

    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


class RleChecksumError(MaskError):
    """Raised if the run lengths do not add up to the mask area."""

    def __init__(self, total: int, width: int, height: int):
        self.total = total
        self.width = width
        self.height = height
        super().__init__(
            f"RLE counts sum to {total}, expected {width}x{height}={width * height}"
        )


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """A boolean mask stored as a (height, width) row-major array."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool, order="C", copy=True)
        if bits.ndim != 2:
            raise MaskError(f"Mask must be two dimensional, got shape {bits.shape}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_flat(cls, width: int, height: int, flat: Sequence[int]) -> "BinaryMask":
        """Build a mask from width*height row-major values."""
        values = np.asarray(flat, dtype=bool)
        if values.size != width * height:
            raise MaskError(
                f"Expected {width * height} mask values for {width}x{height}, got {values.size}"
            )
        return cls(values.reshape(height, width))

    @classmethod
    def empty(cls, width: int, height: int) -> "BinaryMask":
        """An all-background mask."""
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def width(self) -> int:
        """Width in pixels."""
        return int(self.bits.shape[1])

    @property
    def height(self) -> int:
        """Height in pixels."""
        return int(self.bits.shape[0])

    @property
    def size(self) -> Tuple[int, int]:
        """(width, height), the Pillow convention."""
        return self.width, self.height

    def foreground_count(self) -> int:
        """Number of set pixels."""
        return int(np.count_nonzero(self.bits))

    def is_empty(self) -> bool:
        """Whether no pixel is set."""
        return not self.bits.any()

    def __eq__(self, other) -> bool:
        """Compare bits."""
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    def __hash__(self) -> int:
        """Hash of shape and bits."""
        return hash((self.bits.shape, self.bits.tobytes()))


@dataclass(frozen=True)
class RleMask:
    """Column-major, background-first run lengths."""

    counts: Tuple[int, ...]
    width: int
    height: int
    scan_order: str = field(default="column-major", init=False)

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise MaskError("RLE counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    def validate(self) -> None:
        """Check that the runs cover the mask exactly."""
        total = sum(self.counts)
        if total != self.width * self.height:
            raise RleChecksumError(total, self.width, self.height)


def decode_rle(rle: RleMask) -> BinaryMask:
    """Expand column-major runs into a row-major BinaryMask."""
    rle.validate()
    counts = np.asarray(rle.counts, dtype=np.int64)
    # run i is foreground iff i is odd
    values = np.arange(counts.size) % 2 == 1
    flat = np.repeat(values, counts)
    # column-major scan: reshape with the column index outermost then transpose
    bits = flat.reshape(rle.width, rle.height).T
    return BinaryMask(bits)


def encode_rle(mask: BinaryMask) -> RleMask:
    """Encode a mask into canonical column-major runs."""
    flat = mask.bits.T.reshape(-1)
    if flat.size == 0:
        return RleMask(counts=(), width=mask.width, height=mask.height)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts: List[int] = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return RleMask(counts=tuple(counts), width=mask.width, height=mask.height)


def canonical_rle(rle: RleMask) -> RleMask:
    """Normalize runs: merge across zero-length interior runs, drop trailing empties."""
    rle.validate()
    merged: List[int] = []
    foreground = False
    for i, count in enumerate(rle.counts):
        value = i % 2 == 1
        if count == 0:
            continue
        if merged and value == foreground:
            merged[-1] += count
        else:
            if not merged and value:
                merged.append(0)
            merged.append(count)
            foreground = value
    return RleMask(counts=tuple(merged), width=rle.width, height=rle.height)
