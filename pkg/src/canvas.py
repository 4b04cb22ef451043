"""Canonical image frame, grid geometry, cell labels and grid rendering.

Every image is centrally cropped to a square and resampled to ``canvas_side`` pixels;
masks follow the same crop with nearest-neighbour sampling. Grid cells are addressed by
a row letter (A, B, ..., Z, AA, AB, ...) followed by a 1-based column number, so the
top-left cell is ``A1``.
"""

import functools
import io
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw, ImageFont, UnidentifiedImageError

from masks import BinaryMask

logger = logging.getLogger(__name__)

DEFAULT_CANVAS_SIDE = 256
MAX_GRID_ROWS = 26 + 26 * 26

_LABEL_RE = re.compile(r"^\s*([A-Za-z]{1,2})(\d+)\s*$")


class CanvasError(Exception):
    """Base class for canvas errors."""

    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


class GridSpecError(CanvasError):
    """Raised if a grid specification is not usable."""


class CellOutOfRangeError(CanvasError):
    """Raised if a cell or label falls outside its grid."""


class LabelFormatError(CanvasError):
    """Raised if a label is not a letter run followed by a number."""


class LabelFitError(CanvasError):
    """Raised if the grid is too fine for labels to fit in its cells."""


class UnreadableImageError(CanvasError):
    """Raised if an image cannot be decoded."""


class DimensionMismatchError(CanvasError):
    """Raised if a mask does not match the image it belongs to."""


@dataclass(frozen=True)
class GridSpec:
    """A rows x cols grid laid over a square canvas."""

    rows: int = 8
    cols: int = 8
    canvas_side: int = DEFAULT_CANVAS_SIDE

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise GridSpecError(f"Grid needs at least one row and column, got {self.name}")
        if self.rows > MAX_GRID_ROWS:
            raise GridSpecError(f"At most {MAX_GRID_ROWS} rows can be labelled, got {self.rows}")
        if self.canvas_side < max(self.rows, self.cols):
            raise GridSpecError(
                f"Canvas side {self.canvas_side} is smaller than the {self.name} grid"
            )

    @classmethod
    def parse(cls, text: str, canvas_side: int = DEFAULT_CANVAS_SIDE) -> "GridSpec":
        """Parse ``"8x8"`` style grid names."""
        match = re.fullmatch(r"\s*(\d+)\s*[xX×]\s*(\d+)\s*", str(text))
        if not match:
            raise GridSpecError(f"Cannot parse grid '{text}', expected e.g. '8x8'")
        return cls(int(match.group(1)), int(match.group(2)), canvas_side)

    @property
    def name(self) -> str:
        """Label such as ``8x8``."""
        return f"{self.rows}x{self.cols}"

    @property
    def cell_count(self) -> int:
        """Number of cells in the grid."""
        return self.rows * self.cols

    def cells(self) -> Iterator["GridCell"]:
        """All cells in row-major order."""
        for row in range(self.rows):
            for col in range(self.cols):
                yield GridCell(row, col)

    def row_bounds(self) -> np.ndarray:
        """First pixel row of every cell, plus the canvas side as a sentinel."""
        return (np.arange(self.rows + 1) * self.canvas_side) // self.rows

    def col_bounds(self) -> np.ndarray:
        """First pixel column of every cell, plus the canvas side as a sentinel."""
        return (np.arange(self.cols + 1) * self.canvas_side) // self.cols

    def contains(self, cell: "GridCell") -> bool:
        """Whether ``cell`` lies inside this grid."""
        return 0 <= cell.row < self.rows and 0 <= cell.col < self.cols


@dataclass(frozen=True, order=True)
class GridCell:
    """A zero-based (row, col) grid position."""

    row: int
    col: int


@dataclass(frozen=True)
class PixelRect:
    """Inclusive pixel bounds on the canonical canvas."""

    row_start: int
    row_end: int
    col_start: int
    col_end: int

    @property
    def height(self) -> int:
        """Rows covered, inclusive."""
        return self.row_end - self.row_start + 1

    @property
    def width(self) -> int:
        """Columns covered, inclusive."""
        return self.col_end - self.col_start + 1

    @property
    def area(self) -> int:
        """Pixel count of the box."""
        return self.height * self.width

    @property
    def slices(self) -> Tuple[slice, slice]:
        """Numpy (rows, cols) slices selecting this rectangle."""
        return slice(self.row_start, self.row_end + 1), slice(self.col_start, self.col_end + 1)


@dataclass(frozen=True, eq=False)
class CanonicalImage:
    """A square 8-bit grayscale (side, side) or RGB (side, side, 3) image."""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.array(self.pixels, dtype=np.uint8, order="C", copy=True)
        if pixels.ndim not in (2, 3) or pixels.shape[0] != pixels.shape[1]:
            raise CanvasError(f"Canonical images must be square, got shape {pixels.shape}")
        if pixels.ndim == 3 and pixels.shape[2] != 3:
            raise CanvasError(f"Colour canonical images must be RGB, got shape {pixels.shape}")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @property
    def side(self) -> int:
        """Edge length in pixels."""
        return int(self.pixels.shape[0])

    @property
    def mode(self) -> str:
        """Pillow mode of the pixels."""
        return "L" if self.pixels.ndim == 2 else "RGB"

    def to_pil(self) -> Image.Image:
        """Copy of the pixels as a Pillow image."""
        return Image.fromarray(np.array(self.pixels))

    @classmethod
    def from_pil(cls, image: Image.Image) -> "CanonicalImage":
        """Wrap a Pillow image."""
        return cls(np.asarray(image))

    def __eq__(self, other) -> bool:
        """Compare pixel contents."""
        if not isinstance(other, CanonicalImage):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True)
class CropGeometry:
    """Maps between a native width x height frame and the canonical square frame."""

    width: int
    height: int
    canvas_side: int = DEFAULT_CANVAS_SIDE

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise CanvasError(f"Image dimensions must be positive, got {self.width}x{self.height}")

    @property
    def crop_side(self) -> int:
        """Edge of the centred square crop."""
        return min(self.width, self.height)

    @property
    def left(self) -> int:
        """Left edge of the crop in source pixels."""
        return (self.width - self.crop_side) // 2

    @property
    def top(self) -> int:
        """Top edge of the crop in source pixels."""
        return (self.height - self.crop_side) // 2

    @property
    def box(self) -> Tuple[int, int, int, int]:
        """Pillow crop box (left, upper, right, lower)."""
        return self.left, self.top, self.left + self.crop_side, self.top + self.crop_side

    def source_indices(self, offset: int) -> np.ndarray:
        """Native index sampled by each canonical index along one axis.

        A canonical pixel samples the native pixel under its centre, so this is where
        nearest-neighbour mask sampling and the bilinear image kernel are centred.
        """
        canonical = np.arange(self.canvas_side, dtype=np.int64)
        return offset + ((2 * canonical + 1) * self.crop_side) // (2 * self.canvas_side)

    def source_rows(self) -> np.ndarray:
        """Source row sampled by each canonical row."""
        return self.source_indices(self.top)

    def source_cols(self) -> np.ndarray:
        """Source column sampled by each canonical column."""
        return self.source_indices(self.left)

    def canonical_point(self, x: int, y: int) -> Optional[Tuple[int, int]]:
        """Canonical (row, col) of the native pixel (x, y), None if cropped away."""
        cx, cy = x - self.left, y - self.top
        if not (0 <= cx < self.crop_side and 0 <= cy < self.crop_side):
            return None
        scale = 2 * self.crop_side
        return (
            ((2 * cy + 1) * self.canvas_side) // scale,
            ((2 * cx + 1) * self.canvas_side) // scale,
        )


def _open_image(image: Union[Image.Image, str, Path, bytes]) -> Image.Image:
    if isinstance(image, Image.Image):
        return image
    try:
        if isinstance(image, bytes):
            opened = Image.open(io.BytesIO(image))
        else:
            opened = Image.open(str(image))
        opened.load()
    except (OSError, UnidentifiedImageError) as e:
        raise UnreadableImageError(f"Failed to read image '{image!s:.200}': {e}")
    return opened


def _to_8bit(image: Image.Image) -> Image.Image:
    """Bring any Pillow mode into L or RGB."""
    if image.mode in ("L", "RGB"):
        return image
    if image.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
        values = np.asarray(image, dtype=np.float64)
        high = values.max()
        scaled = np.zeros_like(values) if high <= 0 else values * (255.0 / high)
        return Image.fromarray(np.clip(np.rint(scaled), 0, 255).astype(np.uint8))
    if image.mode in ("1", "LA", "La"):
        return image.convert("L")
    return image.convert("RGB")


def _bilinear_axis(length: int, out_side: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower/upper source taps and upper weight for pixel-centre aligned resampling."""
    coords = (np.arange(out_side, dtype=np.float64) + 0.5) * (length / out_side) - 0.5
    coords = np.clip(coords, 0.0, length - 1)
    lower = np.floor(coords).astype(np.int64)
    upper = np.minimum(lower + 1, length - 1)
    return lower, upper, coords - lower


def _resample_bilinear(pixels: np.ndarray, out_side: int) -> np.ndarray:
    """Textbook 4-tap bilinear resampling of a square (side, side[, 3]) array.

    Every output pixel is a convex combination of the 4 native pixels around its centre,
    whatever the scale factor.
    """
    values = pixels.astype(np.float64)
    extra = (1,) * (values.ndim - 2)
    top, bottom, wy = _bilinear_axis(values.shape[0], out_side)
    left, right, wx = _bilinear_axis(values.shape[1], out_side)
    wy = wy.reshape((-1, 1) + extra)
    rows = values[top] * (1.0 - wy) + values[bottom] * wy
    wx = wx.reshape((1, -1) + extra)
    resampled = rows[:, left] * (1.0 - wx) + rows[:, right] * wx
    return np.clip(np.rint(resampled), 0, 255).astype(np.uint8)


def preprocess(
    image: Union[Image.Image, str, Path, bytes], canvas_side: int = DEFAULT_CANVAS_SIDE
) -> CanonicalImage:
    """Centre-crop to a square and resample bilinearly to canvas_side x canvas_side."""
    source = _to_8bit(_open_image(image))
    geometry = CropGeometry(source.width, source.height, canvas_side)
    cropped = np.asarray(source.crop(geometry.box))
    return CanonicalImage(_resample_bilinear(cropped, canvas_side))


def transform_mask(
    mask: BinaryMask,
    canvas_side: int = DEFAULT_CANVAS_SIDE,
    native_size: Optional[Tuple[int, int]] = None,
) -> BinaryMask:
    """Apply the canonical crop to a native-frame mask with nearest-neighbour sampling.

    Args:
        mask: mask in the native frame of its image.
        canvas_side: side of the canonical frame.
        native_size: (width, height) of the governing image, checked when given.

    Returns:
        The canonical-frame mask.
    """
    if native_size is not None and tuple(native_size) != mask.size:
        raise DimensionMismatchError(
            f"Mask is {mask.width}x{mask.height} but its image is "
            f"{native_size[0]}x{native_size[1]}"
        )
    geometry = CropGeometry(mask.width, mask.height, canvas_side)
    return BinaryMask(mask.bits[np.ix_(geometry.source_rows(), geometry.source_cols())])


def cell_rect(spec: GridSpec, cell: GridCell) -> PixelRect:
    """Pixel rectangle of a cell; floor-based bounds tile the canvas exactly."""
    if not spec.contains(cell):
        raise CellOutOfRangeError(f"Cell {cell} is outside the {spec.name} grid")
    side = spec.canvas_side
    return PixelRect(
        row_start=cell.row * side // spec.rows,
        row_end=(cell.row + 1) * side // spec.rows - 1,
        col_start=cell.col * side // spec.cols,
        col_end=(cell.col + 1) * side // spec.cols - 1,
    )


def cell_at(spec: GridSpec, y: int, x: int) -> GridCell:
    """The cell containing canonical pixel (y, x)."""
    side = spec.canvas_side
    if not (0 <= y < side and 0 <= x < side):
        raise CellOutOfRangeError(f"Pixel ({y}, {x}) is outside the {side}px canvas")
    row = ((y + 1) * spec.rows + side - 1) // side - 1
    col = ((x + 1) * spec.cols + side - 1) // side - 1
    return GridCell(row, col)


def _row_letters(row: int) -> str:
    if row < 26:
        return chr(ord("A") + row)
    first, second = divmod(row - 26, 26)
    return chr(ord("A") + first) + chr(ord("A") + second)


def _letters_row(letters: str) -> int:
    letters = letters.upper()
    if len(letters) == 1:
        return ord(letters) - ord("A")
    return 26 + (ord(letters[0]) - ord("A")) * 26 + (ord(letters[1]) - ord("A"))


def label_of(spec: GridSpec, cell: GridCell) -> str:
    """Alphanumeric label, e.g. (2, 4) -> 'C5'."""
    if not spec.contains(cell):
        raise CellOutOfRangeError(f"Cell {cell} is outside the {spec.name} grid")
    return f"{_row_letters(cell.row)}{cell.col + 1}"


def cell_of(spec: GridSpec, label: str) -> GridCell:
    """Inverse of label_of, case-insensitive."""
    match = _LABEL_RE.match(label)
    if not match:
        raise LabelFormatError(f"'{label}' is not a grid coordinate (letter then number)")
    cell = GridCell(_letters_row(match.group(1)), int(match.group(2)) - 1)
    if not spec.contains(cell):
        raise CellOutOfRangeError(f"'{label}' is outside the {spec.name} grid")
    return cell


@dataclass(frozen=True)
class GridStyle:
    """Overlay styling; defaults stay legible on 32px cells."""

    line_color: Tuple[int, int, int] = (0, 255, 0)
    label_color: Tuple[int, int, int] = (255, 255, 0)
    max_font_size: int = 11
    min_font_size: int = 6
    label_offset: int = 2


def interior_rect(spec: GridSpec, cell: GridCell) -> Optional[PixelRect]:
    """Pixels of a cell that grid lines never touch, None if there are none."""
    rect = cell_rect(spec, cell)
    last = spec.canvas_side - 1
    row_end = rect.row_end - 1 if rect.row_end == last else rect.row_end
    col_end = rect.col_end - 1 if rect.col_end == last else rect.col_end
    if rect.row_start + 1 > row_end or rect.col_start + 1 > col_end:
        return None
    return PixelRect(rect.row_start + 1, row_end, rect.col_start + 1, col_end)


def _font(size: int) -> ImageFont.FreeTypeFont:
    return ImageFont.load_default(size=size)


@functools.lru_cache(maxsize=16)
def label_layout(spec: GridSpec, style: GridStyle = GridStyle()):
    """Pick the label font and place every label.

    Returns:
        (font, {cell: ((x, y) text origin, (left, top, right, bottom) glyph box)}); box
        right/bottom are exclusive.

    Raises:
        LabelFitError: if no font size between min and max fits every cell.
    """
    scratch = ImageDraw.Draw(Image.new("L", (1, 1)))
    for size in range(style.max_font_size, style.min_font_size - 1, -1):
        font = _font(size)
        layout = {}
        for cell in spec.cells():
            interior = interior_rect(spec, cell)
            if interior is None:
                break
            rect = cell_rect(spec, cell)
            origin = (rect.col_start + style.label_offset, rect.row_start + style.label_offset)
            box = scratch.textbbox(origin, label_of(spec, cell), font=font, anchor="lt")
            if box[0] < interior.col_start or box[1] < interior.row_start:
                break
            if box[2] > interior.col_end or box[3] > interior.row_end:
                break
            layout[cell] = (origin, box)
        else:
            return font, layout
    raise LabelFitError(
        f"Labels do not fit the cells of a {spec.name} grid on a "
        f"{spec.canvas_side}px canvas at font size {style.min_font_size} or larger"
    )


def render_grid(img: CanonicalImage, spec: GridSpec, style: GridStyle = GridStyle()) -> bytes:
    """Draw grid lines and cell labels over a canonical image and return PNG bytes."""
    if img.side != spec.canvas_side:
        raise CanvasError(f"Image side {img.side} does not match the {spec.canvas_side}px grid")
    font, layout = label_layout(spec, style)
    canvas = img.to_pil().convert("RGB")
    draw = ImageDraw.Draw(canvas)
    last = spec.canvas_side - 1
    for y in list(spec.row_bounds()[:-1]) + [last]:
        draw.line([(0, int(y)), (last, int(y))], fill=style.line_color, width=1)
    for x in list(spec.col_bounds()[:-1]) + [last]:
        draw.line([(int(x), 0), (int(x), last)], fill=style.line_color, width=1)
    for cell, (origin, _) in layout.items():
        draw.text(origin, label_of(spec, cell), fill=style.label_color, font=font, anchor="lt")
    buffer = io.BytesIO()
    canvas.save(buffer, format="PNG", optimize=False, compress_level=6)
    return buffer.getvalue()
