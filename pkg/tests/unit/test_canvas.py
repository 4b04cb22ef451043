import io
import unittest
from pathlib import Path

import numpy as np
from PIL import Image

from canvas import (
    CanonicalImage,
    CellOutOfRangeError,
    CropGeometry,
    DimensionMismatchError,
    GridCell,
    GridSpec,
    GridSpecError,
    GridStyle,
    LabelFitError,
    LabelFormatError,
    UnreadableImageError,
    cell_at,
    cell_of,
    cell_rect,
    interior_rect,
    label_layout,
    label_of,
    preprocess,
    render_grid,
    transform_mask,
)
from masks import BinaryMask

GOLDEN = Path(__file__).parent / "fixtures" / "golden"


def gradient_image(width, height):
    values = (np.add.outer(np.arange(height), np.arange(width)) % 256).astype(np.uint8)
    return Image.fromarray(values)


def decode(png):
    return np.asarray(Image.open(io.BytesIO(png)).convert("RGB"))


def line_pixels(spec):
    last = spec.canvas_side - 1
    lines = np.zeros((spec.canvas_side, spec.canvas_side), dtype=bool)
    lines[list(spec.row_bounds()[:-1]) + [last], :] = True
    lines[:, list(spec.col_bounds()[:-1]) + [last]] = True
    return lines


def glyph_pixels(spec, pad=1):
    _, layout = label_layout(spec)
    glyphs = np.zeros((spec.canvas_side, spec.canvas_side), dtype=bool)
    for _, box in layout.values():
        left, top, right, bottom = (int(v) for v in box)
        glyphs[max(top - pad, 0) : bottom + pad, max(left - pad, 0) : right + pad] = True
    return glyphs


class TestGridGeometry(unittest.TestCase):
    def test_eight_by_eight_cells_are_32_pixels(self):
        spec = GridSpec(8, 8, 256)
        for cell in spec.cells():
            rect = cell_rect(spec, cell)
            self.assertEqual((rect.height, rect.width), (32, 32))

    def test_sixteen_by_sixteen_cells_are_16_pixels(self):
        spec = GridSpec(16, 16, 256)
        for cell in spec.cells():
            rect = cell_rect(spec, cell)
            self.assertEqual((rect.height, rect.width), (16, 16))

    def test_cells_tile_canvas_exactly(self):
        for spec in (GridSpec(8, 8), GridSpec(16, 16), GridSpec(7, 5, 100)):
            coverage = np.zeros((spec.canvas_side, spec.canvas_side), dtype=np.int64)
            for cell in spec.cells():
                coverage[cell_rect(spec, cell).slices] += 1
            self.assertTrue((coverage == 1).all(), spec.name)

    def test_cell_at_agrees_with_cell_rect(self):
        spec = GridSpec(7, 5, 100)
        for cell in spec.cells():
            rect = cell_rect(spec, cell)
            for y in (rect.row_start, rect.row_end):
                for x in (rect.col_start, rect.col_end):
                    self.assertEqual(cell_at(spec, y, x), cell)

    def test_cell_at_out_of_canvas(self):
        with self.assertRaises(CellOutOfRangeError):
            cell_at(GridSpec(), 256, 0)

    def test_parse(self):
        self.assertEqual(GridSpec.parse("16x16"), GridSpec(16, 16))
        self.assertEqual(GridSpec.parse("4X6").name, "4x6")
        with self.assertRaises(GridSpecError):
            GridSpec.parse("eight")
        with self.assertRaises(GridSpecError):
            GridSpec(0, 8)

    def test_cells_are_row_major(self):
        cells = list(GridSpec(2, 3).cells())[:4]
        self.assertEqual(cells, [GridCell(0, 0), GridCell(0, 1), GridCell(0, 2), GridCell(1, 0)])


class TestLabels(unittest.TestCase):
    def test_label_of(self):
        spec = GridSpec()
        self.assertEqual(label_of(spec, GridCell(2, 4)), "C5")
        self.assertEqual(label_of(spec, GridCell(0, 0)), "A1")
        self.assertEqual(label_of(spec, GridCell(7, 7)), "H8")

    def test_two_letter_rows(self):
        spec = GridSpec(30, 2, 256)
        self.assertEqual(label_of(spec, GridCell(26, 0)), "AA1")
        self.assertEqual(label_of(spec, GridCell(29, 1)), "AD2")

    def test_round_trip_every_grid_up_to_26x26(self):
        specs = [GridSpec(rows, cols, 256) for rows in range(1, 27) for cols in range(1, 27)]
        for spec in specs + [GridSpec(60, 3, 256)]:
            for cell in spec.cells():
                self.assertEqual(cell_of(spec, label_of(spec, cell)), cell)

    def test_cell_of_is_case_insensitive(self):
        self.assertEqual(cell_of(GridSpec(), " c5 "), GridCell(2, 4))

    def test_cell_of_errors(self):
        with self.assertRaises(CellOutOfRangeError):
            cell_of(GridSpec(), "Z9")
        with self.assertRaises(CellOutOfRangeError):
            cell_of(GridSpec(), "A0")
        with self.assertRaises(LabelFormatError):
            cell_of(GridSpec(), "5C")
        with self.assertRaises(CellOutOfRangeError):
            label_of(GridSpec(), GridCell(8, 0))


class TestPreprocess(unittest.TestCase):
    def test_crop_geometry(self):
        geometry = CropGeometry(400, 300, 256)
        self.assertEqual(geometry.box, (50, 0, 350, 300))
        self.assertIsNone(geometry.canonical_point(10, 10))
        self.assertEqual(geometry.canonical_point(50, 0), (0, 0))
        self.assertEqual(geometry.canonical_point(349, 299), (255, 255))

    def test_preprocess_output_frame(self):
        canonical = preprocess(gradient_image(400, 300), 256)
        self.assertEqual(canonical.side, 256)
        self.assertEqual(canonical.mode, "L")

    def test_preprocess_square_identity_size(self):
        image = gradient_image(256, 256)
        canonical = preprocess(image, 256)
        np.testing.assert_array_equal(canonical.pixels, np.asarray(image))

    def test_preprocess_sixteen_bit(self):
        values = (np.arange(300 * 300, dtype=np.uint32).reshape(300, 300) % 4096).astype(np.int32)
        canonical = preprocess(Image.fromarray(values), 128)
        self.assertEqual(canonical.pixels.dtype, np.uint8)
        self.assertEqual(canonical.side, 128)

    def test_crop_then_resize(self):
        values = np.zeros((384, 512), dtype=np.uint8)
        values[:, :64] = 255  # cropped away on the left
        values[:, 448:] = 255  # and on the right
        image = Image.fromarray(values)

        self.assertEqual(CropGeometry(512, 384, 256).box, (64, 0, 448, 384))
        canonical = preprocess(image, 256)
        self.assertEqual(canonical.side, 256)
        self.assertFalse(canonical.pixels.any())
        self.assertEqual(canonical, preprocess(image.crop((64, 0, 448, 384)), 256))

    def test_bilinear_matches_reference_resampler(self):
        rng = np.random.default_rng(7)
        values = rng.integers(0, 256, size=(600, 1000), dtype=np.uint8)
        canonical = preprocess(Image.fromarray(values), 256)

        native = values[:, 200:800].astype(float).tolist()
        scale = 600 / 256
        taps = []
        for i in range(256):
            s = min(max((i + 0.5) * scale - 0.5, 0.0), 599.0)
            low = int(s)
            taps.append((low, min(low + 1, 599), s - low))
        expected = np.empty((256, 256))
        for i, (y0, y1, fy) in enumerate(taps):
            upper, lower = native[y0], native[y1]
            for j, (x0, x1, fx) in enumerate(taps):
                top = upper[x0] * (1 - fx) + upper[x1] * fx
                bottom = lower[x0] * (1 - fx) + lower[x1] * fx
                expected[i, j] = top * (1 - fy) + bottom * fy
        difference = np.abs(canonical.pixels.astype(float) - expected)
        self.assertLessEqual(difference.max(), 1.0)

    def test_colour_images_keep_three_channels(self):
        values = np.zeros((300, 400, 3), dtype=np.uint8)
        values[..., 0] = 200
        canonical = preprocess(Image.fromarray(values), 64)
        self.assertEqual(canonical.mode, "RGB")
        self.assertTrue((canonical.pixels[..., 0] == 200).all())
        self.assertFalse(canonical.pixels[..., 1:].any())

    def test_unreadable_image(self):
        with self.assertRaises(UnreadableImageError):
            preprocess(b"not a png", 256)

    def test_mask_follows_crop(self):
        bits = np.zeros((300, 400), dtype=bool)
        bits[:, :50] = True  # cropped away
        self.assertTrue(transform_mask(BinaryMask(bits), 256).is_empty())
        bits[:, 50] = True  # first column kept
        canonical = transform_mask(BinaryMask(bits), 256)
        self.assertTrue(canonical.bits[:, 0].all())
        self.assertFalse(canonical.bits[:, 1:].any())

    def test_mask_matches_nearest_neighbour_oracle(self):
        rng = np.random.default_rng(11)
        for height, width, side in ((300, 400, 256), (513, 257, 64), (90, 100, 128)):
            bits = rng.random((height, width)) < 0.3
            canonical = transform_mask(BinaryMask(bits), side)

            crop = min(height, width)
            top, left = (height - crop) // 2, (width - crop) // 2
            expected = np.zeros((side, side), dtype=bool)
            for r in range(side):
                y = top + int((r + 0.5) * crop / side)
                for c in range(side):
                    expected[r, c] = bits[y, left + int((c + 0.5) * crop / side)]
            np.testing.assert_array_equal(canonical.bits, expected)
            self.assertEqual(canonical.foreground_count(), int(expected.sum()))

    def test_mask_and_image_share_geometry(self):
        rng = np.random.default_rng(5)
        side = 64
        checked = 0
        for _ in range(200):
            width, height = (int(v) for v in rng.integers(64, 128, size=2))
            x, y = int(rng.integers(0, width)), int(rng.integers(0, height))
            bits = np.zeros((height, width), dtype=bool)
            bits[y, x] = True
            values = np.zeros((height, width), dtype=np.uint8)
            values[y, x] = 255

            mask = transform_mask(BinaryMask(bits), side)
            image = preprocess(Image.fromarray(values), side)
            for r, c in zip(*np.nonzero(mask.bits)):
                # the covering image pixel draws at least a quarter of its value from (x, y)
                self.assertGreaterEqual(int(image.pixels[r, c]), 63)
                checked += 1
        self.assertGreater(checked, 0)

    def test_mask_dimension_mismatch(self):
        with self.assertRaises(DimensionMismatchError):
            transform_mask(BinaryMask.empty(400, 300), 256, native_size=(300, 400))


class TestRendering(unittest.TestCase):
    def setUp(self):
        self.image = CanonicalImage(np.full((256, 256), 40, dtype=np.uint8))

    def test_caller_pixels_stay_writable(self):
        pixels = np.zeros((4, 4), dtype=np.uint8)
        image = CanonicalImage(pixels)

        pixels[0, 0] = 9
        self.assertEqual(image.pixels[0, 0], 0)
        with self.assertRaises(ValueError):
            image.pixels[0, 0] = 1

    def test_render_draws_lines_and_keeps_size(self):
        style = GridStyle()
        png = render_grid(self.image, GridSpec(), style)
        raster = np.asarray(Image.open(io.BytesIO(png)).convert("RGB"))

        self.assertEqual(raster.shape, (256, 256, 3))
        for offset in (0, 32, 224, 255):
            self.assertEqual(tuple(raster[offset, 100]), style.line_color)
            self.assertEqual(tuple(raster[100, offset]), style.line_color)

    def test_labels_stay_inside_cell_interiors(self):
        for spec in (GridSpec(8, 8), GridSpec(16, 16)):
            _, layout = label_layout(spec)
            self.assertEqual(len(layout), spec.cell_count)
            for cell, (_, box) in layout.items():
                interior = interior_rect(spec, cell)
                self.assertGreaterEqual(box[0], interior.col_start)
                self.assertGreaterEqual(box[1], interior.row_start)
                self.assertLessEqual(box[2], interior.col_end)
                self.assertLessEqual(box[3], interior.row_end)

    def test_labels_do_not_fit_tiny_cells(self):
        with self.assertRaises(LabelFitError):
            label_layout(GridSpec(64, 64, 256))

    def test_render_is_deterministic(self):
        spec = GridSpec(16, 16)
        self.assertEqual(render_grid(self.image, spec), render_grid(self.image, spec))

    def test_render_only_changes_lines_and_glyphs(self):
        rng = np.random.default_rng(3)
        for spec in (GridSpec(8, 8), GridSpec(16, 16)):
            image = CanonicalImage(rng.integers(0, 256, size=(256, 256), dtype=np.uint8))
            raster = decode(render_grid(image, spec))

            untouched = ~(line_pixels(spec) | glyph_pixels(spec))
            original = np.repeat(image.pixels[..., None], 3, axis=2)
            np.testing.assert_array_equal(raster[untouched], original[untouched])

    def test_render_matches_golden_file(self):
        # the golden raster is mid-gray with lines; label glyph boxes are compared separately
        spec = GridSpec()
        mid_gray = CanonicalImage(np.full((256, 256), 128, dtype=np.uint8))
        png = render_grid(mid_gray, spec)
        raster = decode(png)
        golden = decode((GOLDEN / "grid_8x8.png").read_bytes())

        glyphs = glyph_pixels(spec)
        np.testing.assert_array_equal(raster[~glyphs], golden[~glyphs])
        _, layout = label_layout(spec)
        for _, box in layout.values():
            left, top, right, bottom = (int(v) for v in box)
            self.assertTrue((raster[top:bottom, left:right] != 128).any())
        self.assertEqual(png, render_grid(mid_gray, spec))
