import tempfile
import unittest
from pathlib import Path

import numpy as np
from PIL import Image

from canvas import GridCell, GridSpec
from corpus import Pathology, ViewPosition
from masks import BinaryMask
from scorer import (
    CompleteMiss,
    EmptyMaskError,
    ErrorCategory,
    HitOutcome,
    MaskFrameError,
    ParseFailure,
    PlausibilityAtlas,
    ReviewError,
    ReviewRow,
    ScoringConfig,
    ScoringError,
    UnparseablePolicy,
    Verdict,
    categorize,
    complete_miss,
    error_breakdown,
    extrapolate_proportions,
    fallback_share,
    hit_rate,
    ingest_review,
    judge,
    overlap_fractions,
    random_baseline,
    read_score_sheet,
    sample_for_review,
    score_task,
    write_score_sheet,
)

SIDE = 64
SPEC = GridSpec(8, 8, SIDE)
FRONTAL = ViewPosition.parse("PA")
LATERAL = ViewPosition.parse("Lateral")


def mask_with(*boxes):
    bits = np.zeros((SIDE, SIDE), dtype=bool)
    for top, bottom, left, right in boxes:
        bits[top:bottom, left:right] = True
    return BinaryMask(bits)


def brute_force_verdict(bits, cell, threshold):
    fractions = {}
    for row in range(8):
        for col in range(8):
            block = bits[row * 8 : row * 8 + 8, col * 8 : col * 8 + 8]
            fractions[(row, col)] = block.sum() / 64
    fraction = fractions[(cell.row, cell.col)]
    if fraction >= threshold:
        return Verdict.FULL_HIT
    if max(fractions.values()) < threshold and fraction > 0:
        return Verdict.FALLBACK_HIT
    return Verdict.MISS


class TestOverlap(unittest.TestCase):
    def test_counts_and_fractions(self):
        grid = overlap_fractions(mask_with((0, 8, 0, 12)), SPEC)
        self.assertEqual(int(grid.counts[0, 0]), 64)
        self.assertEqual(int(grid.counts[0, 1]), 32)
        self.assertEqual(grid.fraction(GridCell(0, 1)), 0.5)
        self.assertEqual(int(grid.counts.sum()), 96)
        self.assertEqual(grid.best_cell(), GridCell(0, 0))

    def test_uneven_cells(self):
        spec = GridSpec(3, 3, 10)
        bits = np.ones((10, 10), dtype=bool)
        grid = overlap_fractions(BinaryMask(bits), spec)
        np.testing.assert_array_equal(grid.areas, [[9, 9, 12], [9, 9, 12], [12, 12, 16]])
        np.testing.assert_array_equal(grid.fractions, np.ones((3, 3)))

    def test_wrong_frame(self):
        with self.assertRaises(MaskFrameError):
            overlap_fractions(BinaryMask.empty(32, 32), SPEC)

    def test_empty_mask(self):
        with self.assertRaises(EmptyMaskError):
            overlap_fractions(BinaryMask.empty(SIDE, SIDE), SPEC)


class TestJudge(unittest.TestCase):
    def setUp(self):
        self.cfg = ScoringConfig()

    def test_full_hit_at_threshold(self):
        grid = overlap_fractions(mask_with((0, 8, 0, 12)), SPEC)
        self.assertIs(judge(GridCell(0, 1), grid, self.cfg).verdict, Verdict.FULL_HIT)
        self.assertIs(judge(GridCell(1, 1), grid, self.cfg).verdict, Verdict.MISS)

    def test_small_mask_fallback(self):
        grid = overlap_fractions(mask_with((3, 4, 3, 4)), SPEC)

        outcome = judge(GridCell(0, 0), grid, self.cfg)
        self.assertIs(outcome.verdict, Verdict.FALLBACK_HIT)
        self.assertTrue(outcome.fallback_active)
        self.assertEqual(outcome.cell_fraction, 1 / 64)

        self.assertIs(judge(GridCell(1, 1), grid, self.cfg).verdict, Verdict.MISS)
        disabled = ScoringConfig(fallback_enabled=False)
        self.assertIs(judge(GridCell(0, 0), grid, disabled).verdict, Verdict.MISS)

    def test_fallback_inactive_when_any_cell_qualifies(self):
        grid = overlap_fractions(mask_with((0, 8, 0, 8), (20, 21, 20, 21)), SPEC)
        self.assertIs(judge(GridCell(2, 2), grid, self.cfg).verdict, Verdict.MISS)

    def test_unparseable(self):
        grid = overlap_fractions(mask_with((0, 8, 0, 8)), SPEC)
        outcome = judge(ParseFailure("no_coordinate"), grid, self.cfg)
        self.assertIs(outcome.verdict, Verdict.UNPARSEABLE)
        self.assertIs(judge(None, grid, self.cfg).verdict, Verdict.UNPARSEABLE)

    def test_agrees_with_brute_force_on_random_masks(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            bits = np.zeros((SIDE, SIDE), dtype=bool)
            for _ in range(rng.integers(1, 4)):
                top, left = rng.integers(0, SIDE, size=2)
                height, width = rng.integers(1, 24, size=2)
                bits[top : top + height, left : left + width] = True
            threshold = float(rng.choice([0.25, 0.5, 0.75, 1.0]))
            cell = GridCell(int(rng.integers(0, 8)), int(rng.integers(0, 8)))
            grid = overlap_fractions(BinaryMask(bits), SPEC, threshold)

            verdict = judge(cell, grid, ScoringConfig(threshold=threshold)).verdict

            self.assertIs(verdict, brute_force_verdict(bits, cell, threshold))

    def test_threshold_range(self):
        with self.assertRaises(ScoringError):
            ScoringConfig(threshold=0)
        with self.assertRaises(ScoringError):
            ScoringConfig(threshold=1.5)


class TestRates(unittest.TestCase):
    def test_random_baseline(self):
        cfg = ScoringConfig()
        two_cells = overlap_fractions(mask_with((0, 8, 0, 12)), SPEC)
        four_cells = overlap_fractions(mask_with((8, 24, 8, 24)), SPEC)

        self.assertEqual(random_baseline([two_cells], cfg), 2 / 64)
        self.assertAlmostEqual(random_baseline([two_cells, four_cells], cfg), 3 / 64)

    def test_random_baseline_counts_fallback_cells(self):
        straddling = overlap_fractions(mask_with((6, 10, 6, 10)), SPEC)
        self.assertEqual(random_baseline([straddling], ScoringConfig()), 4 / 64)
        self.assertEqual(fallback_share([straddling], ScoringConfig()), 1.0)
        with self.assertRaises(ScoringError):
            random_baseline([], ScoringConfig())

    def test_hit_rate_policies(self):
        outcomes = [
            HitOutcome(Verdict.FULL_HIT, 1.0, False),
            HitOutcome(Verdict.MISS, 0.0, False),
            HitOutcome(Verdict.UNPARSEABLE, 0.0, False),
            HitOutcome(Verdict.FALLBACK_HIT, 0.1, True),
        ]
        self.assertEqual(hit_rate(outcomes, ScoringConfig()), 0.5)
        exclude = ScoringConfig(unparseable_policy=UnparseablePolicy.EXCLUDE)
        self.assertAlmostEqual(hit_rate(outcomes, exclude), 2 / 3)
        coerced = ScoringConfig(unparseable_policy="exclude")
        self.assertIs(coerced.unparseable_policy, UnparseablePolicy.EXCLUDE)


class TestCategorize(unittest.TestCase):
    def setUp(self):
        self.cfg = ScoringConfig()
        self.atlas = PlausibilityAtlas({Pathology.EDEMA: mask_with((0, 32, 0, SIDE))})
        self.grid = overlap_fractions(mask_with((0, 8, 0, 12)), SPEC)

    def category(self, cell, view=FRONTAL, atlas=None, pathology=Pathology.EDEMA):
        outcome = judge(cell, self.grid, self.cfg)
        return categorize(outcome, cell, atlas or self.atlas, pathology, view, SPEC)

    def test_categories(self):
        self.assertIs(self.category(GridCell(0, 0)), ErrorCategory.FULL_HIT)
        self.assertIs(self.category(GridCell(2, 2)), ErrorCategory.POSITION_ERROR)
        self.assertIs(self.category(GridCell(6, 2)), ErrorCategory.ANATOMY_ERROR)

    def test_partial_hit_has_some_overlap(self):
        grid = overlap_fractions(mask_with((0, 8, 0, 8), (8, 10, 8, 16)), SPEC)
        outcome = judge(GridCell(1, 1), grid, self.cfg)
        self.assertTrue(0 < outcome.cell_fraction < 0.5)
        category = categorize(outcome, GridCell(1, 1), None, Pathology.EDEMA, FRONTAL, SPEC)
        self.assertIs(category, ErrorCategory.PARTIAL_HIT)

    def test_review_cases(self):
        self.assertIs(self.category(GridCell(0, 0), view=LATERAL), ErrorCategory.NEEDS_REVIEW)
        self.assertIs(
            self.category(GridCell(6, 2), pathology=Pathology.PNEUMOTHORAX),
            ErrorCategory.NEEDS_REVIEW,
        )
        outcome = judge(None, self.grid, self.cfg)
        self.assertIs(
            categorize(outcome, None, self.atlas, Pathology.EDEMA, FRONTAL, SPEC),
            ErrorCategory.NEEDS_REVIEW,
        )

    def test_atlas_load(self):
        with tempfile.TemporaryDirectory() as tempdir:
            region = np.zeros((SIDE, SIDE), dtype=np.uint8)
            region[:10] = 255
            Image.fromarray(region).save(Path(tempdir) / "PleuralEffusion.png")
            Image.fromarray(region).save(Path(tempdir) / "Nodule.png")

            atlas = PlausibilityAtlas.load(tempdir, SIDE)

            self.assertTrue(atlas.covers(Pathology.PLEURAL_EFFUSION))
            self.assertFalse(atlas.covers(Pathology.EDEMA))
            self.assertTrue(atlas.intersects(Pathology.PLEURAL_EFFUSION, SPEC, GridCell(1, 5)))
            self.assertFalse(atlas.intersects(Pathology.PLEURAL_EFFUSION, SPEC, GridCell(2, 5)))
            with self.assertRaises(MaskFrameError):
                PlausibilityAtlas.load(tempdir, 128)


class TestReview(unittest.TestCase):
    def misses(self, n):
        return [
            CompleteMiss(f"img{i:03d}", Pathology.EDEMA, "A1", f"prepared/8x8/img{i:03d}.png")
            for i in range(n)
        ]

    def test_all_misses_under_cap(self):
        worksheet = sample_for_review(self.misses(20), cap=50)
        self.assertEqual(len(worksheet.rows), 20)

    def test_sample_is_capped_and_seeded(self):
        first = sample_for_review(self.misses(120), cap=50, seed=9)
        second = sample_for_review(self.misses(120), cap=50, seed=9)

        self.assertEqual(len(first.rows), 50)
        self.assertEqual(first.rows, second.rows)
        self.assertEqual(len({r.image_id for r in first.rows}), 50)
        ids = [r.image_id for r in first.rows]
        self.assertEqual(ids, sorted(ids))

    def test_complete_miss_label(self):
        miss = complete_miss("img", Pathology.EDEMA, SPEC, GridCell(2, 4), Path("a/b.png"))
        self.assertEqual(miss.predicted_cell, "C5")
        self.assertEqual(miss.rendered_image, "a/b.png")

    def test_extrapolate(self):
        rows = [ReviewRow("i", "Edema", "A1", "x", "PositionError")] * 30 + [
            ReviewRow("i", "Edema", "A1", "x", "AnatomyError")
        ] * 20

        estimate = extrapolate_proportions(rows, 120)

        self.assertAlmostEqual(estimate[ErrorCategory.POSITION_ERROR], 72)
        self.assertAlmostEqual(estimate[ErrorCategory.ANATOMY_ERROR], 48)
        with self.assertRaises(ReviewError):
            extrapolate_proportions([], 10)

    def test_worksheet_round_trip_through_reviewer(self):
        categories = ["PositionError", "AnatomyError", "PositionError"]
        with tempfile.TemporaryDirectory() as tempdir:
            path = Path(tempdir) / "sheet.csv"
            sample_for_review(self.misses(3)).write(path)
            lines = path.read_text().splitlines()
            self.assertEqual(lines[0], "# schema: review-worksheet/v1")
            self.assertEqual(len(lines), 5)

            with self.assertRaises(ReviewError):
                ingest_review(path)

            filled = [lines[0], lines[1]] + [
                line.rstrip(",") + "," + category
                for line, category in zip(lines[2:], categories)
            ]
            path.write_text("\n".join(filled) + "\n")
            rows = ingest_review(path)
            self.assertEqual([r.category for r in rows], categories)

            filled[-1] = filled[-1].replace("PositionError", "Elsewhere")
            path.write_text("\n".join(filled))
            with self.assertRaises(ReviewError):
                ingest_review(path)

    def test_missing_columns(self):
        with tempfile.TemporaryDirectory() as tempdir:
            path = Path(tempdir) / "sheet.csv"
            path.write_text("image_id,category\nimg,PositionError\n")
            with self.assertRaises(ReviewError):
                ingest_review(path)


class TestBreakdown(unittest.TestCase):
    def test_shares_sum_to_one(self):
        categories = (
            [ErrorCategory.FULL_HIT] * 5
            + [ErrorCategory.PARTIAL_HIT] * 3
            + [ErrorCategory.POSITION_ERROR] * 4
            + [ErrorCategory.ANATOMY_ERROR] * 2
        )
        breakdown = error_breakdown(categories, fallback_hits=1)

        self.assertEqual(breakdown.n, 14)
        self.assertEqual(breakdown.resolution, "atlas")
        self.assertAlmostEqual(sum(breakdown.shares().values()), 1.0)

    def test_review_resolves_needs_review(self):
        categories = [ErrorCategory.FULL_HIT] * 2 + [ErrorCategory.NEEDS_REVIEW] * 4
        review = [ReviewRow("i", "Edema", "A1", "x", "PositionError")] * 3 + [
            ReviewRow("i", "Edema", "A1", "x", "AnatomyError")
        ]

        unresolved = error_breakdown(categories)
        resolved = error_breakdown(categories, review=review)

        self.assertEqual(unresolved.resolution, "unresolved")
        self.assertEqual(unresolved.needs_review, 4)
        self.assertEqual(resolved.resolution, "review")
        self.assertEqual(resolved.needs_review, 0)
        self.assertEqual(resolved.position_error, 3)
        self.assertEqual(resolved.anatomy_error, 1)
        self.assertAlmostEqual(sum(resolved.shares().values()), 1.0)

    def test_empty_breakdown(self):
        with self.assertRaises(ScoringError):
            error_breakdown([]).shares()


class TestScoreSheet(unittest.TestCase):
    def test_score_task_and_sheet(self):
        grid = overlap_fractions(mask_with((0, 8, 0, 12)), SPEC)
        scores = [
            score_task("a", Pathology.EDEMA, FRONTAL, GridCell(0, 1), grid, ScoringConfig()),
            score_task("b", Pathology.EDEMA, LATERAL, None, grid, ScoringConfig()),
        ]
        self.assertEqual(scores[0].predicted, "A2")
        self.assertIs(scores[0].category, ErrorCategory.FULL_HIT)
        self.assertEqual(scores[0].random_hit_probability, 2 / 64)
        self.assertIs(scores[1].verdict, Verdict.UNPARSEABLE)

        with tempfile.TemporaryDirectory() as tempdir:
            path = Path(tempdir) / "scores" / "oracle__8x8.json"
            write_score_sheet(path, "oracle", scores)
            self.assertEqual(read_score_sheet(path), scores)

            path.write_text('{"schema": "score-sheet/v0", "scores": []}')
            with self.assertRaises(ScoringError):
                read_score_sheet(path)
