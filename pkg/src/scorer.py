"""Hit judgement, random baseline and error taxonomy for grid-cell predictions.

A predicted cell is a full hit when at least ``threshold`` of its pixels lie inside the
canonical ground-truth mask. When no cell of an image reaches the threshold (small
masks), any predicted cell containing mask pixels counts as a fallback hit.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from PIL import Image

from canvas import GridCell, GridSpec, cell_rect, label_of
from corpus import Pathology, ViewPosition
from masks import BinaryMask
from stats import rng_for

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5
DEFAULT_REVIEW_CAP = 50
WORKSHEET_SCHEMA = "review-worksheet/v1"
WORKSHEET_COLUMNS = ["image_id", "pathology", "predicted_cell", "rendered_image", "category"]


class ScoringError(Exception):
    """Base class for scoring errors."""

    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


class EmptyMaskError(ScoringError):
    """Raised if a canonical mask has no foreground pixels."""


class MaskFrameError(ScoringError):
    """Raised if a mask is not in the grid's canonical frame."""


class ReviewError(ScoringError):
    """Raised if a review worksheet is incomplete or mislabelled."""


class Verdict(str, Enum):
    """Outcome of scoring one prediction."""

    FULL_HIT = "FullHit"
    FALLBACK_HIT = "FallbackHit"
    MISS = "Miss"
    UNPARSEABLE = "Unparseable"

    @property
    def is_hit(self) -> bool:
        """Whether the verdict counts as a hit."""
        return self in (Verdict.FULL_HIT, Verdict.FALLBACK_HIT)


class ErrorCategory(str, Enum):
    """Category of a prediction in error analysis."""

    FULL_HIT = "FullHit"
    PARTIAL_HIT = "PartialHit"
    POSITION_ERROR = "PositionError"
    ANATOMY_ERROR = "AnatomyError"
    NEEDS_REVIEW = "NeedsReview"


class UnparseablePolicy(str, Enum):
    """How unparseable replies are scored."""

    COUNT_AS_MISS = "count_as_miss"
    EXCLUDE = "exclude"


@dataclass(frozen=True)
class ScoringConfig:
    """Threshold and fallback settings."""

    threshold: float = DEFAULT_THRESHOLD
    fallback_enabled: bool = True
    unparseable_policy: UnparseablePolicy = UnparseablePolicy.COUNT_AS_MISS

    def __post_init__(self):
        if not 0 < self.threshold <= 1:
            raise ScoringError(f"Threshold must be in (0, 1], got {self.threshold}")
        object.__setattr__(self, "unparseable_policy", UnparseablePolicy(self.unparseable_policy))


@dataclass(frozen=True, eq=False)
class OverlapGrid:
    """Per-cell mask pixel counts for one canonical mask."""

    spec: GridSpec
    counts: np.ndarray
    areas: np.ndarray
    threshold: float = DEFAULT_THRESHOLD

    @property
    def fractions(self) -> np.ndarray:
        """Overlap fraction of every cell."""
        return self.counts / self.areas

    def fraction(self, cell: GridCell) -> float:
        """Overlap fraction of one cell."""
        return float(self.counts[cell.row, cell.col] / self.areas[cell.row, cell.col])

    def fallback_active_at(self, threshold: float) -> bool:
        """No cell reaches the threshold although the mask is non-empty."""
        return bool(self.counts.any()) and not bool((self.fractions >= threshold).any())

    @property
    def fallback_active(self) -> bool:
        """Whether fallback applies at the configured threshold."""
        return self.fallback_active_at(self.threshold)

    def eligible(self, threshold: float, fallback_enabled: bool = True) -> np.ndarray:
        """Boolean (rows, cols) array of cells a prediction would be credited for."""
        if fallback_enabled and self.fallback_active_at(threshold):
            return self.counts > 0
        return self.fractions >= threshold

    def best_cell(self) -> GridCell:
        """Cell with maximal overlap fraction; ties go to the first in row-major order."""
        if not self.counts.any():
            raise EmptyMaskError("No cell overlaps the mask")
        row, col = np.unravel_index(int(np.argmax(self.fractions)), self.fractions.shape)
        return GridCell(int(row), int(col))


def overlap_fractions(
    mask: BinaryMask, spec: GridSpec, threshold: float = DEFAULT_THRESHOLD
) -> OverlapGrid:
    """Count mask pixels in every cell rectangle."""
    side = spec.canvas_side
    if mask.size != (side, side):
        raise MaskFrameError(
            f"Mask is {mask.width}x{mask.height}, the {spec.name} grid needs {side}x{side}"
        )
    if mask.is_empty():
        raise EmptyMaskError("Canonical mask is empty")
    rows, cols = spec.row_bounds(), spec.col_bounds()
    pixels = mask.bits.astype(np.int64)
    counts = np.add.reduceat(np.add.reduceat(pixels, rows[:-1], axis=0), cols[:-1], axis=1)
    areas = np.outer(np.diff(rows), np.diff(cols))
    return OverlapGrid(spec=spec, counts=counts, areas=areas, threshold=threshold)


@dataclass(frozen=True)
class ParseFailure:
    """A response that did not yield a usable cell."""

    reason: str


@dataclass(frozen=True)
class HitOutcome:
    """Verdict and the overlap behind it."""

    verdict: Verdict
    cell_fraction: float
    fallback_active: bool


def judge(
    prediction: Union[GridCell, ParseFailure, None], grid: OverlapGrid, cfg: ScoringConfig
) -> HitOutcome:
    """Apply the threshold rule, then the any-overlap fallback."""
    fallback = cfg.fallback_enabled and grid.fallback_active_at(cfg.threshold)
    if prediction is None or isinstance(prediction, ParseFailure):
        return HitOutcome(Verdict.UNPARSEABLE, 0.0, fallback)
    fraction = grid.fraction(prediction)
    if fraction >= cfg.threshold:
        verdict = Verdict.FULL_HIT
    elif fallback and fraction > 0:
        verdict = Verdict.FALLBACK_HIT
    else:
        verdict = Verdict.MISS
    return HitOutcome(verdict, fraction, fallback)


def random_baseline(grids: Sequence[OverlapGrid], cfg: ScoringConfig) -> float:
    """Expected hit rate of a uniformly random cell, averaged over images."""
    if not grids:
        raise ScoringError("Random baseline needs at least one image")
    expectations = [
        np.count_nonzero(g.eligible(cfg.threshold, cfg.fallback_enabled)) / g.spec.cell_count
        for g in grids
    ]
    return float(np.mean(expectations))


def fallback_share(grids: Sequence[OverlapGrid], cfg: ScoringConfig) -> float:
    """Fraction of images whose ground truth triggers the any-overlap fallback."""
    if not grids:
        return 0.0
    return sum(g.fallback_active_at(cfg.threshold) for g in grids) / len(grids)


def hit_rate(outcomes: Sequence[HitOutcome], cfg: ScoringConfig) -> float:
    """Hits over the denominator chosen by the unparseable policy."""
    if cfg.unparseable_policy is UnparseablePolicy.EXCLUDE:
        counted = [o for o in outcomes if o.verdict is not Verdict.UNPARSEABLE]
    else:
        counted = list(outcomes)
    if not counted:
        raise ScoringError("No outcomes left to compute a hit rate from")
    return sum(o.verdict.is_hit for o in counted) / len(counted)


class PlausibilityAtlas:
    """User-supplied canonical-frame masks of where each pathology can plausibly appear."""

    def __init__(self, regions: Mapping[Pathology, BinaryMask]):
        self._regions = dict(regions)

    @classmethod
    def load(cls, directory: Union[str, Path], canvas_side: int) -> "PlausibilityAtlas":
        """Read ``<Pathology>.png`` files; nonzero pixels are plausible."""
        regions = {}
        for path in sorted(Path(directory).glob("*.png")):
            pathology = Pathology.from_name(path.stem)
            if pathology is None:
                logger.warning(f"Ignoring atlas file '{path}': unknown pathology")
                continue
            with Image.open(path) as image:
                region = BinaryMask(np.asarray(image.convert("L")) > 0)
            if region.size != (canvas_side, canvas_side):
                raise MaskFrameError(
                    f"Atlas region '{path}' is {region.width}x{region.height}, "
                    f"expected {canvas_side}x{canvas_side}"
                )
            regions[pathology] = region
        logger.info(f"Loaded plausibility atlas for {len(regions)} pathologies from '{directory}'")
        return cls(regions)

    def covers(self, pathology: Pathology) -> bool:
        """Whether the atlas has a region for ``pathology``."""
        return pathology in self._regions

    def intersects(self, pathology: Pathology, spec: GridSpec, cell: GridCell) -> bool:
        """Whether ``cell`` meets the plausible region."""
        region = self._regions[pathology]
        if region.size != (spec.canvas_side, spec.canvas_side):
            raise MaskFrameError(f"Atlas region for {pathology.value} is not canonical-sized")
        return bool(region.bits[cell_rect(spec, cell).slices].any())


def categorize(
    outcome: HitOutcome,
    prediction: Optional[GridCell],
    atlas: Optional[PlausibilityAtlas],
    pathology: Pathology,
    view: ViewPosition,
    spec: GridSpec,
    threshold: float = DEFAULT_THRESHOLD,
) -> ErrorCategory:
    """Place a frontal prediction in the full/partial/position/anatomy taxonomy.

    Lateral views, unparseable responses, and complete misses without an atlas region for
    the pathology are left for human review.
    """
    if not view.is_frontal or outcome.verdict is Verdict.UNPARSEABLE or prediction is None:
        return ErrorCategory.NEEDS_REVIEW
    if outcome.verdict.is_hit:
        return ErrorCategory.FULL_HIT
    if 0 < outcome.cell_fraction < threshold:
        return ErrorCategory.PARTIAL_HIT
    if atlas is None or not atlas.covers(pathology):
        return ErrorCategory.NEEDS_REVIEW
    if atlas.intersects(pathology, spec, prediction):
        return ErrorCategory.POSITION_ERROR
    return ErrorCategory.ANATOMY_ERROR


@dataclass(frozen=True)
class CompleteMiss:
    """A frontal zero-overlap prediction awaiting position/anatomy review."""

    image_id: str
    pathology: Pathology
    predicted_cell: str
    rendered_image: str


@dataclass
class ReviewRow:
    """One line of the review worksheet."""

    image_id: str
    pathology: str
    predicted_cell: str
    rendered_image: str
    category: str = ""


@dataclass
class ReviewWorksheet:
    """Rows sampled for manual review."""

    rows: List[ReviewRow] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        """Worksheet as a data frame."""
        return pd.DataFrame([vars(r) for r in self.rows], columns=WORKSHEET_COLUMNS)

    def write(self, path: Union[str, Path]) -> None:
        """Write as CSV with a schema tag line."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(f"# schema: {WORKSHEET_SCHEMA}\n")
            self.to_frame().to_csv(f, index=False, lineterminator="\n")


def sample_for_review(
    complete_misses: Sequence[CompleteMiss], cap: int = DEFAULT_REVIEW_CAP, seed: int = 0
) -> ReviewWorksheet:
    """All misses when at most ``cap``, else a seeded uniform sample of ``cap`` of them."""
    misses = list(complete_misses)
    if len(misses) > cap:
        picked = rng_for(seed, "review", len(misses)).choice(len(misses), size=cap, replace=False)
        misses = [misses[i] for i in sorted(picked)]
    return ReviewWorksheet(
        rows=[
            ReviewRow(m.image_id, m.pathology.value, m.predicted_cell, m.rendered_image)
            for m in misses
        ]
    )


def ingest_review(path: Union[str, Path]) -> List[ReviewRow]:
    """Read a worksheet a reviewer has filled in."""
    try:
        frame = pd.read_csv(path, comment="#", dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ReviewError(f"Failed to read review worksheet '{path}': {e}")
    missing = [c for c in WORKSHEET_COLUMNS if c not in frame.columns]
    if missing:
        raise ReviewError(f"Worksheet '{path}' lacks columns {missing}")
    allowed = {ErrorCategory.POSITION_ERROR.value, ErrorCategory.ANATOMY_ERROR.value}
    rows = []
    for index, record in enumerate(frame[WORKSHEET_COLUMNS].to_dict("records"), start=1):
        category = record["category"].strip()
        if not category:
            raise ReviewError(f"Worksheet '{path}' row {index} has no category")
        if category not in allowed:
            raise ReviewError(
                f"Worksheet '{path}' row {index} has category '{category}', "
                f"expected one of {sorted(allowed)}"
            )
        rows.append(ReviewRow(**{**record, "category": category}))
    return rows


def extrapolate_proportions(
    subsample: Sequence[ReviewRow], population_size: int
) -> Dict[ErrorCategory, float]:
    """Scale reviewed position/anatomy proportions up to the full complete-miss count."""
    if not subsample:
        raise ReviewError("Cannot extrapolate from an empty review")
    position = sum(r.category == ErrorCategory.POSITION_ERROR.value for r in subsample)
    share = position / len(subsample)
    return {
        ErrorCategory.POSITION_ERROR: share * population_size,
        ErrorCategory.ANATOMY_ERROR: (1 - share) * population_size,
    }


@dataclass(frozen=True)
class CategoryBreakdown:
    """Category counts of one (backend, pathology); shares sum to 1 when n > 0."""

    n: int
    full_hit: float
    partial_hit: float
    position_error: float
    anatomy_error: float
    needs_review: float
    fallback_hits: int = 0
    resolution: str = "atlas"

    def shares(self) -> Dict[str, float]:
        """Share of each category."""
        if self.n == 0:
            raise ScoringError("No categorized predictions")
        return {
            "full_hit": self.full_hit / self.n,
            "partial_hit": self.partial_hit / self.n,
            "position_error": self.position_error / self.n,
            "anatomy_error": self.anatomy_error / self.n,
            "needs_review": self.needs_review / self.n,
        }


def error_breakdown(
    categories: Sequence[ErrorCategory],
    fallback_hits: int = 0,
    review: Optional[Sequence[ReviewRow]] = None,
) -> CategoryBreakdown:
    """Tally categories, resolving NeedsReview cases from a filled worksheet when given."""
    tally = {c: float(sum(1 for x in categories if x is c)) for c in ErrorCategory}
    resolution = "atlas" if tally[ErrorCategory.NEEDS_REVIEW] == 0 else "unresolved"
    if review and tally[ErrorCategory.NEEDS_REVIEW] > 0:
        estimate = extrapolate_proportions(review, int(tally[ErrorCategory.NEEDS_REVIEW]))
        tally[ErrorCategory.POSITION_ERROR] += estimate[ErrorCategory.POSITION_ERROR]
        tally[ErrorCategory.ANATOMY_ERROR] += estimate[ErrorCategory.ANATOMY_ERROR]
        tally[ErrorCategory.NEEDS_REVIEW] = 0.0
        resolution = "review"
    return CategoryBreakdown(
        n=len(categories),
        full_hit=tally[ErrorCategory.FULL_HIT],
        partial_hit=tally[ErrorCategory.PARTIAL_HIT],
        position_error=tally[ErrorCategory.POSITION_ERROR],
        anatomy_error=tally[ErrorCategory.ANATOMY_ERROR],
        needs_review=tally[ErrorCategory.NEEDS_REVIEW],
        fallback_hits=fallback_hits,
        resolution=resolution,
    )


def complete_miss(
    image_id: str,
    pathology: Pathology,
    spec: GridSpec,
    prediction: GridCell,
    rendered_image: Union[str, Path],
) -> CompleteMiss:
    """Review entry of a zero-overlap prediction, labelled on its grid."""
    return CompleteMiss(image_id, pathology, label_of(spec, prediction), str(rendered_image))


SCORE_SHEET_SCHEMA = "score-sheet/v1"


@dataclass(frozen=True)
class TaskScore:
    """Judged outcome of one (backend, task) pair; what score sheets store."""

    image_id: str
    pathology: Pathology
    view: ViewPosition
    grid: str
    predicted: Optional[str]
    verdict: Verdict
    cell_fraction: float
    fallback_active: bool
    category: ErrorCategory
    eligible_cells: int
    cell_count: int

    @property
    def random_hit_probability(self) -> float:
        """Chance that a uniform guess hits."""
        return self.eligible_cells / self.cell_count

    def to_dict(self) -> Dict[str, object]:
        """Plain dict for JSON."""
        return {
            "image_id": self.image_id,
            "pathology": self.pathology.value,
            "view": str(self.view),
            "grid": self.grid,
            "predicted": self.predicted,
            "verdict": self.verdict.value,
            "cell_fraction": self.cell_fraction,
            "fallback_active": self.fallback_active,
            "category": self.category.value,
            "eligible_cells": self.eligible_cells,
            "cell_count": self.cell_count,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "TaskScore":
        """Rebuild from ``to_dict`` output."""
        return cls(
            image_id=str(data["image_id"]),
            pathology=Pathology(data["pathology"]),
            view=ViewPosition.parse(str(data["view"])),
            grid=str(data["grid"]),
            predicted=None if data["predicted"] is None else str(data["predicted"]),
            verdict=Verdict(data["verdict"]),
            cell_fraction=float(data["cell_fraction"]),  # type: ignore[arg-type]
            fallback_active=bool(data["fallback_active"]),
            category=ErrorCategory(data["category"]),
            eligible_cells=int(data["eligible_cells"]),  # type: ignore[arg-type]
            cell_count=int(data["cell_count"]),  # type: ignore[arg-type]
        )


def score_task(
    image_id: str,
    pathology: Pathology,
    view: ViewPosition,
    prediction: Optional[GridCell],
    grid: OverlapGrid,
    cfg: ScoringConfig,
    atlas: Optional[PlausibilityAtlas] = None,
) -> TaskScore:
    """Judge and categorize one prediction against its overlap grid."""
    outcome = judge(prediction, grid, cfg)
    category = categorize(outcome, prediction, atlas, pathology, view, grid.spec, cfg.threshold)
    return TaskScore(
        image_id=image_id,
        pathology=pathology,
        view=view,
        grid=grid.spec.name,
        predicted=label_of(grid.spec, prediction) if prediction is not None else None,
        verdict=outcome.verdict,
        cell_fraction=outcome.cell_fraction,
        fallback_active=outcome.fallback_active,
        category=category,
        eligible_cells=int(np.count_nonzero(grid.eligible(cfg.threshold, cfg.fallback_enabled))),
        cell_count=grid.spec.cell_count,
    )


def write_score_sheet(path: Union[str, Path], backend_id: str, scores: Sequence[TaskScore]):
    """Write the scores of one (backend, grid) as schema-tagged JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {
        "schema": SCORE_SHEET_SCHEMA,
        "backend_id": backend_id,
        "scores": [s.to_dict() for s in scores],
    }
    path.write_text(json.dumps(document, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def read_score_sheet(path: Union[str, Path]) -> List[TaskScore]:
    """Load a score sheet written by :func:`write_score_sheet`."""
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise ScoringError(f"Failed to read score sheet '{path}': {e}")
    if document.get("schema") != SCORE_SHEET_SCHEMA:
        raise ScoringError(f"Score sheet '{path}' has schema {document.get('schema')!r}")
    return [TaskScore.from_dict(entry) for entry in document["scores"]]
