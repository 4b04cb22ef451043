"""Result tables, cell-count heatmaps and their rendering.

Every written file carries a schema tag: CSV files start with a ``# schema: <name>/v1``
line, JSON documents have a top-level ``schema`` key. Floats in CSV are written with six
decimals so reruns produce identical bytes.
"""

import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from matplotlib import colormaps
from PIL import Image

from canvas import CanonicalImage, GridSpec, cell_rect
from corpus import Pathology
from querier import QueryRecord
from scorer import (
    CategoryBreakdown,
    HitOutcome,
    OverlapGrid,
    ScoringConfig,
    TaskScore,
    UnparseablePolicy,
    Verdict,
    hit_rate,
)
from stats import RateSummary, StatsConfig, bootstrap_std, macro_average

logger = logging.getLogger(__name__)

MACRO = "MACRO"
FLOAT_FORMAT = "%.6f"
GROUND_TRUTH_MODES = ("eligible", "pixel")

HIT_RATE_COLUMNS = [
    "backend",
    "pathology",
    "n",
    "rate",
    "bootstrap_std",
    "random_baseline",
    "n_unparseable",
    "rate_excluding_unparseable",
    "fallback_share",
]
CATEGORY_COLUMNS = [
    "backend",
    "pathology",
    "n",
    "full_hit",
    "partial_hit",
    "position_error",
    "anatomy_error",
    "needs_review",
    "resolution",
]

# Values reported by the published study, reproduced for side-by-side reading only.
PUBLISHED_REFERENCE: Dict[str, Any] = {
    "source": "published study (not computed by this run)",
    "macro_hit_rate_percent": {
        "human": 80.1,
        "cnn": 59.9,
        "random": 11.9,
        "gpt-5": 49.7,
        "gpt-4": 39.1,
        "medgemma": 17.7,
    },
    "pathology_hit_rate_percent": {
        Pathology.ENLARGED_CARDIOMEDIASTINUM.value: {"gpt-4": 92.3, "gpt-5": 89.6, "cnn": 49.8},
        Pathology.CARDIOMEGALY.value: {"gpt-4": 89.1, "gpt-5": 72.0, "cnn": 50.7},
    },
    "anatomy_error_share_percent": {"gpt-5": 6.3, "gpt-4": 18.0, "medgemma": 29.9},
    "fallback_active_percent": 4.4,
    "frontal_share_of_test_percent": 87,
}


class ReportError(Exception):
    """Base class for report errors."""

    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


class MixedSpecError(ReportError):
    """Raised if inputs to one heatmap were produced on different grids."""


@dataclass(frozen=True, eq=False)
class CellCountGrid:
    """Per-cell counts on one grid, plus how many inputs had no cell."""

    spec: GridSpec
    counts: np.ndarray
    unparseable: int = 0

    @property
    def total(self) -> int:
        """Number of counted predictions."""
        return int(self.counts.sum())

    @property
    def normalized(self) -> np.ndarray:
        """Counts divided by the total."""
        if self.total == 0:
            return np.zeros(self.counts.shape, dtype=np.float64)
        return self.counts / self.total


def _shared_spec(specs: Iterable[GridSpec], spec: Optional[GridSpec]) -> Optional[GridSpec]:
    for other in specs:
        if spec is None:
            spec = other
        elif other != spec:
            raise MixedSpecError(f"Cannot combine {spec.name} and {other.name} results")
    return spec


def prediction_heatmap(
    records: Sequence[QueryRecord], spec: Optional[GridSpec] = None, frontal_only: bool = True
) -> CellCountGrid:
    """Count predicted cells; unparseable records are tallied separately."""
    spec = _shared_spec((r.task.grid for r in records), spec)
    if spec is None:
        raise ReportError("A prediction heatmap needs a grid spec or at least one record")
    counts = np.zeros((spec.rows, spec.cols), dtype=np.int64)
    unparseable = 0
    for record in records:
        if frontal_only and not record.task.view.is_frontal:
            continue
        cell = record.cell
        if cell is None:
            unparseable += 1
        else:
            counts[cell.row, cell.col] += 1
    return CellCountGrid(spec, counts, unparseable)


def ground_truth_heatmap(
    grids: Sequence[OverlapGrid],
    cfg: ScoringConfig = ScoringConfig(),
    mode: str = "eligible",
    spec: Optional[GridSpec] = None,
) -> CellCountGrid:
    """Per-cell ground-truth frequency.

    ``eligible`` counts, per image, each cell a prediction would be credited for;
    ``pixel`` sums mask pixels per cell.
    """
    if mode not in GROUND_TRUTH_MODES:
        raise ReportError(f"Unknown ground truth mode '{mode}', expected {GROUND_TRUTH_MODES}")
    spec = _shared_spec((g.spec for g in grids), spec)
    if spec is None:
        raise ReportError("A ground truth heatmap needs a grid spec or at least one image")
    counts = np.zeros((spec.rows, spec.cols), dtype=np.int64)
    for grid in grids:
        if mode == "eligible":
            counts += grid.eligible(cfg.threshold, cfg.fallback_enabled)
        else:
            counts += grid.counts
    return CellCountGrid(spec, counts)


def average_image(images: Sequence[CanonicalImage]) -> CanonicalImage:
    """Per-pixel mean, rounded half up."""
    if not images:
        raise ReportError("Cannot average an empty image list")
    sides = {img.side for img in images}
    if len(sides) != 1:
        raise MixedSpecError(f"Images have different sides {sorted(sides)}")
    to_rgb = len({img.mode for img in images}) > 1
    total = None
    for img in images:
        pixels = np.asarray(img.to_pil().convert("RGB")) if to_rgb else img.pixels
        total = pixels.astype(np.uint64) if total is None else total + pixels
    n = np.uint64(len(images))
    mean = (2 * total + n) // (2 * n)
    return CanonicalImage(mean.astype(np.uint8))


@dataclass(frozen=True)
class HeatmapStyle:
    """Colour ramp, peak opacity and legend strip height of heatmap overlays."""

    colormap: str = "inferno"
    max_alpha: float = 0.6
    legend_height: int = 12


def _ramp(values: np.ndarray, style: HeatmapStyle) -> np.ndarray:
    return colormaps[style.colormap](values)[..., :3] * 255.0


def render_heatmap_overlay(
    grid: CellCountGrid, background: CanonicalImage, style: HeatmapStyle = HeatmapStyle()
) -> bytes:
    """PNG of the background with each counted cell tinted by its share, plus a legend."""
    spec = grid.spec
    if background.side != spec.canvas_side:
        raise ReportError(
            f"Background is {background.side}px, the {spec.name} grid needs {spec.canvas_side}px"
        )
    side = spec.canvas_side
    canvas = np.asarray(background.to_pil().convert("RGB"), dtype=np.float64).copy()
    normalized = grid.normalized
    peak = normalized.max()
    if peak > 0:
        scaled = normalized / peak
        for cell in spec.cells():
            if grid.counts[cell.row, cell.col] == 0:
                continue
            level = scaled[cell.row, cell.col]
            color = _ramp(np.array([level]), style)[0]
            alpha = style.max_alpha * level
            rows, cols = cell_rect(spec, cell).slices
            canvas[rows, cols] = canvas[rows, cols] * (1.0 - alpha) + color * alpha
    legend = np.broadcast_to(
        _ramp(np.linspace(0.0, 1.0, side), style), (style.legend_height, side, 3)
    )
    raster = np.clip(np.rint(np.concatenate([canvas, legend], axis=0)), 0, 255).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(raster).save(buffer, format="PNG", optimize=False, compress_level=6)
    return buffer.getvalue()


def summarize(
    scores: Sequence[TaskScore], scoring: ScoringConfig, stats: StatsConfig
) -> RateSummary:
    """Hit rate, bootstrap spread and chance level of one (backend, pathology)."""
    if not scores:
        raise ReportError("Cannot summarize an empty score list")
    outcomes = [HitOutcome(s.verdict, s.cell_fraction, s.fallback_active) for s in scores]
    parsed = [o for o in outcomes if o.verdict is not Verdict.UNPARSEABLE]
    counted = parsed if scoring.unparseable_policy is UnparseablePolicy.EXCLUDE else outcomes
    rate = hit_rate(outcomes, scoring) if counted else float("nan")
    spread = bootstrap_std([o.verdict.is_hit for o in counted], stats) if counted else 0.0
    excluding = (
        sum(o.verdict.is_hit for o in parsed) / len(parsed) if parsed else float("nan")
    )
    return RateSummary(
        n=len(scores),
        rate=rate,
        bootstrap_std=spread,
        random_baseline=float(np.mean([s.random_hit_probability for s in scores])),
        n_unparseable=len(outcomes) - len(parsed),
        rate_excluding_unparseable=excluding,
        fallback_share=sum(s.fallback_active for s in scores) / len(scores),
    )


@dataclass
class EvalReport:
    """Rate summaries of every scored (backend, pathology) pair on one grid."""

    grid: GridSpec
    summaries: Dict[Tuple[str, Pathology], RateSummary] = field(default_factory=dict)

    @classmethod
    def build(
        cls,
        grid: GridSpec,
        scores: Mapping[str, Sequence[TaskScore]],
        scoring: ScoringConfig,
        stats: StatsConfig,
    ) -> "EvalReport":
        """Summarize scores per backend and pathology."""
        report = cls(grid)
        for backend_id in sorted(scores):
            by_pathology: Dict[Pathology, List[TaskScore]] = {}
            for score in scores[backend_id]:
                by_pathology.setdefault(score.pathology, []).append(score)
            for pathology in sorted(by_pathology, key=lambda p: p.value):
                report.summaries[(backend_id, pathology)] = summarize(
                    by_pathology[pathology], scoring, stats
                )
        return report

    @property
    def backends(self) -> List[str]:
        """Backend ids in sorted order."""
        return sorted({backend for backend, _ in self.summaries})

    def backend_summaries(self, backend_id: str) -> Dict[Pathology, RateSummary]:
        """Summaries of one backend by pathology."""
        return {p: s for (b, p), s in self.summaries.items() if b == backend_id}

    def macro(self, backend_id: str) -> Dict[str, float]:
        """Unweighted means over the pathologies scored for a backend."""
        summaries = self.backend_summaries(backend_id)
        rates = {p: s.rate for p, s in summaries.items() if not math.isnan(s.rate)}
        return {
            "n": float(sum(s.n for s in summaries.values())),
            "rate": macro_average(rates) if rates else float("nan"),
            "random_baseline": macro_average({p: s.random_baseline for p, s in summaries.items()}),
            "n_unparseable": float(sum(s.n_unparseable for s in summaries.values())),
            "fallback_share": macro_average({p: s.fallback_share for p, s in summaries.items()}),
        }

    def to_frame(self) -> pd.DataFrame:
        """One row per backend and pathology."""
        rows = []
        for backend_id in self.backends:
            for pathology, summary in sorted(
                self.backend_summaries(backend_id).items(), key=lambda item: item[0].value
            ):
                rows.append(
                    {
                        "backend": backend_id,
                        "pathology": pathology.value,
                        "n": summary.n,
                        "rate": summary.rate,
                        "bootstrap_std": summary.bootstrap_std,
                        "random_baseline": summary.random_baseline,
                        "n_unparseable": summary.n_unparseable,
                        "rate_excluding_unparseable": summary.rate_excluding_unparseable,
                        "fallback_share": summary.fallback_share,
                    }
                )
            macro = self.macro(backend_id)
            rows.append(
                {
                    "backend": backend_id,
                    "pathology": MACRO,
                    "n": int(macro["n"]),
                    "rate": macro["rate"],
                    "bootstrap_std": float("nan"),
                    "random_baseline": macro["random_baseline"],
                    "n_unparseable": int(macro["n_unparseable"]),
                    "rate_excluding_unparseable": float("nan"),
                    "fallback_share": macro["fallback_share"],
                }
            )
        return pd.DataFrame(rows, columns=HIT_RATE_COLUMNS)


def breakdown_frame(breakdowns: Mapping[Tuple[str, Pathology], CategoryBreakdown]):
    """Category shares per (backend, pathology); pairs without frontal tasks are left out."""
    rows = []
    for (backend_id, pathology), breakdown in sorted(
        breakdowns.items(), key=lambda item: (item[0][0], item[0][1].value)
    ):
        if breakdown.n == 0:
            continue
        rows.append(
            {
                "backend": backend_id,
                "pathology": pathology.value,
                "n": breakdown.n,
                **breakdown.shares(),
                "resolution": breakdown.resolution,
            }
        )
    return pd.DataFrame(rows, columns=CATEGORY_COLUMNS)


def grid_sensitivity(reports: Sequence[EvalReport]) -> pd.DataFrame:
    """Hit rates of the same (backend, pathology) side by side across grids."""
    columns = ["backend", "pathology"] + [f"rate_{r.grid.name}" for r in reports]
    keys = sorted(
        {(b, p.value) for r in reports for (b, p) in r.summaries}
        | {(b, MACRO) for r in reports for b in r.backends}
    )
    rows = []
    for backend_id, pathology in keys:
        row: Dict[str, Any] = {"backend": backend_id, "pathology": pathology}
        for report in reports:
            if pathology == MACRO:
                rate = (
                    report.macro(backend_id)["rate"]
                    if backend_id in report.backends
                    else float("nan")
                )
            else:
                summary = report.summaries.get((backend_id, Pathology(pathology)))
                rate = summary.rate if summary is not None else float("nan")
            row[f"rate_{report.grid.name}"] = rate
        rows.append(row)
    return pd.DataFrame(rows, columns=columns)


def _json_ready(value: Any) -> Any:
    if isinstance(value, float) and math.isnan(value):
        return None
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return _json_ready(float(value))
    if isinstance(value, dict):
        return {k: _json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(v) for v in value]
    return value


def write_table(frame: pd.DataFrame, path: Union[str, Path], schema: str) -> None:
    """CSV with a schema line, plus a JSON twin next to it."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(f"# schema: {schema}\n")
            frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        document = {"schema": schema, "rows": _json_ready(frame.to_dict("records"))}
        path.with_suffix(".json").write_text(
            json.dumps(document, sort_keys=True, indent=1) + "\n", encoding="utf-8"
        )
    except OSError as e:
        raise ReportError(f"Failed to write table '{path}': {e}")


def reference_frame() -> pd.DataFrame:
    """Published reference values in long form, tagged with their source."""
    rows = []
    for subject, value in PUBLISHED_REFERENCE["macro_hit_rate_percent"].items():
        rows.append({"metric": "macro_hit_rate_percent", "subject": subject, "value": value})
    for pathology, values in PUBLISHED_REFERENCE["pathology_hit_rate_percent"].items():
        for subject, value in values.items():
            rows.append(
                {"metric": f"hit_rate_percent:{pathology}", "subject": subject, "value": value}
            )
    for subject, value in PUBLISHED_REFERENCE["anatomy_error_share_percent"].items():
        rows.append({"metric": "anatomy_error_share_percent", "subject": subject, "value": value})
    rows.append(
        {
            "metric": "fallback_active_percent",
            "subject": "dataset",
            "value": PUBLISHED_REFERENCE["fallback_active_percent"],
        }
    )
    rows.append(
        {
            "metric": "frontal_share_of_test_percent",
            "subject": "dataset",
            "value": PUBLISHED_REFERENCE["frontal_share_of_test_percent"],
        }
    )
    frame = pd.DataFrame(rows, columns=["metric", "subject", "value"])
    frame["source"] = PUBLISHED_REFERENCE["source"]
    return frame


def emit_tables(
    reports: Sequence[EvalReport],
    error_breakdowns: Mapping[str, Mapping[Tuple[str, Pathology], CategoryBreakdown]],
    out_dir: Union[str, Path],
    corpus_summary: Optional[Mapping[Tuple[str, str, str], int]] = None,
) -> List[Path]:
    """Write every table under ``out_dir`` and return the CSV paths.

    Args:
        reports: one EvalReport per evaluated grid.
        error_breakdowns: grid name -> (backend, pathology) -> breakdown.
        out_dir: the ``tables`` directory.
        corpus_summary: image counts from :func:`corpus.describe_corpus`.
    """
    out_dir = Path(out_dir)
    written = []
    for report in reports:
        path = out_dir / f"hit_rates_{report.grid.name}.csv"
        write_table(report.to_frame(), path, "hit-rates/v1")
        written.append(path)
        breakdowns = error_breakdowns.get(report.grid.name, {})
        path = out_dir / f"error_categories_{report.grid.name}.csv"
        write_table(breakdown_frame(breakdowns), path, "error-categories/v1")
        written.append(path)
    if len(reports) > 1:
        path = out_dir / "grid_sensitivity.csv"
        write_table(grid_sensitivity(reports), path, "grid-sensitivity/v1")
        written.append(path)
    path = out_dir / "reference.csv"
    write_table(reference_frame(), path, "published-reference/v1")
    written.append(path)
    if corpus_summary is not None:
        frame = pd.DataFrame(
            [
                {"split": split, "pathology": pathology, "view": view, "images": count}
                for (split, pathology, view), count in sorted(corpus_summary.items())
            ],
            columns=["split", "pathology", "view", "images"],
        )
        path = out_dir / "corpus_summary.csv"
        write_table(frame, path, "corpus-summary/v1")
        written.append(path)
    logger.info(f"Wrote {len(written)} tables to '{out_dir}'")
    return written
