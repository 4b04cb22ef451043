#!/usr/bin/env python3

"""Command line entry point: prepare, run, score, report and simulate stages.

Output layout under the output directory::

    synthetic/                              generated corpus (synthetic runs only)
    prepared/<grid>/<image_id>.png          gridded images, one per (image, grid)
    journal/<backend>__<grid>.jsonl         raw responses, resumable
    scores/<backend>__<grid>.json           judged outcome per task
    report/tables/                          hit rates, error categories, references
    report/heatmaps/<backend>/<grid>/<pathology>.png
    report/worksheets/                      complete misses awaiting review
    run-manifest.json
"""

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from canvas import CanvasError, GridSpec, cell_of
from config import VALID_LOG_LEVELS, ConfigError, RunConfig, RunManifest, load_config
from corpus import (
    AnnotationSet,
    CorpusError,
    LocalizationTask,
    Pathology,
    ViewKind,
    describe_corpus,
    load_corpus,
    select_tasks,
)
from masks import MaskError
from querier import (
    BackendConfig,
    QueryError,
    create_backend,
    journal_records,
    run_queries,
)
from report import (
    EvalReport,
    HeatmapStyle,
    ReportError,
    average_image,
    emit_tables,
    ground_truth_heatmap,
    prediction_heatmap,
    render_heatmap_overlay,
)
from scorer import (
    CategoryBreakdown,
    ErrorCategory,
    PlausibilityAtlas,
    ScoringError,
    TaskScore,
    Verdict,
    complete_miss,
    error_breakdown,
    ingest_review,
    read_score_sheet,
    sample_for_review,
    score_task,
    write_score_sheet,
)
from stats import StatsError
from synthetic import INDEX_NAME, generate_corpus
from tracing import setup_tracing, shutdown_tracing, span
from workspace import PreparedCorpus, WorkspaceError, safe_name

logger = logging.getLogger(__name__)

MANIFEST_NAME = "run-manifest.json"
GROUND_TRUTH_DIR = "_ground_truth"
COMMANDS = ("prepare", "run", "score", "report", "simulate")


class StageError(Exception):
    """Raised if a stage is missing the outputs of an earlier one."""

    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


HARNESS_ERRORS = (
    CanvasError,
    ConfigError,
    CorpusError,
    MaskError,
    QueryError,
    ReportError,
    ScoringError,
    StageError,
    StatsError,
    WorkspaceError,
)
# errors that end one backend lane without stopping the others
LANE_ERRORS = (CanvasError, QueryError, ScoringError)


@dataclass
class RunSummary:
    """What cmd_run did per backend lane."""

    records: Dict[str, int] = field(default_factory=dict)
    requests: Dict[str, int] = field(default_factory=dict)
    failed: Dict[str, str] = field(default_factory=dict)
    errors: Dict[str, Exception] = field(default_factory=dict)


class Pipeline:
    """The corpus, its prepared artifacts and the output paths of one configuration."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.out = Path(config.output_dir)
        self.corpus_path, self.atlas_dir = self._resolve_corpus()
        images_root = config.corpus.images_root if config.corpus else None
        default_split = config.corpus.default_split if config.corpus else None
        self.annotations: AnnotationSet = load_corpus(
            self.corpus_path, images_root, default_split
        )
        self.prepared = PreparedCorpus(
            self.annotations, self.out, config.canvas_side, threshold=config.scoring.threshold
        )
        self._tasks: Dict[str, List[LocalizationTask]] = {}

    def _resolve_corpus(self) -> Tuple[Path, Optional[Path]]:
        config = self.config
        atlas = config.review.atlas_dir
        if config.corpus is not None:
            return config.corpus.path, atlas
        settings = config.synthetic
        assert settings is not None
        root = self.out / "synthetic"
        if not (root / INDEX_NAME).exists():
            pathologies = None
            if settings.pathologies is not None:
                pathologies = [Pathology.from_name(p) for p in settings.pathologies]
                if None in pathologies:
                    raise ConfigError(f"Unknown pathology in {settings.pathologies}")
            generate_corpus(
                root,
                settings.n_images,
                seed=settings.seed,
                pathologies=pathologies,  # type: ignore[arg-type]
                lateral_share=settings.lateral_share,
                validation_share=settings.validation_share,
                canvas_side=config.canvas_side,
            )
        return root / INDEX_NAME, atlas or root / "atlas"

    def tasks(self, spec: GridSpec) -> List[LocalizationTask]:
        """Usable tasks of the configured split on one grid."""
        if spec.name not in self._tasks:
            selected = select_tasks(
                self.annotations,
                split=self.config.split,
                pathology_filter=self.config.pathologies,
                grid=spec,
            )
            self._tasks[spec.name] = self.prepared.usable_tasks(selected)
            logger.info(f"{len(self._tasks[spec.name])} tasks on the {spec.name} grid")
        return self._tasks[spec.name]

    def journal_path(self, backend_id: str, spec: GridSpec) -> Path:
        """JSONL journal for one backend lane."""
        return self.out / "journal" / f"{backend_id}__{spec.name}.jsonl"

    def score_path(self, backend_id: str, spec: GridSpec) -> Path:
        """Scored tasks for one backend lane."""
        return self.out / "scores" / f"{backend_id}__{spec.name}.json"

    @property
    def report_dir(self) -> Path:
        """Directory holding report artifacts."""
        return self.out / "report"

    def atlas(self) -> Optional[PlausibilityAtlas]:
        """Plausibility atlas, if the run has one."""
        if self.atlas_dir is None or not self.atlas_dir.is_dir():
            return None
        return PlausibilityAtlas.load(self.atlas_dir, self.config.canvas_side)

    def write_manifest(self, stage: str) -> None:
        """Record ``stage`` in the run manifest."""
        manifest = RunManifest.start(self.config, self.corpus_path)
        manifest.finish(stage)
        manifest.write(self.out / MANIFEST_NAME)


def cmd_prepare(config: RunConfig, pipeline: Optional[Pipeline] = None) -> Pipeline:
    """Render one gridded image per (image, grid)."""
    pipeline = pipeline or Pipeline(config)
    with span("prepare"):
        for spec in config.grids:
            image_ids = {task.image_id for task in pipeline.tasks(spec)}
            pipeline.prepared.prepare([spec], image_ids)
    return pipeline


def _check_prepared(pipeline: Pipeline, spec: GridSpec) -> None:
    for task in pipeline.tasks(spec):
        if not pipeline.prepared.rendered_path(spec, task.image_id).exists():
            raise StageError(
                f"Gridded image for '{task.image_id}' on {spec.name} is missing, "
                "run 'prepare' first"
            )


def _run_lane(pipeline: Pipeline, backend_config: BackendConfig) -> Tuple[int, int]:
    config = pipeline.config
    backend = create_backend(backend_config, config.seed)
    records = 0
    for spec in config.grids:
        with span("run", backend=backend_config.backend_id, grid=spec.name):
            records += len(
                run_queries(
                    pipeline.tasks(spec),
                    backend_config,
                    pipeline.journal_path(backend_config.backend_id, spec),
                    pipeline.prepared,
                    backend=backend,
                    seed=config.seed,
                    describe_axes=config.describe_axes,
                    retry_transport_failures=config.retry_transport_failures,
                )
            )
    return records, backend.request_count


def cmd_run(config: RunConfig, pipeline: Optional[Pipeline] = None) -> RunSummary:
    """Query every backend; lanes run concurrently and fail independently."""
    pipeline = pipeline or Pipeline(config)
    for spec in config.grids:
        _check_prepared(pipeline, spec)
    summary = RunSummary()
    with ThreadPoolExecutor(max_workers=len(config.backends)) as pool:
        lanes = {b.backend_id: pool.submit(_run_lane, pipeline, b) for b in config.backends}
        for backend_id, lane in lanes.items():
            try:
                summary.records[backend_id], summary.requests[backend_id] = lane.result()
            except LANE_ERRORS as e:
                logger.error(f"Backend lane '{backend_id}' aborted: {e.message}")
                summary.failed[backend_id] = e.message
                summary.errors[backend_id] = e
    pipeline.write_manifest("run")
    return summary


def _score_backend(
    pipeline: Pipeline, backend_id: str, spec: GridSpec, atlas: Optional[PlausibilityAtlas]
) -> List[TaskScore]:
    config = pipeline.config
    tasks = pipeline.tasks(spec)
    records, missing = journal_records(
        tasks,
        backend_id,
        pipeline.journal_path(backend_id, spec),
        pipeline.prepared,
        config.describe_axes,
    )
    if missing:
        raise StageError(
            f"{len(missing)} of {len(tasks)} tasks have no answer from '{backend_id}' "
            f"on {spec.name}, run 'run' first"
        )
    return [
        score_task(
            record.task.image_id,
            record.task.pathology,
            record.task.view,
            record.cell,
            pipeline.prepared.overlap_grid(record.task),
            config.scoring,
            atlas,
        )
        for record in records
    ]


def cmd_score(
    config: RunConfig, pipeline: Optional[Pipeline] = None, skip: Sequence[str] = ()
) -> Pipeline:
    """Judge every journalled answer; never contacts a backend."""
    pipeline = pipeline or Pipeline(config)
    atlas = pipeline.atlas()
    for spec in config.grids:
        for backend in config.backends:
            if backend.backend_id in skip:
                continue
            with span("score", backend=backend.backend_id, grid=spec.name):
                scores = _score_backend(pipeline, backend.backend_id, spec, atlas)
            path = pipeline.score_path(backend.backend_id, spec)
            write_score_sheet(path, backend.backend_id, scores)
            logger.info(f"Scored {len(scores)} answers of '{backend.backend_id}' on {spec.name}")
    return pipeline


def _breakdowns(
    pipeline: Pipeline, spec: GridSpec, backend_id: str, scores: Sequence[TaskScore]
) -> Dict[Tuple[str, Pathology], CategoryBreakdown]:
    """Error categories of frontal, parseable answers; complete misses go to worksheets."""
    config = pipeline.config
    result = {}
    for pathology in sorted({s.pathology for s in scores}, key=lambda p: p.value):
        frontal = [
            s
            for s in scores
            if s.pathology is pathology
            and s.view.is_frontal
            and s.verdict is not Verdict.UNPARSEABLE
        ]
        unresolved = [s for s in frontal if s.category is ErrorCategory.NEEDS_REVIEW]
        name = f"{safe_name(backend_id)}__{spec.name}__{pathology.value}.csv"
        review = None
        if unresolved:
            misses = [
                complete_miss(
                    s.image_id,
                    s.pathology,
                    spec,
                    cell_of(spec, str(s.predicted)),
                    pipeline.prepared.rendered_path(spec, s.image_id).relative_to(pipeline.out),
                )
                for s in unresolved
            ]
            worksheet = sample_for_review(misses, config.review.cap, config.review.seed)
            worksheet.write(pipeline.report_dir / "worksheets" / name)
            filled = config.review.review_dir / name if config.review.review_dir else None
            if filled is not None and filled.exists():
                review = ingest_review(filled)
        result[(backend_id, pathology)] = error_breakdown(
            [s.category for s in frontal],
            fallback_hits=sum(s.verdict is Verdict.FALLBACK_HIT for s in frontal),
            review=review,
        )
    return result


def _heatmaps(pipeline: Pipeline, spec: GridSpec, backends: Sequence[str]) -> None:
    config = pipeline.config
    settings = config.report
    style = HeatmapStyle(colormap=settings.colormap, max_alpha=settings.max_alpha)
    tasks = pipeline.tasks(spec)
    if settings.heatmap_split is not None:
        tasks = [
            t
            for t in tasks
            if pipeline.annotations.record(t.image_id).split.value == settings.heatmap_split
        ]
    if settings.heatmap_frontal_only:
        tasks = [t for t in tasks if t.view.kind is ViewKind.FRONTAL]
    heatmap_dir = pipeline.report_dir / "heatmaps"
    records_by_backend = {
        backend_id: journal_records(
            tasks,
            backend_id,
            pipeline.journal_path(backend_id, spec),
            pipeline.prepared,
            config.describe_axes,
        )[0]
        for backend_id in backends
    }
    for pathology in sorted({t.pathology for t in tasks}, key=lambda p: p.value):
        subset = [t for t in tasks if t.pathology is pathology]
        background = average_image(
            [pipeline.prepared.canonical_image(t.image_id) for t in subset]
        )
        truth = ground_truth_heatmap(
            [pipeline.prepared.overlap_grid(t) for t in subset],
            config.scoring,
            settings.ground_truth_mode,
            spec,
        )
        path = heatmap_dir / GROUND_TRUTH_DIR / spec.name / f"{pathology.value}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(render_heatmap_overlay(truth, background, style))
        for backend_id, records in records_by_backend.items():
            grid = prediction_heatmap(
                [r for r in records if r.task.pathology is pathology],
                spec,
                frontal_only=settings.heatmap_frontal_only,
            )
            path = heatmap_dir / safe_name(backend_id) / spec.name / f"{pathology.value}.png"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(render_heatmap_overlay(grid, background, style))


def cmd_report(
    config: RunConfig, pipeline: Optional[Pipeline] = None, skip: Sequence[str] = ()
) -> List[EvalReport]:
    """Tables, heatmaps and review worksheets from the score sheets."""
    pipeline = pipeline or Pipeline(config)
    backends = [b.backend_id for b in config.backends if b.backend_id not in skip]
    reports = []
    breakdowns: Dict[str, Dict[Tuple[str, Pathology], CategoryBreakdown]] = {}
    with span("report"):
        for spec in config.grids:
            scores = {}
            for backend_id in backends:
                path = pipeline.score_path(backend_id, spec)
                if not path.exists():
                    raise StageError(f"Score sheet '{path}' is missing, run 'score' first")
                scores[backend_id] = read_score_sheet(path)
            reports.append(EvalReport.build(spec, scores, config.scoring, config.stats))
            breakdowns[spec.name] = {}
            for backend_id, backend_scores in scores.items():
                breakdowns[spec.name].update(
                    _breakdowns(pipeline, spec, backend_id, backend_scores)
                )
            _heatmaps(pipeline, spec, backends)
        emit_tables(
            reports,
            breakdowns,
            pipeline.report_dir / "tables",
            describe_corpus(pipeline.annotations),
        )
    return reports


def cmd_simulate(config: RunConfig) -> RunSummary:
    """All stages end to end; only simulated backends are allowed."""
    remote = [b.backend_id for b in config.backends if b.kind != "simulated"]
    if remote:
        raise ConfigError(f"'simulate' only runs simulated backends, got {remote}")
    pipeline = cmd_prepare(config)
    summary = cmd_run(config, pipeline)
    cmd_score(config, pipeline, skip=list(summary.failed))
    cmd_report(config, pipeline, skip=list(summary.failed))
    return summary


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridloc", description="Grid-overlay localization evaluation harness."
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        command = commands.add_parser(name)
        command.add_argument("--config", required=True, type=Path, help="run configuration")
        command.add_argument("--seed", type=int, help="override the global seed")
        command.add_argument("--out", type=Path, help="override the output directory")
        command.add_argument("--log-level", choices=VALID_LOG_LEVELS, help="log verbosity")
    return parser


def _error_summary(
    error: Exception, stage: str, message: Optional[str] = None, **extra
) -> str:
    return json.dumps(
        {
            "error": type(error).__name__,
            "message": message or getattr(error, "message", str(error)),
            "stage": stage,
            **extra,
        },
        sort_keys=True,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one stage; returns the process exit code."""
    args = _parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=(args.log_level or "info").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(
            args.config, seed=args.seed, output_dir=args.out, log_level=args.log_level
        )
        logging.getLogger().setLevel(config.log_level.upper())
        setup_tracing(config.tracing_endpoint)
        summary = None
        if args.command == "prepare":
            cmd_prepare(config)
        elif args.command == "run":
            summary = cmd_run(config)
        elif args.command == "score":
            cmd_score(config)
        elif args.command == "report":
            cmd_report(config)
        else:
            summary = cmd_simulate(config)
    except HARNESS_ERRORS as e:
        logger.error(f"'{args.command}' failed: {e}")
        print(_error_summary(e, args.command))
        return 1
    except OSError as e:
        logger.error(f"'{args.command}' failed on the file system: {e}")
        print(_error_summary(e, args.command))
        return 1
    finally:
        shutdown_tracing()

    if summary is not None and summary.failed:
        first = summary.errors[min(summary.failed)]
        message = "; ".join(f"{k}: {v}" for k, v in sorted(summary.failed.items()))
        print(
            _error_summary(
                first, args.command, message=message, failed_backends=sorted(summary.failed)
            )
        )
        return 1
    return 0


if __name__ == "__main__":  # pragma: nocover
    sys.exit(main())
