"""Declarative run configuration and the manifest recorded for each run."""

import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

from canvas import DEFAULT_CANVAS_SIDE, GridSpec, GridSpecError
from corpus import ManifestError, Pathology, Split
from hashing import digest_dict, digest_file, digest_text
from querier import SYSTEM_TEMPLATE, USER_TEMPLATE, BackendConfig, BackendConfigError
from scorer import DEFAULT_REVIEW_CAP, ScoringConfig, ScoringError
from stats import StatsConfig, StatsError

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.3.0"
VALID_LOG_LEVELS = ["info", "debug", "warning", "error", "critical"]
MANIFEST_SCHEMA = "run-manifest/v1"


class ConfigError(Exception):
    """Raised if a run configuration is missing, malformed or inconsistent."""

    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


@dataclass(frozen=True)
class CorpusSettings:
    """Where the annotation index and its images live."""

    path: Path
    images_root: Optional[Path] = None
    default_split: Optional[str] = None


@dataclass(frozen=True)
class SyntheticSettings:
    """Generate a corpus under ``<output_dir>/synthetic`` instead of reading one."""

    n_images: int = 40
    seed: int = 0
    lateral_share: float = 0.0
    validation_share: float = 0.0
    pathologies: Optional[List[str]] = None

    def __post_init__(self):
        if not isinstance(self.n_images, int) or self.n_images < 1:
            raise ConfigError(f"'synthetic.n_images' must be at least 1, got {self.n_images}")
        for key in ("lateral_share", "validation_share"):
            share = getattr(self, key)
            if not 0.0 <= share <= 1.0:
                raise ConfigError(f"'synthetic.{key}' must lie in [0, 1], got {share}")


@dataclass(frozen=True)
class ReviewSettings:
    """Manual review sampling."""

    cap: int = DEFAULT_REVIEW_CAP
    seed: int = 0
    review_dir: Optional[Path] = None
    atlas_dir: Optional[Path] = None


@dataclass(frozen=True)
class ReportSettings:
    """Report aggregation switches."""

    ground_truth_mode: str = "eligible"
    heatmap_frontal_only: bool = True
    heatmap_split: Optional[str] = "test"
    colormap: str = "inferno"
    max_alpha: float = 0.6


@dataclass(frozen=True)
class RunConfig:
    """Everything one evaluation run needs."""

    backends: List[BackendConfig]
    corpus: Optional[CorpusSettings] = None
    synthetic: Optional[SyntheticSettings] = None
    split: Optional[str] = "test"
    grids: List[GridSpec] = field(default_factory=lambda: [GridSpec()])
    canvas_side: int = DEFAULT_CANVAS_SIDE
    pathologies: Optional[List[Pathology]] = None
    scoring: ScoringConfig = ScoringConfig()
    stats: StatsConfig = StatsConfig()
    review: ReviewSettings = ReviewSettings()
    report: ReportSettings = ReportSettings()
    output_dir: Path = Path("out")
    seed: int = 0
    log_level: str = "info"
    tracing_endpoint: Optional[str] = None
    retry_transport_failures: bool = False
    describe_axes: bool = True

    def __post_init__(self):
        if not self.backends:
            raise ConfigError("At least one backend is required")
        ids = [b.backend_id for b in self.backends]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"Backend ids must be unique, got {ids}")
        if not self.grids:
            raise ConfigError("At least one grid is required")
        if (self.corpus is None) == (self.synthetic is None):
            raise ConfigError("Exactly one of 'corpus' and 'synthetic' must be given")
        if self.log_level not in VALID_LOG_LEVELS:
            raise ConfigError(
                f"Invalid log level '{self.log_level}', expected one of {VALID_LOG_LEVELS}"
            )
        if self.seed < 0:
            raise ConfigError(f"'seed' must be non-negative, got {self.seed}")
        if self.report.ground_truth_mode not in ("eligible", "pixel"):
            raise ConfigError(
                f"'report.ground_truth_mode' must be 'eligible' or 'pixel', "
                f"got '{self.report.ground_truth_mode}'"
            )

    def grid(self, name: str) -> GridSpec:
        """Look up a configured grid by name."""
        for spec in self.grids:
            if spec.name == name:
                return spec
        raise ConfigError(f"Grid '{name}' is not configured")

    def snapshot(self) -> Dict[str, Any]:
        """Plain-data view of the resolved configuration."""
        return {
            "backends": [b.to_dict() for b in self.backends],
            "corpus": _plain(asdict(self.corpus)) if self.corpus else None,
            "synthetic": _plain(asdict(self.synthetic)) if self.synthetic else None,
            "split": self.split,
            "grids": [g.name for g in self.grids],
            "canvas_side": self.canvas_side,
            "pathologies": [p.value for p in self.pathologies] if self.pathologies else None,
            "scoring": {
                "threshold": self.scoring.threshold,
                "fallback_enabled": self.scoring.fallback_enabled,
                "unparseable_policy": self.scoring.unparseable_policy.value,
            },
            "stats": {"replicates": self.stats.replicates, "seed": self.stats.seed},
            "review": _plain(asdict(self.review)),
            "report": asdict(self.report),
            "output_dir": str(self.output_dir),
            "seed": self.seed,
            "retry_transport_failures": self.retry_transport_failures,
            "describe_axes": self.describe_axes,
        }


def _plain(data: Dict[str, Any]) -> Dict[str, Any]:
    return {k: str(v) if isinstance(v, Path) else v for k, v in data.items()}


def _section(data: Dict[str, Any], key: str) -> Dict[str, Any]:
    value = data.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"'{key}' must be a mapping")
    return value


def _path(value: Any, base: Path) -> Optional[Path]:
    if value is None:
        return None
    path = Path(str(value)).expanduser()
    return path if path.is_absolute() else base / path


def _build(cls, values: Dict[str, Any], key: str):
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"Invalid '{key}' settings: {e}")


def parse_config(
    data: Dict[str, Any],
    base_dir: Union[str, Path] = ".",
    seed: Optional[int] = None,
    output_dir: Optional[Union[str, Path]] = None,
    log_level: Optional[str] = None,
) -> RunConfig:
    """Build a RunConfig from a parsed document; keyword arguments override it.

    The global seed is the default for the bootstrap, review sampling and simulated
    backends unless their own sections set one.
    """
    if not isinstance(data, dict):
        raise ConfigError("Run configuration must be a mapping")
    base = Path(base_dir)
    known = {
        "backends",
        "corpus",
        "synthetic",
        "split",
        "grids",
        "canvas_side",
        "pathologies",
        "scoring",
        "stats",
        "review",
        "report",
        "output_dir",
        "seed",
        "log_level",
        "tracing_endpoint",
        "retry_transport_failures",
        "describe_axes",
    }
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"Unknown configuration keys {sorted(unknown)}")

    run_seed = int(seed if seed is not None else data.get("seed", 0))
    canvas_side = int(data.get("canvas_side", DEFAULT_CANVAS_SIDE))
    try:
        grids = [GridSpec.parse(str(g), canvas_side) for g in data.get("grids", ["8x8"])]
    except GridSpecError as e:
        raise ConfigError(f"Invalid 'grids': {e.message}")

    backends = []
    for index, entry in enumerate(data.get("backends") or []):
        if not isinstance(entry, dict):
            raise ConfigError(f"'backends[{index}]' must be a mapping")
        try:
            backends.append(BackendConfig.from_dict(entry))
        except BackendConfigError as e:
            raise ConfigError(f"Invalid 'backends[{index}]': {e.message}")

    corpus = None
    if data.get("corpus") is not None:
        section = dict(_section(data, "corpus"))
        if "path" not in section:
            raise ConfigError("'corpus.path' is required")
        section["path"] = _path(section["path"], base)
        section["images_root"] = _path(section.get("images_root"), base)
        corpus = _build(CorpusSettings, section, "corpus")
    synthetic = None
    if data.get("synthetic") is not None:
        section = {"seed": run_seed, **_section(data, "synthetic")}
        synthetic = _build(SyntheticSettings, section, "synthetic")

    split = data.get("split", "test")
    if split in (None, "all"):
        split = None
    else:
        try:
            split = Split.parse(str(split)).value
        except ManifestError as e:
            raise ConfigError(f"Invalid 'split': {e.message}")

    pathologies = None
    if data.get("pathologies") is not None:
        pathologies = []
        for name in data["pathologies"]:
            pathology = Pathology.from_name(str(name))
            if pathology is None:
                raise ConfigError(f"Unknown pathology '{name}' in 'pathologies'")
            pathologies.append(pathology)

    try:
        scoring = ScoringConfig(**_section(data, "scoring"))
        stats = StatsConfig(**{"seed": run_seed, **_section(data, "stats")})
    except (TypeError, ValueError, ScoringError, StatsError) as e:
        raise ConfigError(f"Invalid 'scoring' or 'stats' settings: {getattr(e, 'message', e)}")

    review_section = {"seed": run_seed, **_section(data, "review")}
    review_section["review_dir"] = _path(review_section.get("review_dir"), base)
    review_section["atlas_dir"] = _path(review_section.get("atlas_dir"), base)
    review = _build(ReviewSettings, review_section, "review")
    report = _build(ReportSettings, _section(data, "report"), "report")

    out = output_dir if output_dir is not None else data.get("output_dir", "out")
    resolved_out = Path(out) if output_dir is not None else _path(out, base)
    return RunConfig(
        backends=backends,
        corpus=corpus,
        synthetic=synthetic,
        split=split,
        grids=grids,
        canvas_side=canvas_side,
        pathologies=pathologies,
        scoring=scoring,
        stats=stats,
        review=review,
        report=report,
        output_dir=resolved_out,  # type: ignore[arg-type]
        seed=run_seed,
        log_level=str(log_level or data.get("log_level", "info")).lower(),
        tracing_endpoint=data.get("tracing_endpoint"),
        retry_transport_failures=bool(data.get("retry_transport_failures", False)),
        describe_axes=bool(data.get("describe_axes", True)),
    )


def load_config(path: Union[str, Path], **overrides: Any) -> RunConfig:
    """Read a YAML run configuration; relative paths resolve against its directory."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"Configuration file '{path}' does not exist")
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"Failed to read configuration '{path}': {e}")
    config = parse_config(data or {}, base_dir=path.parent, **overrides)
    logger.debug(f"Loaded configuration '{path}' with {len(config.backends)} backends")
    return config


@dataclass
class RunManifest:
    """What a run used; together with the journals it is enough to replay the run."""

    config: Dict[str, Any]
    corpus_digest: Optional[str]
    prompt_template_digest: str
    tool_version: str = TOOL_VERSION
    started_at: str = ""
    finished_at: str = ""
    stages: List[str] = field(default_factory=list)

    @classmethod
    def start(cls, config: RunConfig, corpus_path: Optional[Path]) -> "RunManifest":
        """Begin a manifest for ``config``."""
        digest = digest_file(corpus_path) if corpus_path and corpus_path.is_file() else None
        return cls(
            config=config.snapshot(),
            corpus_digest=digest,
            prompt_template_digest=digest_text(SYSTEM_TEMPLATE + "\x00" + USER_TEMPLATE),
            started_at=_now(),
        )

    @property
    def config_digest(self) -> str:
        """Digest of the config snapshot."""
        return digest_dict(self.config)

    def finish(self, stage: str) -> None:
        """Mark ``stage`` as done."""
        self.stages.append(stage)
        self.finished_at = _now()

    def write(self, path: Union[str, Path]) -> None:
        """Write the manifest as JSON."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        document = {"schema": MANIFEST_SCHEMA, "config_digest": self.config_digest, **asdict(self)}
        path.write_text(json.dumps(document, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")
