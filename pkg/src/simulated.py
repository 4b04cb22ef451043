"""Offline backends that answer localization prompts without a model.

They exercise the whole pipeline and give known answers for checking the metrics:
uniform random cells (the analytic chance baseline), the best-overlap cell, a noisy version
of it, a fixed cell, and a scripted replay of canned responses or failures.
"""

import itertools
import logging
import threading
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from canvas import GridCell, GridSpec, cell_of, label_of
from corpus import LocalizationTask
from querier import (
    Backend,
    BackendAuthError,
    BackendConfig,
    BackendConfigError,
    PermanentBackendError,
    PromptBundle,
    TaskResources,
    TransientBackendError,
)
from stats import rng_for

logger = logging.getLogger(__name__)

ScriptEntry = Union[str, Exception]


class SimulatedBackend(Backend):
    """Base class for backends answering with a cell label."""

    strategy = ""

    def __init__(self, config: BackendConfig, seed: int = 0):
        super().__init__(config)
        self.seed = seed

    def rng(self, task: LocalizationTask) -> np.random.Generator:
        """Generator for one task of this backend, independent of query order."""
        return rng_for(self.seed, self.backend_id, self.strategy, *task.key)

    def choose(self, task: LocalizationTask, resources: TaskResources) -> GridCell:
        """Pick the cell to answer with."""
        raise NotImplementedError

    def _complete(
        self, task: LocalizationTask, bundle: PromptBundle, resources: TaskResources
    ) -> str:
        return label_of(task.grid, self.choose(task, resources))


class UniformRandomBackend(SimulatedBackend):
    """Answers a uniformly random cell."""

    strategy = "uniform_random"

    @staticmethod
    def draw(spec: GridSpec, rng: np.random.Generator) -> GridCell:
        """One uniform cell."""
        index = int(rng.integers(0, spec.cell_count))
        return GridCell(*divmod(index, spec.cols))

    def choose(self, task: LocalizationTask, resources: TaskResources) -> GridCell:
        """Uniform draw for the task."""
        return self.draw(task.grid, self.rng(task))


class OracleBackend(SimulatedBackend):
    """Answers the cell with the largest overlap."""

    strategy = "oracle"

    def choose(self, task: LocalizationTask, resources: TaskResources) -> GridCell:
        """Best cell of the overlap grid."""
        return resources.overlap_grid(task).best_cell()


class NoisyOracleBackend(SimulatedBackend):
    """The oracle cell with probability ``p_correct``, else a uniform other cell."""

    strategy = "noisy_oracle"

    def __init__(self, config: BackendConfig, seed: int = 0):
        super().__init__(config, seed)
        self.p_correct = float(config.options.get("p_correct", 0.5))
        if not 0 <= self.p_correct <= 1:
            raise BackendConfigError(
                f"Backend '{config.backend_id}' p_correct must be in [0, 1], got {self.p_correct}"
            )

    @staticmethod
    def draw(
        spec: GridSpec, oracle: GridCell, p_correct: float, rng: np.random.Generator
    ) -> GridCell:
        """Oracle with probability ``p_correct``, otherwise another cell."""
        if spec.cell_count == 1 or rng.random() < p_correct:
            return oracle
        oracle_index = oracle.row * spec.cols + oracle.col
        index = int(rng.integers(0, spec.cell_count - 1))
        if index >= oracle_index:
            index += 1
        return GridCell(*divmod(index, spec.cols))

    def choose(self, task: LocalizationTask, resources: TaskResources) -> GridCell:
        """Noisy oracle draw for the task."""
        oracle = resources.overlap_grid(task).best_cell()
        return self.draw(task.grid, oracle, self.p_correct, self.rng(task))


class FixedCellBackend(SimulatedBackend):
    """Answers the same label every time."""

    strategy = "fixed_cell"

    def __init__(self, config: BackendConfig, seed: int = 0):
        super().__init__(config, seed)
        label = config.options.get("cell")
        if not label:
            raise BackendConfigError(f"Backend '{config.backend_id}' needs options.cell")
        self.label = str(label)

    def choose(self, task: LocalizationTask, resources: TaskResources) -> GridCell:
        """The configured cell."""
        return cell_of(task.grid, self.label)


def _script_entry(entry: Any) -> ScriptEntry:
    if isinstance(entry, (str, Exception)):
        return entry
    if isinstance(entry, dict) and len(entry) == 1:
        kind, message = next(iter(entry.items()))
        errors: Dict[str, Callable[[str], Exception]] = {
            "transient": TransientBackendError,
            "permanent": PermanentBackendError,
            "auth_failure": BackendAuthError,
        }
        if kind in errors:
            return errors[kind](str(message))
    raise BackendConfigError(f"Unsupported scripted response {entry!r}")


class ScriptedBackend(Backend):
    """Replays canned responses in order, cycling when exhausted.

    Entries are raw response texts or exceptions to raise; in YAML,
    ``{transient: msg}``, ``{permanent: msg}`` and ``{auth_failure: msg}`` stand for the
    corresponding backend errors.
    """

    def __init__(self, config: BackendConfig, responses: Optional[Sequence[Any]] = None):
        super().__init__(config)
        entries = responses if responses is not None else config.options.get("responses")
        if not entries:
            raise BackendConfigError(f"Scripted backend '{config.backend_id}' has no responses")
        self.responses: List[ScriptEntry] = [_script_entry(e) for e in entries]
        self._cycle = itertools.cycle(self.responses)
        self._script_lock = threading.Lock()

    def _complete(
        self, task: LocalizationTask, bundle: PromptBundle, resources: TaskResources
    ) -> str:
        with self._script_lock:
            entry = next(self._cycle)
        if isinstance(entry, Exception):
            raise entry
        return entry


_STRATEGIES = {
    cls.strategy: cls
    for cls in (UniformRandomBackend, OracleBackend, NoisyOracleBackend, FixedCellBackend)
}


def create_simulated_backend(config: BackendConfig, seed: int = 0) -> Backend:
    """Backend for a ``kind: simulated`` configuration, selected by its strategy."""
    if config.strategy == "scripted":
        return ScriptedBackend(config)
    try:
        backend_class = _STRATEGIES[str(config.strategy)]
    except KeyError:
        known = sorted(list(_STRATEGIES) + ["scripted"])
        raise BackendConfigError(
            f"Backend '{config.backend_id}' has unknown strategy '{config.strategy}', "
            f"expected one of {known}"
        )
    logger.debug(f"Simulated backend '{config.backend_id}' uses {config.strategy}")
    return backend_class(config, int(config.options.get("seed", seed)))
