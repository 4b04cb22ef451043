"""Seeded bootstrap spread and cross-pathology aggregation.

All randomness in the harness comes from :func:`rng_for`: a PCG64 generator seeded with
``SeedSequence([seed, *keys])``. A generator depends only on its seed and keys, never on
evaluation order or thread scheduling.
"""

import hashlib
import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_REPLICATES = 1000


class StatsError(Exception):
    """Raised on invalid statistical inputs."""

    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


def _key_word(key: Union[int, str]) -> int:
    if isinstance(key, (int, np.integer)) and not isinstance(key, bool) and key >= 0:
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(seed: int, *keys: Union[int, str]) -> np.random.Generator:
    """Generator determined only by the seed and the keys."""
    if seed < 0:
        raise StatsError(f"Seeds must be non-negative, got {seed}")
    sequence = np.random.SeedSequence([int(seed)] + [_key_word(k) for k in keys])
    return np.random.Generator(np.random.PCG64(sequence))


@dataclass(frozen=True)
class StatsConfig:
    """Bootstrap replicate count and seed."""

    replicates: int = DEFAULT_REPLICATES
    seed: int = 0

    def __post_init__(self):
        if self.replicates < 1:
            raise StatsError(f"Need at least one bootstrap replicate, got {self.replicates}")


@dataclass(frozen=True)
class RateSummary:
    """Hit rate of one (backend, pathology) with its bootstrap spread."""

    n: int
    rate: float
    bootstrap_std: float
    random_baseline: float
    n_unparseable: int = 0
    rate_excluding_unparseable: float = float("nan")
    fallback_share: float = 0.0


def bootstrap_std(outcomes: Sequence[Union[bool, int, float]], cfg: StatsConfig) -> float:
    """Population standard deviation of resampled means.

    Replicate ``r`` draws its n indices from ``rng_for(cfg.seed, "bootstrap", r)``, so
    replicates can be computed in any order.
    """
    values = np.asarray(outcomes, dtype=np.float64)
    if values.size == 0:
        raise StatsError("Cannot bootstrap an empty outcome list")
    n = values.size
    means = np.empty(cfg.replicates, dtype=np.float64)
    for replicate in range(cfg.replicates):
        indices = rng_for(cfg.seed, "bootstrap", replicate).integers(0, n, size=n)
        means[replicate] = values[indices].mean()
    return float(np.std(means))


def macro_average(per_pathology_rates: Mapping[object, float]) -> float:
    """Unweighted mean over pathologies, correctly rounded."""
    if not per_pathology_rates:
        raise StatsError("Cannot average an empty set of rates")
    total = sum(Fraction(float(r)) for r in per_pathology_rates.values())
    return float(total / len(per_pathology_rates))
