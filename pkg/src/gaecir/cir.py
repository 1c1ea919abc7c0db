"""Content-invariance regularization machinery.

Nearest-neighbor search over mapping codes, uniform partner sampling among
the neighbors, and the bootstrapped ramp schedule that raises the
regularization strength (lambda) and the neighbor count (k) during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, InsufficientPopulationError


@dataclass
class MappingTable:
    """Mapping codes for a set of pairs plus their source pair ids."""

    codes: np.ndarray  # (N, num_mappings)
    pair_ids: list = None

    def __post_init__(self):
        self.codes = np.atleast_2d(self.codes)
        if self.pair_ids is None:
            self.pair_ids = list(range(self.codes.shape[0]))


def nearest_neighbors(table, i: int, k: int) -> list:
    """Indices of the k rows closest to row i in Euclidean distance.

    Row i itself is excluded; ties are broken by lower index.
    """
    codes = table.codes if isinstance(table, MappingTable) else np.atleast_2d(table)
    n = codes.shape[0]
    if k < 1 or k >= n:
        raise InsufficientPopulationError(
            f"k={k} requires at least k+1={k + 1} rows, table has {n}"
        )
    d = np.sum((codes - codes[i]) ** 2, axis=1)
    d[i] = np.inf
    order = np.argsort(d, kind="stable")  # stable sort -> ties by lower index
    return order[:k].tolist()


def sample_partner(neighbors, rng: np.random.Generator) -> int:
    """One index drawn uniformly from the neighbor list."""
    if len(neighbors) == 0:
        raise InsufficientPopulationError("cannot sample a partner from an empty list")
    return int(neighbors[int(rng.integers(len(neighbors)))])


def sample_partners_in_batch(codes: np.ndarray, k: int,
                             rng: np.random.Generator) -> np.ndarray:
    """Partner row indices for every row of an in-batch code matrix.

    Equivalent to nearest_neighbors + sample_partner per row, vectorized.
    """
    codes = np.atleast_2d(codes)
    n = codes.shape[0]
    if n < 2:
        raise InsufficientPopulationError("partner sampling needs at least 2 pairs")
    k = min(k, n - 1)
    sq = np.sum(codes ** 2, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (codes @ codes.T)
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    picks = rng.integers(k, size=n)
    return order[np.arange(n), picks]


@dataclass(frozen=True)
class CirSchedule:
    """Ramp of (lambda, k) over training epochs.

    linear mode: lambda rises from 0 to lambda_max and k from 1 to k_max over
    ramp_epochs, then both stay at their maxima.  stepwise mode: (lambda, k)
    jump at the given step points and hold between them.
    """

    mode: str = "linear"
    lambda_max: float = 1.0
    k_max: int = 10
    ramp_epochs: int = 3000
    step_points: Optional[tuple] = None  # ((epoch, lambda, k), ...)

    def __post_init__(self):
        if self.mode not in ("linear", "stepwise"):
            raise ConfigError(f"schedule mode must be linear or stepwise, got {self.mode!r}")
        if not 0.0 <= self.lambda_max <= 1.0:
            raise ConfigError(f"lambda_max must lie in [0, 1], got {self.lambda_max}")
        if self.k_max < 1:
            raise ConfigError(f"k_max must be >= 1, got {self.k_max}")
        if self.ramp_epochs < 1:
            raise ConfigError(f"ramp_epochs must be >= 1, got {self.ramp_epochs}")
        if self.mode == "stepwise":
            if not self.step_points:
                raise ConfigError("stepwise schedule requires step_points")
            epochs = [p[0] for p in self.step_points]
            if epochs != sorted(epochs):
                raise ConfigError("step_points must be sorted by epoch")
            for _, lam, k in self.step_points:
                if not 0.0 <= lam <= 1.0:
                    raise ConfigError(f"step lambda {lam} outside [0, 1]")
                if k < 1:
                    raise ConfigError(f"step k {k} must be >= 1")

    @classmethod
    def disabled(cls) -> "CirSchedule":
        """Schedule with lambda fixed at 0 (vanilla GAE objective)."""
        return cls(mode="linear", lambda_max=0.0, k_max=1, ramp_epochs=1)

    @classmethod
    def default_stepwise(cls, total_epochs: int, lambda_max: float = 1.0,
                         k_max: int = 10) -> "CirSchedule":
        """Steps at 25%, 50%, 75% of training: (0.25, 3), (0.5, 6), (1.0, 10)."""
        q = max(total_epochs // 4, 1)
        return cls(
            mode="stepwise", lambda_max=lambda_max, k_max=k_max,
            ramp_epochs=total_epochs,
            step_points=(
                (q, 0.25 * lambda_max, max(round(0.3 * k_max), 1)),
                (2 * q, 0.5 * lambda_max, max(round(0.6 * k_max), 1)),
                (3 * q, lambda_max, k_max),
            ),
        )


def schedule_at(schedule: CirSchedule, epoch: int):
    """(lambda, k) in effect at the given epoch."""
    if epoch < 0:
        raise ConfigError(f"epoch must be non-negative, got {epoch}")
    if schedule.mode == "stepwise":
        lam, k = 0.0, 1
        for ep, step_lam, step_k in schedule.step_points:
            if epoch >= ep:
                lam, k = step_lam, step_k
        return lam, int(k)
    frac = min(epoch / schedule.ramp_epochs, 1.0)
    lam = schedule.lambda_max * frac
    # round half up so the midpoint of an even span rounds toward k_max
    k = int(np.floor(1.0 + (schedule.k_max - 1) * frac + 0.5))
    return lam, min(max(k, 1), schedule.k_max)
