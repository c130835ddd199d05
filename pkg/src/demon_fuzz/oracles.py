"""Detectors for numerical failure modes in ML code.

All functions here are pure; harnesses feed their results to
:meth:`ExecContext.assert_decision`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np


class NonFiniteValue(ValueError):
    """Raised when a finite value was required (use :func:`nan_trip` / :func:`overflow_trip`)."""


@dataclass(frozen=True)
class PrecisionProbe:
    epsilon: float

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")


@dataclass
class TrainingTrace:
    iterations_run: int = 0
    cost_history: list[float] = field(default_factory=list)
    converged: bool = False

    def record(self, cost: float) -> None:
        self.cost_history.append(cost)
        self.iterations_run += 1


@dataclass(frozen=True)
class Partition:
    """Assignment of sample ids to opaque cluster ids."""

    assignment: Mapping[Hashable, Hashable]

    @classmethod
    def from_labels(cls, labels: Sequence[Hashable]) -> "Partition":
        return cls(dict(enumerate(labels)))

    def members(self, sample: Hashable) -> frozenset:
        if sample not in self.assignment:
            raise KeyError(f"sample {sample!r} not in partition")
        cid = self.assignment[sample]
        return frozenset(s for s, c in self.assignment.items() if c == cid)


def narrow(x: float) -> float:
    """Round a double to the nearest binary32 value (ties to even) and widen back."""
    with np.errstate(over="ignore"):
        return float(np.float32(x))


def precision_trip(x: float, probe: PrecisionProbe) -> bool:
    if not math.isfinite(x):
        raise NonFiniteValue(x)
    return abs(x - narrow(x)) > probe.epsilon


def nan_trip(cost: float) -> bool:
    return math.isnan(cost)


def overflow_trip(value: float) -> bool:
    return math.isinf(value)


def nontermination_trip(trace: TrainingTrace, max_iter: int) -> bool:
    if max_iter <= 0:
        raise ValueError("max_iter must be positive")
    return trace.iterations_run == max_iter and not trace.converged


def divergence_trip(model_low: Sequence[float], model_high: Sequence[float], tol: float) -> bool:
    low = np.asarray(model_low, dtype=np.float64)
    high = np.asarray(model_high, dtype=np.float64)
    if low.shape != high.shape:
        raise ValueError(f"dimension mismatch: {low.shape} vs {high.shape}")
    if not tol > 0:
        raise ValueError("tol must be positive")
    if low.size == 0:
        return False
    gap = np.abs(low - high)
    # A NaN gap means the two paths disagree about finiteness: that is divergence.
    return bool(np.isnan(gap).any() or gap.max() > tol)


def misclustering_trip(clean: Partition, observed: Partition, sentinel: Hashable) -> bool:
    if set(clean.assignment) != set(observed.assignment):
        raise ValueError("partitions cover different sample sets")
    if sentinel not in clean.assignment:
        raise KeyError(f"sentinel {sentinel!r} not in partition")
    return clean.members(sentinel) != observed.members(sentinel)
