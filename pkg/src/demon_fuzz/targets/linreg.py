"""T3: linear regression by batch gradient descent, trained along two paths.

Input: rows of five little-endian float64 values (four features, then the
label); the file length must be a positive multiple of 40 and at most 256
rows.

Each execution trains twice. The high-precision path works on the records
as read. The low-precision path works on a binary32 copy, the way a model
store that keeps ``float`` instead of ``double`` would. The two resulting
weight vectors feed the divergence check.

Clean variant: rejects non-finite and out-of-range values and
ill-conditioned designs at parse time, standardizes in double precision
*before* narrowing, and steps with the inverse curvature bound, so it always
converges.

Vulnerable variant (planted bugs):

* no value validation: infinities, NaNs and overflowing magnitudes reach
  standardization and the cost turns NaN, after which the convergence test
  can never succeed;
* narrowing happens on the raw records, before standardization, so
  large-offset features lose their low-order information on the
  low-precision path and the two models drift apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..oracles import TrainingTrace, divergence_trip, nan_trip, nontermination_trip, overflow_trip
from ..steering import (
    AttackSurfaceComponent as C,
    ExecContext,
    ImpactClass as I,
    OracleSpec,
    Phase,
    Rejection,
    TargetHarness,
    make_sites,
)

RECORD = 40
N_FEATURES = 4
MAX_ROWS = 256
VALUE_LIMIT = 1e9
# Clean designs must keep every non-null curvature within this factor of the largest.
MIN_CURVATURE_RATIO = 0.1
NULL_CURVATURE_RATIO = 1e-12


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, 4) float64
    labels: np.ndarray    # (n,) float64


@dataclass
class Model:
    weights: np.ndarray   # intercept first, then one weight per feature
    precision: str        # "high" or "low"


_SITES = make_sites("t3", [
    ("header", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("empty", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("ragged", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("too-many", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("non-finite", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("out-of-range", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("ill-conditioned", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("records", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("standardize", Phase.EXECUTE, C.FEATURE_EXTRACTION),
    ("const-column", Phase.EXECUTE, C.FEATURE_EXTRACTION),
    ("narrow", Phase.EXECUTE, C.MODEL_REPRESENTATION),
    ("gd-iter", Phase.EXECUTE, C.MINIMIZATION_ALGORITHM),
    ("cost-up", Phase.EXECUTE, C.COST_FUNCTION),
    ("cost-down", Phase.EXECUTE, C.COST_FUNCTION),
    ("cost-nonfinite", Phase.EXECUTE, C.COST_FUNCTION),
    ("converged", Phase.EXECUTE, C.MINIMIZATION_ALGORITHM),
    ("max-iter", Phase.EXECUTE, C.MINIMIZATION_ALGORITHM),
    ("compare", Phase.EXECUTE, C.MODEL_REPRESENTATION),
])
S = {s.name: s.site_id for s in _SITES}


def pack_records(features, labels) -> bytes:
    rows = np.column_stack([np.asarray(features, dtype=np.float64).reshape(len(labels), -1),
                            np.asarray(labels, dtype=np.float64)])
    if rows.shape[1] != N_FEATURES + 1:
        raise ValueError("records need exactly four features and a label")
    return rows.astype("<f8").tobytes()


def standardize(x: np.ndarray, guard: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Center and scale columns; with ``guard`` a constant column becomes all zeros.

    Returns the scaled columns, the column means and the raw standard deviations.
    """
    with np.errstate(all="ignore"):
        mean = x.mean(axis=0)
        centered = x - mean
        std = np.sqrt((centered * centered).mean(axis=0))
        scale = np.where(std > 0, std, 1.0) if guard else std
        return centered / scale, mean, std


def design(z: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(len(z)), z])


def curvature(a: np.ndarray) -> np.ndarray:
    """Eigenvalues of the MSE Hessian ``2 A^T A / n`` in ascending order."""
    return np.linalg.eigvalsh(2.0 * (a.T @ a) / len(a))


def train(a: np.ndarray, y: np.ndarray, lr: float, max_iter: int, tol: float,
          ctx: ExecContext | None = None) -> tuple[np.ndarray, TrainingTrace]:
    """Batch gradient descent on mean squared error.

    Converged when the cost changes by less than ``tol``; a NaN cost never
    satisfies that test. Each iteration
    costs ``n`` steps of the budget. With an active context the cost is
    checked for NaN on every iteration and the finished trace for
    non-termination.
    """
    n = len(y)
    w = np.zeros(a.shape[1])
    trace = TrainingTrace()
    prev = math.inf
    scale = 2.0 / n
    at = a.T
    check_overflow = ctx is not None and ctx.oracle_enabled("t3-overflow")
    with np.errstate(all="ignore"):
        for _ in range(max_iter):
            if ctx is not None:
                ctx.step(n)
                ctx.visit(S["gd-iter"])
            pred = a @ w
            r = pred - y
            cost = float(r @ r) / n
            trace.record(cost)
            improvement = prev - cost
            if ctx is not None:
                if not math.isfinite(cost):
                    ctx.visit(S["cost-nonfinite"])
                ctx.visit(S["cost-down"] if improvement > 0 else S["cost-up"])
                if check_overflow:
                    ctx.assert_decision("t3-overflow", overflow_trip(float(np.abs(pred).max())),
                                        f"prediction overflowed at iteration {trace.iterations_run}")
                ctx.assert_decision("t3-nan-cost", nan_trip(cost) or nan_trip(improvement),
                                    f"cost is NaN at iteration {trace.iterations_run}")
            # A rising cost is not convergence: it runs on until it overflows.
            if abs(improvement) < tol:
                trace.converged = True
                if ctx is not None:
                    ctx.visit(S["converged"])
                break
            prev = cost
            w = w - lr * scale * (at @ r)
    if ctx is not None and not trace.converged:
        ctx.visit(S["max-iter"])
        ctx.assert_decision("t3-nontermination", nontermination_trip(trace, max_iter),
                            f"no convergence after {max_iter} iterations")
    return w, trace


class RegressionHarness(TargetHarness):
    name = "t3"
    description = "linear regression, dual-precision training (NaN stall, precision divergence)"
    ORACLES = (
        OracleSpec("t3-nan-cost", C.COST_FUNCTION, I.DENIAL_OF_SERVICE,
                   "training cost (or its improvement) is NaN"),
        OracleSpec("t3-nontermination", C.MINIMIZATION_ALGORITHM, I.DENIAL_OF_SERVICE,
                   "gradient descent hit max_iter without converging"),
        OracleSpec("t3-divergence", C.MODEL_REPRESENTATION, I.POISONING,
                   "low- and high-precision models differ by more than tol"),
        OracleSpec("t3-overflow", C.PREDICTION, I.POISONING,
                   "a training-time prediction overflowed to infinity (opt-in)", default_enabled=False),
    )
    SITES = _SITES
    default_step_budget = 1 << 20

    def __init__(self, variant: str = "clean", *, lr: float = 0.2, max_iter: int = 1000,
                 converge_tol: float = 1e-12, tol: float = 1e-3, **params):
        super().__init__(variant, lr=lr, max_iter=max_iter, converge_tol=converge_tol, tol=tol, **params)
        self.lr = lr
        self.max_iter = max_iter
        self.converge_tol = converge_tol
        self.tol = tol

    def parse(self, data: bytes, ctx: ExecContext) -> Dataset:
        ctx.visit(S["header"])
        if not data:
            ctx.visit(S["empty"])
            raise Rejection("zero rows")
        if len(data) % RECORD:
            ctx.visit(S["ragged"])
            raise Rejection("length is not a multiple of 40")
        n = len(data) // RECORD
        if n > MAX_ROWS:
            ctx.visit(S["too-many"])
            raise Rejection("too many rows")
        rows = np.frombuffer(data, dtype="<f8").reshape(n, N_FEATURES + 1).astype(np.float64)
        if not self.vulnerable:
            self._validate(rows, ctx)
        ctx.visit(S["records"])
        return Dataset(rows[:, :N_FEATURES], rows[:, N_FEATURES])

    def _validate(self, rows: np.ndarray, ctx: ExecContext) -> None:
        if not np.isfinite(rows).all():
            ctx.visit(S["non-finite"])
            raise Rejection("non-finite value")
        if np.abs(rows).max() > VALUE_LIMIT:
            ctx.visit(S["out-of-range"])
            raise Rejection("value out of range")
        z, _, _ = standardize(rows[:, :N_FEATURES], guard=True)
        eig = curvature(design(z))
        top = eig[-1]
        mid = eig[(eig > NULL_CURVATURE_RATIO * top) & (eig < MIN_CURVATURE_RATIO * top)]
        if len(mid):
            ctx.visit(S["ill-conditioned"])
            raise Rejection("ill-conditioned design")

    def paths(self, data: Dataset, ctx: ExecContext | None = None):
        """Yield ``(precision, design, labels, step size)`` for both training paths."""
        x, y = data.features, data.labels
        visit = ctx.visit if ctx is not None else (lambda s: None)
        if self.vulnerable:
            with np.errstate(all="ignore"):
                x_low = x.astype(np.float32).astype(np.float64)
                y_low = y.astype(np.float32).astype(np.float64)
            visit(S["narrow"])
            for prec, xs, ys in (("high", x, y), ("low", x_low, y_low)):
                visit(S["standardize"])
                z, _, std = standardize(xs, guard=False)
                if (std == 0).any():
                    visit(S["const-column"])
                yield prec, design(z), ys, self.lr
        else:
            visit(S["standardize"])
            z, _, std = standardize(x, guard=True)
            if (std == 0).any():
                visit(S["const-column"])
            yz, _, _ = standardize(y[:, None], guard=True)
            a = design(z)
            yz = yz[:, 0]
            step = 1.0 / curvature(a)[-1]
            yield "high", a, yz, step
            visit(S["narrow"])
            yield "low", a.astype(np.float32).astype(np.float64), yz.astype(np.float32).astype(np.float64), step

    def fit(self, data: Dataset, ctx: ExecContext | None = None) -> dict[str, tuple[Model, TrainingTrace]]:
        out = {}
        for prec, a, y, step in self.paths(data, ctx):
            w, trace = train(a, y, step, self.max_iter, self.converge_tol, ctx)
            out[prec] = (Model(w, prec), trace)
        return out

    def execute(self, data: Dataset, ctx: ExecContext) -> str:
        models = self.fit(data, ctx)
        ctx.visit(S["compare"])
        converged = all(trace.converged for _, trace in models.values())
        high, low = models["high"][0].weights, models["low"][0].weights
        ctx.assert_decision("t3-divergence", divergence_trip(low, high, self.tol),
                            f"max coefficient gap {float(np.max(np.abs(low - high))):.6g}")
        return "converged" if converged else "not-converged"


def _hadamard8() -> np.ndarray:
    h = np.array([[1.0]])
    for _ in range(3):
        h = np.block([[h, h], [h, -h]])
    return h


OFFSET = float(1 << 24)


def seed_dataset() -> tuple[np.ndarray, np.ndarray]:
    """Eight rows with mutually orthogonal centred columns.

    Feature 0 is an ID-like column riding on a 2**24 offset; every value in
    the file is exactly representable in binary32.
    """
    h = _hadamard8()
    x = np.column_stack([OFFSET + 4.0 * h[:, 1], 0.5 * h[:, 2], h[:, 3], 2.0 * h[:, 4]])
    y = 10.0 + 3.0 * h[:, 1] + 1.5 * h[:, 2] - 2.0 * h[:, 3] + 0.25 * h[:, 4]
    return x, y


def seed_records() -> bytes:
    return pack_records(*seed_dataset())


def nan_witness() -> bytes:
    """Seed with one feature replaced by +inf."""
    x, y = seed_dataset()
    x = x.copy()
    x[0, 1] = math.inf
    return pack_records(x, y)


def divergence_witness() -> bytes:
    """Seed with one large-offset feature nudged to an odd integer above 2**24."""
    x, y = seed_dataset()
    x = x.copy()
    x[0, 0] += 1.0
    return pack_records(x, y)


def nontermination_witness() -> bytes:
    """Seed with one feature at 1e200: standardization overflows, the cost is
    NaN from the first iteration, and the loop never meets its stopping test."""
    x, y = seed_dataset()
    x = x.copy()
    x[0, 2] = 1e200
    return pack_records(x, y)
