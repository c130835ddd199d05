"""Steered execution: parse bracketing, decision assertions, verdicts.

A target harness splits its work into a *parse* region and an *execute*
region. Faults inside parse are swallowed and reported as a rejection, so
the fuzz loop never sees them as crashes. Inside execute, decision-point
assertions turn silent semantic failures into abnormal terminations that
the loop records like crashes.
"""

from __future__ import annotations

import ast
import enum
import inspect
import textwrap
import zlib
from dataclasses import dataclass
from typing import Any, Callable, ClassVar, Iterable, Union

from .coverage import CoverageMap, classify_sparse


class AttackSurfaceComponent(str, enum.Enum):
    FEATURE_EXTRACTION = "FeatureExtraction"
    PREDICTION = "Prediction"
    COST_FUNCTION = "CostFunction"
    MINIMIZATION_ALGORITHM = "MinimizationAlgorithm"
    MODEL_REPRESENTATION = "ModelRepresentation"
    CLUSTERING = "Clustering"


class ImpactClass(str, enum.Enum):
    POISONING = "Poisoning"
    EVASION = "Evasion"
    MISCLUSTERING = "Misclustering"
    DENIAL_OF_SERVICE = "DenialOfService"
    CODE_EXECUTION = "CodeExecution"


# Component -> impacts, as laid out in the attack-surface table.
ATTACK_SURFACE: dict[AttackSurfaceComponent, tuple[ImpactClass, ...]] = {
    AttackSurfaceComponent.FEATURE_EXTRACTION: (
        ImpactClass.POISONING, ImpactClass.EVASION, ImpactClass.MISCLUSTERING,
        ImpactClass.CODE_EXECUTION, ImpactClass.DENIAL_OF_SERVICE),
    AttackSurfaceComponent.PREDICTION: (ImpactClass.POISONING, ImpactClass.EVASION),
    AttackSurfaceComponent.COST_FUNCTION: (ImpactClass.POISONING, ImpactClass.DENIAL_OF_SERVICE),
    AttackSurfaceComponent.MINIMIZATION_ALGORITHM: (ImpactClass.POISONING, ImpactClass.DENIAL_OF_SERVICE),
    AttackSurfaceComponent.MODEL_REPRESENTATION: (ImpactClass.POISONING, ImpactClass.EVASION),
    AttackSurfaceComponent.CLUSTERING: (ImpactClass.MISCLUSTERING,),
}


class Phase(str, enum.Enum):
    PARSE = "parse"
    EXECUTE = "execute"


# --- verdicts ---------------------------------------------------------------

@dataclass(frozen=True)
class Completed:
    label: str
    kind: ClassVar[str] = "completed"


@dataclass(frozen=True)
class ParseReject:
    reason: str = ""
    kind: ClassVar[str] = "parse-reject"


@dataclass(frozen=True)
class Crash:
    site: int
    error: str = ""
    kind: ClassVar[str] = "crash"


@dataclass(frozen=True)
class Hang:
    steps_used: int
    kind: ClassVar[str] = "hang"


@dataclass(frozen=True)
class OracleTrip:
    oracle_id: str
    component: AttackSurfaceComponent
    impact: ImpactClass
    detail: str = ""
    kind: ClassVar[str] = "oracle-trip"


Verdict = Union[Completed, ParseReject, Crash, Hang, OracleTrip]


def is_finding(verdict: Verdict) -> bool:
    return not isinstance(verdict, (Completed, ParseReject))


# --- registration -----------------------------------------------------------

@dataclass(frozen=True)
class OracleSpec:
    oracle_id: str
    component: AttackSurfaceComponent
    impact: ImpactClass
    description: str
    default_enabled: bool = True


@dataclass(frozen=True)
class Site:
    site_id: int
    name: str
    phase: Phase
    component: AttackSurfaceComponent


@dataclass(frozen=True)
class StepBudget:
    max_steps: int

    def __post_init__(self):
        if self.max_steps <= 0:
            raise ValueError("step budget must be positive")


class HarnessError(Exception):
    """A harness was built or used in a way the steering contract forbids."""


class Rejection(Exception):
    """Structured rejection raised by parse code for malformed input."""


class _OracleTripped(Exception):
    def __init__(self, verdict: OracleTrip):
        self.verdict = verdict


class _BudgetExhausted(Exception):
    pass


class ExecContext:
    """Per-execution instrumentation handed to harness code.

    Harness code calls :meth:`visit` at instrumentation points, :meth:`step`
    for each unit of deterministic work, and :meth:`assert_decision` at ML
    decision points.
    """

    __slots__ = ("harness", "enabled", "max_steps", "steps", "phase", "counts",
                 "prev_site", "last_site")

    def __init__(self, harness: "TargetHarness", enabled: frozenset[str], max_steps: int):
        self.harness = harness
        self.enabled = enabled
        self.max_steps = max_steps
        self.steps = 0
        self.phase = Phase.PARSE
        self.counts: dict[int, int] = {}
        self.prev_site = 0
        self.last_site = 0

    def visit(self, site: int) -> None:
        e = ((self.prev_site >> 1) ^ site) & 0xFFFF
        counts = self.counts
        counts[e] = counts.get(e, 0) + 1
        self.prev_site = site
        self.last_site = site

    def step(self, n: int = 1) -> None:
        # Work done while parsing is bounded by the input size and not budgeted.
        if self.phase is Phase.PARSE:
            return
        self.steps += n
        if self.steps > self.max_steps:
            self.steps = self.max_steps
            raise _BudgetExhausted

    def oracle_enabled(self, oracle_id: str) -> bool:
        return oracle_id in self.enabled

    def assert_decision(self, oracle_id: str, tripped: bool, detail: str = "") -> None:
        if self.phase is Phase.PARSE:
            raise HarnessError(f"oracle {oracle_id!r} asserted inside a parse region")
        if tripped and oracle_id in self.enabled:
            spec = self.harness.oracle(oracle_id)
            raise _OracleTripped(OracleTrip(spec.oracle_id, spec.component, spec.impact, detail))


def assert_decision(ctx: ExecContext, oracle: OracleSpec, tripped: bool, detail: str = "") -> None:
    ctx.assert_decision(oracle.oracle_id, tripped, detail)


class TargetHarness:
    """Base class for in-process fuzz targets.

    Subclasses set ``name``, ``description``, ``ORACLES``, ``SITES`` and
    ``default_step_budget``, and implement :meth:`parse` and :meth:`execute`.
    """

    name: ClassVar[str] = ""
    description: ClassVar[str] = ""
    ORACLES: ClassVar[tuple[OracleSpec, ...]] = ()
    SITES: ClassVar[tuple[Site, ...]] = ()
    default_step_budget: ClassVar[int] = 100_000

    def __init__(self, variant: str = "clean", **params: Any):
        if variant not in ("clean", "vulnerable"):
            raise ValueError(f"variant must be 'clean' or 'vulnerable', not {variant!r}")
        self.variant = variant
        self.vulnerable = variant == "vulnerable"
        self.params = params
        self._oracles = {o.oracle_id: o for o in self.ORACLES}
        self._sites = {s.site_id: s for s in self.SITES}

    def parse(self, data: bytes, ctx: ExecContext) -> Any:
        raise NotImplementedError

    def execute(self, parsed: Any, ctx: ExecContext) -> str:
        raise NotImplementedError

    def reference_accepts(self, data: bytes) -> bool:
        """Whether the strict (clean) parser accepts ``data``."""
        ref = type(self)("clean", **self.params)
        ctx = ExecContext(ref, frozenset(), 1)
        try:
            ref.parse(data, ctx)
        except Exception:
            return False
        return True

    def oracle(self, oracle_id: str) -> OracleSpec:
        return self._oracles[oracle_id]

    def site(self, site_id: int) -> Site | None:
        return self._sites.get(site_id)

    def default_oracles(self) -> frozenset[str]:
        return frozenset(o.oracle_id for o in self.ORACLES if o.default_enabled)

    def manifest(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "variants": ["clean", "vulnerable"],
            "step_budget_default": self.default_step_budget,
            "oracles": [
                {"id": o.oracle_id, "component": o.component.value, "impact": o.impact.value,
                 "default_enabled": o.default_enabled, "description": o.description}
                for o in self.ORACLES
            ],
        }


def make_sites(target: str, entries: Iterable[tuple[str, Phase, AttackSurfaceComponent]]) -> tuple[Site, ...]:
    """Assign stable 16-bit site ids from names; collisions are an error."""

    sites = []
    seen: dict[int, str] = {}
    for name, phase, comp in entries:
        sid = zlib.crc32(f"{target}:{name}".encode()) & 0xFFFF
        if sid in seen or sid == 0:
            raise HarnessError(f"site id collision between {name!r} and {seen.get(sid)!r}")
        seen[sid] = name
        sites.append(Site(sid, name, phase, comp))
    return tuple(sites)


# --- bracketing and execution ------------------------------------------------

def bracket_parse(harness: TargetHarness, data: bytes, ctx: ExecContext) -> Any:
    """Run ``harness.parse`` with every fault converted to :class:`ParseReject`."""
    ctx.phase = Phase.PARSE
    try:
        return harness.parse(data, ctx)
    except HarnessError:
        raise
    except Rejection as exc:
        return ParseReject(str(exc))
    except Exception as exc:  # the bracket: any fault while parsing is a rejection
        return ParseReject(f"fault: {type(exc).__name__}")


def run_one(harness: TargetHarness, data: bytes, budget: StepBudget,
            enabled: Iterable[str] | None = None) -> tuple[Verdict, CoverageMap]:
    verdict, counts, _ = execute_input(harness, data, budget, enabled)
    return verdict, classify_sparse(counts)


def execute_input(harness: TargetHarness, data: bytes, budget: StepBudget,
                  enabled: Iterable[str] | None = None) -> tuple[Verdict, dict[int, int], ExecContext]:
    """Like :func:`run_one` but returns raw edge counts and the context.

    The fuzz loop uses this to skip building a dense map for every run.
    """
    if enabled is None:
        enabled_set = harness.default_oracles()
    else:
        enabled_set = frozenset(enabled)
        unknown = enabled_set - set(harness._oracles)
        if unknown:
            raise HarnessError(f"unknown oracle ids for {harness.name}: {sorted(unknown)}")
    ctx = ExecContext(harness, enabled_set, budget.max_steps)
    parsed = bracket_parse(harness, data, ctx)
    if isinstance(parsed, ParseReject):
        return parsed, ctx.counts, ctx
    ctx.phase = Phase.EXECUTE
    try:
        label = harness.execute(parsed, ctx)
        verdict: Verdict = Completed(str(label))
    except _OracleTripped as trip:
        verdict = trip.verdict
    except _BudgetExhausted:
        verdict = Hang(ctx.steps)
    except HarnessError:
        raise
    except Exception as exc:
        verdict = Crash(ctx.last_site, f"{type(exc).__name__}: {exc}")
    return verdict, ctx.counts, ctx


# --- registration review -----------------------------------------------------

_ORACLE_CALLS = {"assert_decision", "oracle_enabled"}


def lint_parse_region(harness_cls: type[TargetHarness]) -> list[str]:
    """Find decision assertions reachable from the parse region.

    Scans ``parse`` and every method of the class it calls through ``self``,
    plus module-level functions it calls by name, for oracle call sites.
    Returns a list of problems (empty when clean).
    """
    module = inspect.getmodule(harness_cls)
    problems: list[str] = []
    seen: set[str] = set()
    todo: list[tuple[str, Callable]] = [("parse", harness_cls.parse)]
    while todo:
        name, fn = todo.pop()
        if name in seen:
            continue
        seen.add(name)
        try:
            src = textwrap.dedent(inspect.getsource(fn))
        except (OSError, TypeError):
            continue
        for node in ast.walk(ast.parse(src)):
            if not isinstance(node, ast.Call):
                continue
            f = node.func
            if isinstance(f, ast.Attribute):
                if f.attr in _ORACLE_CALLS:
                    problems.append(f"{harness_cls.__name__}.{name}: oracle call {f.attr}() in parse region")
                elif isinstance(f.value, ast.Name) and f.value.id == "self" and hasattr(harness_cls, f.attr):
                    todo.append((f.attr, getattr(harness_cls, f.attr)))
            elif isinstance(f, ast.Name):
                if f.id in _ORACLE_CALLS:
                    problems.append(f"{harness_cls.__name__}.{name}: oracle call {f.id}() in parse region")
                elif module is not None and callable(getattr(module, f.id, None)) \
                        and inspect.isfunction(getattr(module, f.id)):
                    todo.append((f.id, getattr(module, f.id)))
    return problems


def review_harness(harness_cls: type[TargetHarness]) -> None:
    """Registration review; raises :class:`HarnessError` on contract violations."""
    ids = [o.oracle_id for o in harness_cls.ORACLES]
    if len(ids) != len(set(ids)):
        raise HarnessError(f"{harness_cls.name}: duplicate oracle ids")
    sids = [s.site_id for s in harness_cls.SITES]
    if len(sids) != len(set(sids)):
        raise HarnessError(f"{harness_cls.name}: duplicate site ids")
    problems = lint_parse_region(harness_cls)
    if problems:
        raise HarnessError("; ".join(problems))


def dedup_key(verdict: Verdict) -> tuple[str, str]:
    if isinstance(verdict, OracleTrip):
        return (verdict.kind, verdict.oracle_id)
    if isinstance(verdict, Crash):
        return (verdict.kind, str(verdict.site))
    if isinstance(verdict, Hang):
        return (verdict.kind, "step-budget")
    raise ValueError(f"{verdict!r} is not a finding")


__all__ = [
    "ATTACK_SURFACE", "AttackSurfaceComponent", "ImpactClass", "Phase",
    "Completed", "ParseReject", "Crash", "Hang", "OracleTrip", "Verdict", "is_finding",
    "OracleSpec", "Site", "StepBudget", "HarnessError", "Rejection", "ExecContext",
    "TargetHarness", "make_sites", "bracket_parse", "run_one", "execute_input",
    "assert_decision", "lint_parse_region", "review_harness", "dedup_key",
]
