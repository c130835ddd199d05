"""The genetic fuzz loop: queue scheduling, mutation, novelty-driven admission."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Optional

from . import mutation
from .coverage import CoverageMap, hit_class
from .rng import RngState
from .steering import (
    Crash,
    Hang,
    OracleTrip,
    ParseReject,
    Phase,
    StepBudget,
    TargetHarness,
    Verdict,
    execute_input,
    is_finding,
)
from .triage import Finding, FindingStore, finding_from_verdict

BASE_ENERGY = 64
MAX_ENERGY = 1024
SPLICE_PROB = 1 / 16

ORIGINS = ("seed", "deterministic-mutation", "havoc", "splice")


class ConfigError(ValueError):
    pass


@dataclass
class TestCase:
    id: int
    data: bytes
    parent_id: Optional[int]
    origin: str
    energy: int
    discovered_at: int
    det_done: bool = False

    __test__ = False  # not a pytest class


@dataclass(frozen=True)
class Schedule:
    deterministic: bool
    havoc_rounds: int


class Scheduler:
    """Round-robin over the queue.

    A test case's first visit runs its deterministic stage; every visit then
    runs ``energy`` havoc iterations.
    """

    def __init__(self, queue: list[TestCase]):
        self.queue = queue
        self.cursor = 0
        self.trace: list[int] = []

    def next_input(self, rng: RngState | None = None) -> tuple[TestCase, Schedule]:
        if not self.queue:
            raise ConfigError("queue is empty")
        tc = self.queue[self.cursor % len(self.queue)]
        self.cursor = (self.cursor + 1) % len(self.queue)
        self.trace.append(tc.id)
        return tc, Schedule(deterministic=not tc.det_done, havoc_rounds=tc.energy)


def next_input(queue: list[TestCase], rng: RngState, scheduler: Scheduler | None = None):
    """Functional wrapper: pick from ``queue`` using (or creating) a scheduler."""
    scheduler = scheduler or Scheduler(queue)
    return scheduler.next_input(rng)


def admission_energy(new_edges: int) -> int:
    return min(MAX_ENERGY, BASE_ENERGY << min(new_edges, 4))


@dataclass
class CampaignStats:
    executions: int = 0
    parse_rejects: int = 0
    completed: int = 0
    crashes: int = 0
    hangs: int = 0
    oracle_trips: int = 0
    parse_region_crashes: int = 0
    inapplicable_ops: int = 0

    def count(self, verdict: Verdict) -> None:
        self.executions += 1
        if isinstance(verdict, ParseReject):
            self.parse_rejects += 1
        elif isinstance(verdict, Crash):
            self.crashes += 1
        elif isinstance(verdict, Hang):
            self.hangs += 1
        elif isinstance(verdict, OracleTrip):
            self.oracle_trips += 1
        else:
            self.completed += 1

    def merge(self, other: "CampaignStats") -> None:
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(self, name) + getattr(other, name))


class StopCampaign(Exception):
    pass


class Fuzzer:
    """One single-threaded fuzzing loop over an in-process harness.

    ``stop_when`` is called with each newly stored finding; returning True
    ends the campaign early.
    """

    def __init__(self, harness: TargetHarness, seeds: list[bytes], *, rng_seed: int = 0,
                 step_budget: int | None = None, oracles: Optional[list[str]] = None,
                 max_input_size: int = mutation.MAX_INPUT_SIZE,
                 stop_when: Callable[[Finding], bool] | None = None):
        if not seeds:
            raise ConfigError("seed corpus is empty")
        for s in seeds:
            if len(s) > max_input_size:
                raise ConfigError(f"seed of {len(s)} bytes exceeds max input size {max_input_size}")
        self.harness = harness
        self.seeds = list(seeds)
        self.rng = RngState(rng_seed)
        self.budget = StepBudget(step_budget or harness.default_step_budget)
        self.oracles = harness.default_oracles() if oracles is None else frozenset(oracles)
        self.max_input_size = max_input_size
        self.stop_when = stop_when
        self.queue: list[TestCase] = []
        self.scheduler = Scheduler(self.queue)
        self.global_map = CoverageMap()
        self.store = FindingStore()
        self.stats = CampaignStats()
        self.max_execs = 0
        self._seeded = False
        self._stopped = False
        # Memo of hit classes per raw count; counts are small, so this stays tiny.
        self._cls_cache: dict[int, int] = {}

    # -- single execution -------------------------------------------------

    def execute(self, data: bytes, parent: TestCase | None, origin: str) -> Verdict:
        verdict, counts, ctx = execute_input(self.harness, data, self.budget, self.oracles)
        self.stats.count(verdict)
        if isinstance(verdict, Crash):
            site = self.harness.site(verdict.site)
            if site is None or site.phase is Phase.PARSE:
                self.stats.parse_region_crashes += 1
        new_edges = self._merge_coverage(counts)
        if new_edges >= 0 or origin == "seed":
            tc = TestCase(
                id=len(self.queue),
                data=data,
                parent_id=parent.id if parent is not None else None,
                origin=origin,
                energy=admission_energy(max(new_edges, 0)) if origin != "seed" else BASE_ENERGY,
                discovered_at=self.stats.executions,
            )
            self.queue.append(tc)
        if is_finding(verdict):
            finding = finding_from_verdict(self.harness, verdict, data, self.stats.executions,
                                           ctx.last_site)
            if self.store.add(finding) and self.stop_when is not None and self.stop_when(finding):
                self._stopped = True
        if self._stopped or self.stats.executions >= self.max_execs:
            raise StopCampaign
        return verdict

    def _merge_coverage(self, counts: dict[int, int]) -> int:
        """Union an execution's counts into the global map.

        Returns -1 if nothing was new, else the number of never-seen buckets.
        """
        g = self.global_map.buckets
        cache = self._cls_cache
        new_edges = -1
        for e, c in counts.items():
            cls = cache.get(c)
            if cls is None:
                cls = cache[c] = hit_class(c)
            old = g[e]
            if cls > old:
                if new_edges < 0:
                    new_edges = 0
                if old == 0:
                    new_edges += 1
                g[e] = cls
        if new_edges >= 0:
            self.global_map._nonzero = None
        return new_edges

    # -- stages -------------------------------------------------------------

    def _run_seeds(self) -> None:
        self._seeded = True
        for s in self.seeds:
            self.execute(s, None, "seed")

    def _deterministic(self, tc: TestCase) -> None:
        data = tc.data
        for op in mutation.deterministic_ops(len(data)):
            try:
                child = mutation.apply_op(data, op, self.max_input_size)
            except mutation.InapplicableMutation:
                self.stats.inapplicable_ops += 1
                continue
            self.execute(child, tc, "deterministic-mutation")
        tc.det_done = True

    def _havoc(self, tc: TestCase, rounds: int) -> None:
        rng = self.rng
        for _ in range(rounds):
            origin = "havoc"
            base = tc.data
            if len(self.queue) > 1 and rng.coin(SPLICE_PROB):
                other = self.queue[rng.below(len(self.queue))]
                if other is not tc and base and other.data:
                    base = mutation.splice(base, other.data, rng, self.max_input_size)
                    origin = "splice"
            child = mutation.havoc(base, rng, self.max_input_size)
            queued = len(self.queue)
            self.execute(child, tc, origin)
            if len(self.queue) > queued:
                tc.energy = min(MAX_ENERGY, tc.energy * 2)

    def run(self, max_execs: int) -> "Fuzzer":
        """Fuzz until ``max_execs`` total executions (seed runs included)."""
        if max_execs <= 0:
            raise ConfigError("max_execs must be positive")
        self.max_execs = max_execs
        try:
            if not self._seeded:
                self._run_seeds()
            while True:
                tc, sched = self.scheduler.next_input(self.rng)
                if sched.deterministic:
                    self._deterministic(tc)
                self._havoc(tc, sched.havoc_rounds)
        except StopCampaign:
            pass
        return self

    @property
    def stopped_early(self) -> bool:
        return self._stopped

    def findings(self) -> list[Finding]:
        return self.store.findings()


def iter_queue(fuzzer: Fuzzer) -> Iterator[TestCase]:
    return iter(fuzzer.queue)
