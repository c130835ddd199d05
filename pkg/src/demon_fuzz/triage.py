"""Finding deduplication, witness minimization, filter statistics and reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .steering import (
    ATTACK_SURFACE,
    AttackSurfaceComponent,
    Crash,
    Hang,
    ImpactClass,
    OracleTrip,
    Phase,
    TargetHarness,
    Verdict,
    dedup_key,
)


class FlakyPredicate(RuntimeError):
    """The minimization predicate disagreed with itself on identical bytes."""


@dataclass
class Finding:
    finding_id: str
    data: bytes
    verdict: Verdict
    component: AttackSurfaceComponent
    impact: ImpactClass
    dedup_key: tuple[str, str]
    exec_index: int
    minimized: bool = False
    duplicates: int = 0
    note: str = ""

    @property
    def input_path(self) -> str:
        return f"findings/{self.impact.value}/{self.finding_id}.bin"

    def metadata(self) -> dict:
        """JSON-friendly record, without the input bytes."""
        v = self.verdict
        rec = {
            "finding_id": self.finding_id,
            "dedup_key": list(self.dedup_key),
            "component": self.component.value,
            "impact": self.impact.value,
            "input_path": self.input_path,
            "minimized": self.minimized,
            "exec_index": self.exec_index,
            "duplicates": self.duplicates,
            "verdict": verdict_to_dict(v),
        }
        if self.note:
            rec["note"] = self.note
        return rec

    @classmethod
    def from_metadata(cls, meta: dict, data: bytes) -> "Finding":
        return cls(
            finding_id=str(meta["finding_id"]),
            data=data,
            verdict=verdict_from_dict(meta["verdict"]),
            component=AttackSurfaceComponent(meta["component"]),
            impact=ImpactClass(meta["impact"]),
            dedup_key=(str(meta["dedup_key"][0]), str(meta["dedup_key"][1])),
            exec_index=int(meta["exec_index"]),
            minimized=bool(meta.get("minimized", False)),
            duplicates=int(meta.get("duplicates", 0)),
            note=str(meta.get("note", "")),
        )


def verdict_to_dict(v: Verdict) -> dict:
    d = {"kind": v.kind}
    if isinstance(v, OracleTrip):
        d.update(oracle_id=v.oracle_id, component=v.component.value, impact=v.impact.value,
                 detail=v.detail)
    elif isinstance(v, Crash):
        d.update(site=v.site, error=v.error)
    elif isinstance(v, Hang):
        d.update(steps_used=v.steps_used)
    else:
        raise ValueError(f"{v!r} is not a finding verdict")
    return d


def verdict_from_dict(d: dict) -> Verdict:
    kind = d["kind"]
    if kind == OracleTrip.kind:
        return OracleTrip(d["oracle_id"], AttackSurfaceComponent(d["component"]),
                          ImpactClass(d["impact"]), d.get("detail", ""))
    if kind == Crash.kind:
        return Crash(int(d["site"]), d.get("error", ""))
    if kind == Hang.kind:
        return Hang(int(d["steps_used"]))
    raise ValueError(f"unknown finding verdict kind {kind!r}")


SHARED_CODE_NOTE = ("crash attributed to the component registered for its call site; "
                    "faults inside shared helper code are not split between components")


def classify(harness: TargetHarness, verdict: Verdict,
             last_site: int = 0) -> tuple[AttackSurfaceComponent, ImpactClass, str]:
    """Place a finding verdict on the attack-surface table."""
    if isinstance(verdict, OracleTrip):
        return verdict.component, verdict.impact, ""
    if isinstance(verdict, Crash):
        site = harness.site(verdict.site)
        component = site.component if site is not None else AttackSurfaceComponent.FEATURE_EXTRACTION
        # A memory fault in extraction code is the code-execution row of the table.
        impact = (ImpactClass.CODE_EXECUTION if component is AttackSurfaceComponent.FEATURE_EXTRACTION
                  else ImpactClass.DENIAL_OF_SERVICE)
        return component, impact, SHARED_CODE_NOTE
    if isinstance(verdict, Hang):
        site = harness.site(last_site)
        component = site.component if site is not None and site.phase is Phase.EXECUTE \
            else AttackSurfaceComponent.MINIMIZATION_ALGORITHM
        return component, ImpactClass.DENIAL_OF_SERVICE, ""
    raise ValueError(f"{verdict!r} is not a finding")


def finding_from_verdict(harness: TargetHarness, verdict: Verdict, data: bytes,
                         exec_index: int, last_site: int = 0) -> Finding:
    component, impact, note = classify(harness, verdict, last_site)
    # The id is assigned by the store; "pending" marks an unstored finding.
    return Finding("pending", data, verdict, component, impact, dedup_key(verdict),
                   exec_index, note=note)


class FindingStore:
    """Single-writer store keyed by dedup key; insertion order is kept."""

    def __init__(self) -> None:
        self._by_key: dict[tuple[str, str], Finding] = {}

    def add(self, finding: Finding) -> bool:
        """Return True if kept, False if it duplicated a stored finding."""
        stored = self._by_key.get(finding.dedup_key)
        if stored is not None:
            stored.duplicates += 1
            return False
        if finding.finding_id == "pending":
            finding.finding_id = f"f{len(self._by_key):04d}"
        self._by_key[finding.dedup_key] = finding
        return True

    def findings(self) -> list[Finding]:
        return list(self._by_key.values())

    def get(self, finding_id: str) -> Optional[Finding]:
        for f in self._by_key.values():
            if f.finding_id == finding_id:
                return f
        return None

    def get_by_key(self, key: tuple[str, str]) -> Optional[Finding]:
        return self._by_key.get(key)

    def keys(self) -> set[tuple[str, str]]:
        return set(self._by_key)

    def __len__(self) -> int:
        return len(self._by_key)


def dedup(finding: Finding, store: FindingStore) -> str:
    return "kept" if store.add(finding) else "duplicate"


# --- minimization -------------------------------------------------------------

def minimize(data: bytes, predicate: Callable[[bytes], bool]) -> bytes:
    """Greedy chunk-removal delta debugging.

    Chunk sizes halve from ``len(data) // 2`` down to 1; each pass deletes a
    chunk whenever the remainder still satisfies ``predicate``. Passes repeat
    until a full single-byte pass removes nothing, so the result is
    1-minimal. Raises :class:`FlakyPredicate` if the predicate fails or
    flips on the original input.
    """
    first = predicate(data)
    if first != predicate(data):
        raise FlakyPredicate("predicate gave different answers on the same input")
    if not first:
        raise ValueError("predicate does not hold on the input to minimize")
    cur = bytes(data)
    while True:
        changed = False
        chunk = max(1, len(cur) // 2)
        while True:
            i = 0
            while i < len(cur):
                cand = cur[:i] + cur[i + chunk:]
                if len(cand) < len(cur) and predicate(cand):
                    cur = cand
                    changed = True
                else:
                    i += chunk
            if chunk == 1:
                break
            chunk //= 2
        if not changed:
            break
    if not predicate(cur):
        raise FlakyPredicate("minimized input no longer satisfies the predicate")
    return cur


def is_one_minimal(data: bytes, predicate: Callable[[bytes], bool]) -> bool:
    return all(not predicate(data[:i] + data[i + 1:]) for i in range(len(data)))


# --- filter check ---------------------------------------------------------------

@dataclass(frozen=True)
class FilterStats:
    total_findings: int
    bypassing: int

    def __post_init__(self):
        if not 0 <= self.bypassing <= self.total_findings:
            raise ValueError("bypassing must lie in 0..total_findings")

    @property
    def rate(self) -> float:
        return self.bypassing / self.total_findings if self.total_findings else 0.0

    @property
    def empty(self) -> bool:
        return self.total_findings == 0

    def flags(self) -> list[str]:
        if self.empty:
            return ["empty-corpus: rate reported as 0"]
        return ["rate is a fraction; as a percentage it is 100x larger"]

    def render(self) -> str:
        frac = _sig(self.rate, 3)
        pct = _sig(self.rate * 100, 3)
        return f"{self.bypassing}/{self.total_findings} (fraction {frac}, percent {pct}%)"

    def to_dict(self) -> dict:
        return {
            "total_findings": self.total_findings,
            "bypassing": self.bypassing,
            "fraction": self.rate,
            "percent": self.rate * 100,
            "rendered": self.render(),
            "flags": self.flags(),
        }


def _sig(x: float, digits: int) -> str:
    if x == 0:
        return "0"
    decimals = max(0, digits - 1 - math.floor(math.log10(abs(x))))
    return f"{x:.{decimals}f}"


def filter_check(inputs: Iterable[bytes], reference_accepts: Callable[[bytes], bool]) -> FilterStats:
    total = bypassing = 0
    for data in inputs:
        total += 1
        if reference_accepts(data):
            bypassing += 1
    return FilterStats(total, bypassing)


# --- report ------------------------------------------------------------------

@dataclass
class CampaignHeader:
    target: str
    variant: str
    rng_seed: int
    executions: int = 0
    parse_rejects: int = 0
    edges_covered: int = 0
    extra: dict = field(default_factory=dict)


def summary_table(findings: Iterable[Finding]) -> list[dict]:
    """(component, impact) counts over every cell of the attack-surface table.

    Off-table combinations that occur are appended after the table rows.
    """
    counts: dict[tuple[str, str], int] = {}
    order: list[tuple[str, str]] = []
    for comp, impacts in ATTACK_SURFACE.items():
        for imp in impacts:
            key = (comp.value, imp.value)
            counts[key] = 0
            order.append(key)
    for f in findings:
        key = (f.component.value, f.impact.value)
        if key not in counts:
            counts[key] = 0
            order.append(key)
        counts[key] += 1
    return [{"component": c, "impact": i, "findings": counts[(c, i)]} for c, i in order]


def emit_report(header: CampaignHeader, findings: Iterable[Finding]) -> dict:
    findings = list(findings)
    campaign = {
        "target": header.target,
        "variant": header.variant,
        "rng_seed": header.rng_seed,
        "executions": header.executions,
        "parse_rejects": header.parse_rejects,
        "edges_covered": header.edges_covered,
    }
    campaign.update(header.extra)
    return {
        "campaign": campaign,
        "summary": summary_table(findings),
        "findings": [
            {
                "finding_id": f.finding_id,
                "dedup_key": list(f.dedup_key),
                "component": f.component.value,
                "impact": f.impact.value,
                "input_path": f.input_path,
                "minimized": f.minimized,
                "exec_index": f.exec_index,
                "duplicates": f.duplicates,
                "detail": getattr(f.verdict, "detail", "") or getattr(f.verdict, "error", ""),
                **({"note": f.note} if f.note else {}),
            }
            for f in findings
        ],
    }


def render_report(report: dict) -> str:
    """Canonical serialization: field order as built, two-space indent, trailing newline."""
    return json.dumps(report, indent=2) + "\n"
