"""Campaign configuration, multi-worker runs and the on-disk output layout.

Output directory::

    out/campaign.json          resolved configuration
    out/queue/<id>.bin         admitted test cases, id zero-padded to six digits
    out/findings/<impact>/<finding-id>.bin   witness input
    out/findings/<impact>/<finding-id>.json  finding metadata
    out/coverage.bitmap        65536 bytes, one hit-class index per bucket
    out/report.json            campaign report
"""

from __future__ import annotations

import json
import logging
import multiprocessing as mp
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .coverage import MAP_SIZE, CoverageMap
from .fuzzer import CampaignStats, ConfigError, Fuzzer, TestCase
from .steering import HarnessError
from .targets import get_harness, names
from .triage import CampaignHeader, Finding, FindingStore, emit_report, render_report

log = logging.getLogger(__name__)

VARIANTS = ("clean", "vulnerable")


@dataclass
class CampaignConfig:
    target: str
    variant: str = "clean"
    seeds: Optional[str] = None  # directory; None means the target's bundled seeds
    out: Optional[str] = None
    max_execs: int = 100_000
    rng_seed: int = 0
    step_budget: Optional[int] = None
    oracles: Optional[list[str]] = None
    epsilon: Optional[float] = None
    tol: Optional[float] = None
    max_iter: Optional[int] = None
    workers: int = 1

    def validate(self) -> None:
        if self.target not in names():
            raise ConfigError(f"unknown target {self.target!r}; registered: {', '.join(names())}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.max_execs <= 0:
            raise ConfigError("max-execs must be positive")
        if self.step_budget is not None and self.step_budget <= 0:
            raise ConfigError("step-budget must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not 0 <= self.rng_seed < 1 << 64:
            raise ConfigError("rng-seed must fit in 64 bits")

    def harness_params(self) -> dict:
        p = {}
        if self.epsilon is not None:
            p["epsilon"] = self.epsilon
        if self.tol is not None:
            p["tol"] = self.tol
        if self.max_iter is not None:
            p["max_iter"] = self.max_iter
        return p

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "target" not in d:
            raise ConfigError("config is missing 'target'")
        return cls(**d)


def load_seed_dir(path: str | Path) -> list[bytes]:
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"seeds directory {p} does not exist")
    seeds = [f.read_bytes() for f in sorted(p.iterdir()) if f.is_file()]
    if not seeds:
        raise ConfigError(f"seeds directory {p} is empty")
    return seeds


def build_fuzzer(cfg: CampaignConfig, worker: int = 0, stop_when=None) -> Fuzzer:
    cfg.validate()
    try:
        harness = get_harness(cfg.target, cfg.variant, **cfg.harness_params())
    except TypeError as exc:
        raise ConfigError(f"bad parameter for {cfg.target}: {exc}") from None
    if cfg.seeds is None:
        from .targets import load_seeds
        seeds = load_seeds(cfg.target)
    else:
        seeds = load_seed_dir(cfg.seeds)
    oracles = cfg.oracles
    if oracles is not None:
        unknown = set(oracles) - {o.oracle_id for o in harness.ORACLES}
        if unknown:
            raise ConfigError(f"unknown oracle ids for {cfg.target}: {sorted(unknown)}")
    return Fuzzer(harness, seeds, rng_seed=(cfg.rng_seed + worker) & ((1 << 64) - 1),
                  step_budget=cfg.step_budget, oracles=oracles, stop_when=stop_when)


@dataclass
class CampaignResult:
    config: CampaignConfig
    stats: CampaignStats
    coverage: CoverageMap
    queue: list[TestCase]
    findings: list[Finding]
    stopped_early: bool = False

    def header(self) -> CampaignHeader:
        return CampaignHeader(self.config.target, self.config.variant, self.config.rng_seed,
                              self.stats.executions, self.stats.parse_rejects,
                              self.coverage.edges_covered(),
                              extra={"workers": self.config.workers,
                                     "crashes": self.stats.crashes,
                                     "parse_region_crashes": self.stats.parse_region_crashes,
                                     "hangs": self.stats.hangs,
                                     "oracle_trips": self.stats.oracle_trips,
                                     "completed": self.stats.completed})

    def report(self) -> dict:
        return emit_report(self.header(), self.findings)


def _worker(args) -> tuple:
    cfg, index, execs = args
    fz = build_fuzzer(cfg, index)
    fz.run(execs)
    return (fz.stats, fz.global_map.to_bytes(), [(t.data, t.origin) for t in fz.queue],
            [(f.data, f.verdict, f.component, f.impact, f.dedup_key, f.exec_index, f.duplicates, f.note)
             for f in fz.findings()])


def run_campaign(cfg: CampaignConfig, stop_when=None) -> CampaignResult:
    """Run a campaign; with ``workers > 1`` the budget is split across processes.

    Worker ``i`` fuzzes with rng seed ``rng_seed + i``. Results are merged
    once all workers finish: coverage by union, queues appended in worker
    order, findings deduplicated by the single parent-side store.
    """
    cfg.validate()
    if cfg.workers == 1:
        fz = build_fuzzer(cfg, 0, stop_when)
        fz.run(cfg.max_execs)
        return CampaignResult(cfg, fz.stats, fz.global_map, fz.queue, fz.findings(), fz.stopped_early)
    build_fuzzer(cfg, 0)  # surface configuration errors before forking
    share, rem = divmod(cfg.max_execs, cfg.workers)
    jobs = [(cfg, i, share + (1 if i < rem else 0)) for i in range(cfg.workers)]
    jobs = [j for j in jobs if j[2] > 0]
    with mp.get_context("spawn").Pool(len(jobs)) as pool:
        parts = pool.map(_worker, jobs)
    stats = CampaignStats()
    cov = CoverageMap()
    queue: list[TestCase] = []
    store = FindingStore()
    for st, bitmap, q, fnds in parts:
        stats.merge(st)
        cov.merge(CoverageMap(bitmap))
        for data, origin in q:
            queue.append(TestCase(len(queue), data, None, origin, 0, 0, True))
        for data, verdict, comp, imp, key, idx, dups, note in fnds:
            f = Finding("pending", data, verdict, comp, imp, key, idx, duplicates=dups, note=note)
            if not store.add(f):
                store.get_by_key(key).duplicates += dups
    return CampaignResult(cfg, stats, cov, queue, store.findings())


# --- output directory -----------------------------------------------------------

def finding_paths(out: Path, finding: Finding) -> tuple[Path, Path]:
    d = out / "findings" / finding.impact.value
    return d / f"{finding.finding_id}.bin", d / f"{finding.finding_id}.json"


def write_finding(out: Path, finding: Finding) -> None:
    bin_path, meta_path = finding_paths(out, finding)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    bin_path.write_bytes(finding.data)
    meta_path.write_text(json.dumps(finding.metadata(), indent=2) + "\n")


def write_output(out: str | Path, result: CampaignResult) -> dict:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None
    (out / "campaign.json").write_text(json.dumps(result.config.to_dict(), indent=2) + "\n")
    qdir = out / "queue"
    qdir.mkdir(exist_ok=True)
    for tc in result.queue:
        (qdir / f"{tc.id:06d}.bin").write_bytes(tc.data)
    (out / "coverage.bitmap").write_bytes(result.coverage.to_bytes())
    for f in result.findings:
        write_finding(out, f)
    report = result.report()
    (out / "report.json").write_text(render_report(report))
    return report


def load_findings(findings_dir: str | Path, warn=log.warning) -> list[Finding]:
    """Read every finding under ``findings_dir``; corrupted entries are skipped with a warning.

    Accepts either an output directory or its ``findings/`` subdirectory.
    """
    root = Path(findings_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a readable directory")
    if (root / "findings").is_dir():
        root = root / "findings"
    if not os.access(root, os.R_OK | os.X_OK):
        raise PermissionError(f"{root} is not readable")
    out: list[Finding] = []
    for meta_path in sorted(root.glob("*/*.json")):
        bin_path = meta_path.with_suffix(".bin")
        try:
            meta = json.loads(meta_path.read_text())
            f = Finding.from_metadata(meta, bin_path.read_bytes())
        except (OSError, ValueError, KeyError, TypeError, IndexError) as exc:
            warn(f"skipping corrupted finding {meta_path.name}: {exc}")
            continue
        out.append(f)
    out.sort(key=lambda f: f.finding_id)
    return out


def load_config(out: str | Path) -> CampaignConfig:
    p = Path(out) / "campaign.json"
    try:
        return CampaignConfig.from_dict(json.loads(p.read_text()))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read campaign config {p}: {exc}") from None


def read_bitmap(out: str | Path) -> CoverageMap:
    raw = (Path(out) / "coverage.bitmap").read_bytes()
    if len(raw) != MAP_SIZE:
        raise ValueError(f"coverage.bitmap has {len(raw)} bytes, expected {MAP_SIZE}")
    return CoverageMap(raw)


__all__ = [
    "CampaignConfig", "CampaignResult", "run_campaign", "build_fuzzer", "write_output",
    "write_finding", "load_findings", "load_config", "read_bitmap", "load_seed_dir", "HarnessError",
]
