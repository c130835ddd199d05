"""End-to-end acceptance checks, one test per criterion.

Each test records a single ``PASS``/``FAIL criterion N: ...`` line, printed
as it finishes (visible with ``-s``) and repeated in the terminal summary.
Campaign results are cached at module level so the bracketing check (3)
can look at every campaign run for (1) and (2) without re-running them.
"""

import itertools
import json
import math
import random
from pathlib import Path

import numpy as np
import pytest

from demon_fuzz.campaign import CampaignConfig, load_findings, run_campaign, write_output
from demon_fuzz.cli import main, reproduces
from demon_fuzz.oracles import (
    Partition,
    PrecisionProbe,
    TrainingTrace,
    divergence_trip,
    misclustering_trip,
    nontermination_trip,
    precision_trip,
)
from demon_fuzz.steering import OracleTrip, StepBudget, execute_input
from demon_fuzz.targets import get_harness, load_seeds, load_witnesses
from demon_fuzz.targets.archive import kmeans
from demon_fuzz.triage import is_one_minimal

REDISCOVERY_BUDGET = 5_000_000
CLEAN_BUDGET = 1_000_000
RNG_SEEDS = (0, 1, 2, 3, 4)

# bug class -> (target, oracle ids that count as a rediscovery)
BUG_CLASSES = {
    "t1 partial-rendering evasion": ("t1", {"t1-evasion"}),
    "t2 bounds-overflow misclustering": ("t2", {"t2-row-bounds"}),
    "t3 NaN non-termination": ("t3", {"t3-nan-cost", "t3-nontermination"}),
    "t3 precision divergence": ("t3", {"t3-divergence"}),
}

RESULTS: list[str] = []
_campaigns: dict = {}


def record(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS.append(line)
    print(line)


def hit_for(oracle_ids, harness):
    """A finding that is an oracle trip of the right id, classified as its oracle declares."""
    specs = {o.oracle_id: o for o in harness.ORACLES}

    def check(f):
        v = f.verdict
        if not isinstance(v, OracleTrip) or v.oracle_id not in oracle_ids:
            return False
        spec = specs[v.oracle_id]
        return f.component is spec.component and f.impact is spec.impact
    return check


def rediscovery(label: str, seed: int):
    key = ("rediscover", label, seed)
    if key not in _campaigns:
        target, ids = BUG_CLASSES[label]
        cfg = CampaignConfig(target=target, variant="vulnerable", max_execs=REDISCOVERY_BUDGET,
                             rng_seed=seed)
        check = hit_for(ids, get_harness(target, "vulnerable"))
        _campaigns[key] = (cfg, run_campaign(cfg, stop_when=check), check)
    return _campaigns[key]


def clean(target: str):
    key = ("clean", target)
    if key not in _campaigns:
        cfg = CampaignConfig(target=target, variant="clean", max_execs=CLEAN_BUDGET, rng_seed=0)
        _campaigns[key] = (cfg, run_campaign(cfg), None)
    return _campaigns[key]


# --- 1 -----------------------------------------------------------------------------

def test_criterion_1_rediscovery():
    parts, ok = [], True
    for label in BUG_CLASSES:
        hits, execs = 0, []
        for seed in RNG_SEEDS:
            _, res, check = rediscovery(label, seed)
            found = [f for f in res.findings if check(f)]
            if found:
                hits += 1
                execs.append(found[0].exec_index)
        ok &= hits >= 4
        parts.append(f"{label} {hits}/5 (first hit at execs {execs})")
    record(1, ok, "; ".join(parts))
    assert ok


# --- 2 -----------------------------------------------------------------------------

@pytest.mark.parametrize("target", ["t1", "t2", "t3"])
def test_criterion_2_clean_soundness(target):
    _, res, _ = clean(target)
    ok = not res.findings and res.stats.crashes == 0 and res.stats.executions == CLEAN_BUDGET
    record(2, ok, f"{target} clean: {res.stats.executions} execs, {len(res.findings)} findings, "
                  f"{res.stats.crashes} crashes")
    assert ok


# --- 3 -----------------------------------------------------------------------------

def test_criterion_3_bracketing():
    for label in BUG_CLASSES:
        for seed in RNG_SEEDS:
            rediscovery(label, seed)
    for target in ("t1", "t2", "t3"):
        clean(target)
    total = sum(r.stats.executions for _, r, _ in _campaigns.values())
    rejects = sum(r.stats.parse_rejects for _, r, _ in _campaigns.values())
    parse_crashes = sum(r.stats.parse_region_crashes for _, r, _ in _campaigns.values())
    ok = parse_crashes == 0
    record(3, ok, f"{parse_crashes} parse-region crashes over {len(_campaigns)} campaigns; "
                  f"ParseReject {rejects}/{total} executions ({rejects / total:.1%})")
    assert ok


# --- 4 -----------------------------------------------------------------------------

def test_criterion_4_witnesses():
    tally, ok = [], True
    for target in ("t1", "t2", "t3"):
        h = get_harness(target, "vulnerable")
        budget = StepBudget(h.default_step_budget)
        for name, data in sorted(load_witnesses(target).items()):
            oracle_id = Path(name).stem
            trips = 0
            for _ in range(5):
                v, _, _ = execute_input(h, data, budget, [oracle_id])
                trips += isinstance(v, OracleTrip) and v.oracle_id == oracle_id
            ok &= trips == 5
            tally.append(f"{oracle_id} {trips}/5")
    record(4, ok, ", ".join(tally))
    assert ok


# --- 5 -----------------------------------------------------------------------------

def test_criterion_5_filter_check(tmp_path, capsys):
    seed = load_seeds("t1")[0]
    corpus = tmp_path / "findings"
    corpus.mkdir()
    rng = random.Random(5)
    for i in range(3197):
        if i % 457 == 0 and i // 457 < 7:
            data = seed  # the reference parser accepts these
        else:
            data = seed[:rng.randrange(4, len(seed) - 1)]  # truncated: rejected
        (corpus / f"{i:05d}.bin").write_bytes(data)
    assert main(["filter-check", str(corpus), "--target", "t1"]) == 0
    out = capsys.readouterr().out
    first = out.splitlines()[0]
    ok = first.startswith("7/3197 (fraction 0.00219") and "percent" in out and "note:" in out
    record(5, ok, first)
    assert ok


# --- 6 -----------------------------------------------------------------------------

def test_criterion_6_numeric_oracles():
    rng = random.Random(6)
    epsilons = sorted([0.0] + [10 ** rng.uniform(-12, 6) for _ in range(8)])
    monotone_bad = 0
    for _ in range(10_000):
        x = struct_double(rng)
        trips = [precision_trip(x, PrecisionProbe(e)) for e in epsilons]
        # tripping can only switch off as epsilon grows
        monotone_bad += any(not a and b for a, b in zip(trips, trips[1:]))
    exact = precision_trip(2.0 ** 25 + 1, PrecisionProbe(0.5))
    perm_bad = 0
    for _ in range(1000):
        n = rng.randrange(2, 10)
        a = [rng.randrange(4) for _ in range(n)]
        b = [rng.randrange(4) for _ in range(n)]
        perm = list(range(4))
        rng.shuffle(perm)
        s = rng.randrange(n)
        pa, pb = Partition.from_labels(a), Partition.from_labels(b)
        if misclustering_trip(pa, pb, s) != misclustering_trip(pa, Partition.from_labels([perm[x] for x in b]), s):
            perm_bad += 1
    v = [0.5, -3.0, 1e10]
    trace = TrainingTrace()
    trace.record(1.0)
    trace.converged = True
    stuck = TrainingTrace()
    for _ in range(10):
        stuck.record(2.0)
    trivial = (divergence_trip(v, v, 1e-12) is False
               and divergence_trip([0.0], [1.0], 0.5) is True
               and nontermination_trip(trace, 10) is False
               and nontermination_trip(stuck, 10) is True)
    ok = monotone_bad == 0 and exact is True and perm_bad == 0 and trivial
    record(6, ok, f"monotonicity violations {monotone_bad}/10000, precision_trip(2^25+1, 0.5)={exact}, "
                  f"permutation violations {perm_bad}/1000, trivial cases {'exact' if trivial else 'WRONG'}")
    assert ok


def struct_double(rng):
    kind = rng.random()
    if kind < 0.5:
        return math.ldexp(rng.random(), rng.randint(-140, 140)) * rng.choice((-1, 1))
    return float(rng.randint(-(1 << 40), 1 << 40))


# --- 7 -----------------------------------------------------------------------------

def partitions(n, k):
    """Every set partition of range(n) into exactly k blocks, as canonical label lists."""
    def rec(i, labels, used):
        if i == n:
            if used == k:
                yield tuple(labels)
            return
        for lab in range(min(used + 1, k)):
            yield from rec(i + 1, labels + [lab], max(used, lab + 1))
    yield from rec(0, [], 0)


def canonical(labels):
    seen = {}
    return tuple(seen.setdefault(x, len(seen)) for x in labels)


def wcss(matrix, labels):
    total = 0.0
    for c in set(labels):
        pts = matrix[[i for i, x in enumerate(labels) if x == c]]
        total += float(((pts - pts.mean(axis=0)) ** 2).sum())
    return total


def kmeans_family():
    """Datasets of 1..6 samples: two well-separated groups in every membership
    pattern and sample order (k=2), plus k=1 and k=n on the same points."""
    rng = np.random.default_rng(7)
    for n in range(1, 7):
        jitter = rng.uniform(-0.5, 0.5, size=(n, 3))
        for mask in itertools.product((0, 1), repeat=n):
            pts = np.array([[10.0 * m, 10.0 * m, 0.0] for m in mask]) + jitter
            if 0 < sum(mask) < n:
                yield pts, 2
            if mask[0] == 0:
                yield pts, 1
                yield pts, n


def test_criterion_7_kmeans_equivalence():
    total = agree = 0
    for pts, k in kmeans_family():
        got = canonical(kmeans(pts, k))
        scores = {p: wcss(pts, p) for p in partitions(len(pts), k)}
        best = min(scores.values())
        optimal = {p for p, s in scores.items() if math.isclose(s, best, rel_tol=1e-12, abs_tol=1e-12)}
        total += 1
        agree += got in optimal
    ok = total > 0 and agree == total
    record(7, ok, f"k-means matches brute-force minimum WCSS on {agree}/{total} datasets")
    assert ok


# --- 8 -----------------------------------------------------------------------------

def test_criterion_8_replay(tmp_path):
    outs = []
    for run in ("a", "b"):
        cfg = CampaignConfig(target="t1", variant="vulnerable", max_execs=REDISCOVERY_BUDGET, rng_seed=0,
                             out=str(tmp_path / run))
        check = hit_for(BUG_CLASSES["t1 partial-rendering evasion"][1], get_harness("t1", "vulnerable"))
        write_output(cfg.out, run_campaign(cfg, stop_when=check))
        outs.append(Path(cfg.out))

    def snapshot(out):
        files = sorted(p for p in out.rglob("*") if p.is_file())
        return {str(p.relative_to(out)): p.read_bytes() for p in files}
    a, b = snapshot(outs[0]), snapshot(outs[1])
    # campaign.json records the (necessarily different) output path; all else must match
    cfg_a, cfg_b = (json.loads(x.pop("campaign.json")) for x in (a, b))
    cfg_a.pop("out"), cfg_b.pop("out")
    queue = sum(1 for k in a if k.startswith("queue"))
    ok = a == b and cfg_a == cfg_b and queue > 0 and "report.json" in a
    record(8, ok, f"two t1 runs: {queue} queue files, findings and report.json "
                  f"{'byte-identical' if ok else 'DIFFER'}")
    assert ok


# --- 9 -----------------------------------------------------------------------------

def test_criterion_9_minimization(tmp_path):
    checked = bad = 0
    shrink = []
    for label in BUG_CLASSES:
        for seed in RNG_SEEDS:
            cfg, res, check = rediscovery(label, seed)
            hits = [f for f in res.findings if check(f)]
            if not hits:
                continue
            out = tmp_path / f"{label.split()[0]}-{len(shrink)}-{seed}"
            write_output(out, res)
            target = hits[0]
            before = len(target.data)
            assert main(["minimize", "--out", str(out), "--finding", target.finding_id]) == 0
            small = next(f for f in load_findings(out) if f.finding_id == target.finding_id)
            h = get_harness(cfg.target, cfg.variant)
            pred = reproduces(h, StepBudget(h.default_step_budget), h.default_oracles(), target.dedup_key)
            checked += 1
            if not (small.minimized and pred(small.data) and is_one_minimal(small.data, pred)):
                bad += 1
            shrink.append(f"{before}->{len(small.data)}")
    ok = checked > 0 and bad == 0
    record(9, ok, f"{checked - bad}/{checked} minimized findings reproduce their key and are "
                  f"1-minimal (bytes {', '.join(shrink)})")
    assert ok


def test_report_json_is_parseable(tmp_path):
    # guard for criterion 8's snapshot: the report must be valid JSON, not only stable bytes
    cfg = CampaignConfig(target="t2", variant="vulnerable", max_execs=500, out=str(tmp_path / "o"))
    write_output(cfg.out, run_campaign(cfg))
    json.loads((tmp_path / "o" / "report.json").read_text())
