import itertools
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demon_fuzz.steering import (
    Completed,
    ExecContext,
    OracleTrip,
    ParseReject,
    Phase,
    Rejection,
    StepBudget,
    execute_input,
)
from demon_fuzz.targets import (
    SEED_BUILDERS,
    WITNESS_BUILDERS,
    get_harness,
    load_seeds,
    load_witnesses,
    names,
    seeds_dir,
    witnesses_dir,
)
from demon_fuzz.targets import archive, face, linreg


def run(h, data, enabled=None, budget=None):
    return execute_input(h, data, StepBudget(budget or h.default_step_budget), enabled)[0]


def exec_ctx(h, enabled=()):
    ctx = ExecContext(h, frozenset(enabled), 1 << 30)
    ctx.phase = Phase.EXECUTE
    return ctx


def test_registry_lists_three_targets():
    assert names() == ["t1", "t2", "t3"]
    with pytest.raises(KeyError):
        get_harness("t9")
    with pytest.raises(ValueError):
        get_harness("t1", "sloppy")


@pytest.mark.parametrize("name", ["t1", "t2", "t3"])
def test_checked_in_corpora_match_builders(name):
    for fname, build in SEED_BUILDERS[name].items():
        assert (seeds_dir(name) / fname).read_bytes() == build()
    for fname, build in WITNESS_BUILDERS[name].items():
        assert (witnesses_dir(name) / fname).read_bytes() == build()


@pytest.mark.parametrize("name", ["t1", "t2", "t3"])
def test_witnesses_trip_vulnerable_only(name):
    for oracle_id, data in load_witnesses(name).items():
        vuln = get_harness(name, "vulnerable")
        v = run(vuln, data, enabled=[oracle_id])
        assert isinstance(v, OracleTrip) and v.oracle_id == oracle_id
        clean = get_harness(name, "clean")
        assert isinstance(run(clean, data, enabled=[o.oracle_id for o in clean.ORACLES
                                                     if o.oracle_id != "t2-norm-precision"]),
                          (Completed, ParseReject))


# --- T1 ------------------------------------------------------------------------------

def rle(w, h, runs):
    return face.MAGIC + struct.pack("<HH", w, h) + b"".join(bytes(r) for r in runs)


def test_t1_decode_simple():
    img = face.parse_header(rle(2, 2, [(4, 128)]))
    assert face.decode(img, vulnerable=False) == bytes([128] * 4)


def test_t1_zero_run_partial_render():
    img = face.parse_header(rle(2, 2, [(2, 128), (0, 0), (2, 128)]))
    assert face.decode(img, vulnerable=True) == bytes([128, 128, 0, 0])
    assert face.decode(img, vulnerable=False) == bytes([128] * 4)
    assert face.decode_reference(img) == bytes([128] * 4)


@pytest.mark.parametrize("data", [
    rle(2, 2, [(3, 1)]),            # short payload
    rle(2, 2, [(3, 1)])[:-1],       # truncated run pair
    rle(2, 2, [(4, 1), (1, 1)]),    # overlong
    b"XDIM" + rle(2, 2, [(4, 1)])[4:],
    rle(300, 300, [(255, 0)]),      # dimension overflow
    b"SDIM\x01",
])
def test_t1_rejections_in_both_variants(data):
    with pytest.raises(Rejection):
        face.parse_header(data)
    for variant in ("clean", "vulnerable"):
        assert isinstance(run(get_harness("t1", variant), data), ParseReject)


def test_t1_detector_examples():
    assert face.detect(bytes([128] * 64), 8, 8) == face.FACE_FOUND
    assert face.detect(bytes(64), 8, 8) == face.NO_FACE
    assert face.detect(bytes([128] * 49), 7, 7) == face.NO_FACE
    with pytest.raises(ValueError):
        face.DetectorConfig(band_low=200, band_high=100)


def test_t1_seed_has_exactly_one_face_window():
    img = face.parse_header(load_seeds("t1")[0])
    px = face.decode_reference(img)
    w = img.width
    hits = 0
    for wy in range(img.height // 8):
        for wx in range(w // 8):
            vals = [px[(wy * 8 + r) * w + wx * 8 + c] for r in range(8) for c in range(8)]
            if 96 <= sum(vals) / 64 <= 160:
                hits += 1
    assert hits == 1
    assert run(get_harness("t1", "clean"), load_seeds("t1")[0]) == Completed("face-found")


@settings(max_examples=200)
@given(st.integers(1, 12), st.integers(1, 12), st.data())
def test_t1_encode_decode_roundtrip(w, h, data):
    px = data.draw(st.binary(min_size=w * h, max_size=w * h))
    enc = face.encode(w, h, px)
    assert face.decode(face.parse_header(enc), vulnerable=False) == px


# --- T2 ---------------------------------------------------------------------------------

def raw_archive(entries):
    out = archive.MAGIC + struct.pack("<H", len(entries))
    for e in entries:
        out += struct.pack("<I", len(e)) + e
    return out


def test_t2_single_token_clean():
    h = get_harness("t2", "clean")
    m = h.extract(archive.parse_archive(raw_archive([b"ab"])), exec_ctx(h))
    assert m.shape == (1, 32)
    assert np.count_nonzero(m) == 1
    assert m[0, zlib.crc32(b"b") % 32] == 1.0


def test_t2_forged_hint_writes_into_next_row():
    data = raw_archive([b"\xffx", archive.make_token(b"y")])
    h = get_harness("t2", "vulnerable")
    # independent index arithmetic: row 0 base 0, column 255, arena of 2*32 cells wraps
    off = (0 * 32 + 255) % (2 * 32)
    assert off // 32 == 1
    v = run(h, data, enabled=["t2-row-bounds"])
    assert isinstance(v, OracleTrip) and v.oracle_id == "t2-row-bounds"
    assert f"row {off // 32}" in v.detail
    m = h.extract(archive.parse_archive(data), exec_ctx(h))
    assert not m[0].any()
    assert m[1, off % 32] > 0
    wrapped = run(h, data, enabled=["t2-arena-overrun"])
    assert isinstance(wrapped, OracleTrip) and wrapped.impact.value == "CodeExecution"


def test_t2_empty_archive():
    for variant in ("clean", "vulnerable"):
        h = get_harness("t2", variant)
        m = h.extract(archive.parse_archive(raw_archive([])), exec_ctx(h))
        assert m.shape == (0, 32)
        assert run(h, raw_archive([]), enabled=[o.oracle_id for o in h.ORACLES]) == Completed("empty")


@pytest.mark.parametrize("data", [
    b"SARC",
    b"SARX\x00\x00",
    archive.MAGIC + struct.pack("<H", 65),
    raw_archive([b"abc"])[:-1],
    raw_archive([b"abc"]) + b"!",
])
def test_t2_container_rejections(data):
    for variant in ("clean", "vulnerable"):
        assert isinstance(run(get_harness("t2", variant), data), ParseReject)


def test_t2_build_parse_roundtrip():
    a = archive.parse_archive(archive.seed_archive())
    assert len(a.entries) == 4
    assert [t[1:] for t in a.tokens(0)] == archive.SEED_SAMPLES[0]


def test_t2_clean_extraction_permutation_stable():
    samples = archive.SEED_SAMPLES
    base = archive.extract_reference(archive.parse_archive(archive.build_archive(samples)))
    h = get_harness("t2", "clean")
    for perm in itertools.permutations(range(4)):
        data = archive.build_archive([samples[i] for i in perm])
        m = h.extract(archive.parse_archive(data), exec_ctx(h))
        assert np.array_equal(m, base[list(perm)])


def embed(values):
    m = np.zeros((len(values), 32))
    m[:, 0] = values
    return m


def test_kmeans_examples():
    assert archive.kmeans(embed([0, 0, 10, 10]), 2) == [0, 0, 1, 1]
    labels = archive.kmeans(embed([1, 5, 9]), 3)
    assert sorted(labels) == [0, 1, 2]
    labels = archive.kmeans(embed([3, 3, 8, 3]), 2)
    assert labels[0] == labels[1] == labels[3]
    with pytest.raises(archive.ClusteringError):
        archive.kmeans(embed([1, 1, 1]), 2)


def test_kmeans_pinned_tie_rule():
    # centroids start at rows 0 and 1; sample 2 is equidistant and goes to cluster 0
    assert archive.kmeans(embed([0, 10, 5]), 2, max_iter=1) == [0, 1, 0]


def test_norm_precision_oracle_needs_epsilon():
    h = get_harness("t2", "vulnerable", epsilon=1e-12)
    v = run(h, load_seeds("t2")[0], enabled=["t2-norm-precision"])
    # token counts of 4 give quarters, exactly representable in binary32
    assert v == Completed("clusters:1,1,0,0")
    third = archive.build_archive([[b"a", b"b", b"c"], [b"x"]])
    v = run(h, third, enabled=["t2-norm-precision"])
    assert isinstance(v, OracleTrip)


# --- T3 ----------------------------------------------------------------------------------

def test_t3_single_feature_regression_both_paths():
    a = np.array([[1.0, 1.0], [1.0, 2.0]])
    y = np.array([2.0, 4.0])
    # closed-form least squares
    want = np.linalg.lstsq(a, y, rcond=None)[0]
    assert np.allclose(want, [0.0, 2.0])
    h = get_harness("t3", "vulnerable")
    for a_path, y_path in ((a, y), (a.astype(np.float32).astype(float), y.astype(np.float32).astype(float))):
        ctx = exec_ctx(h, [o.oracle_id for o in h.ORACLES])
        w, trace = linreg.train(a_path, y_path, 0.1, 100_000, 1e-30, ctx)
        assert trace.converged
        assert np.max(np.abs(w - want)) < 1e-6


def test_t3_huge_features_overflow_to_nan():
    a = np.column_stack([np.ones(3), [1e200, 2e200, 3e200]])
    y = np.array([1.0, 2.0, 3.0])
    h = get_harness("t3", "vulnerable")
    ctx = exec_ctx(h, ["t3-nan-cost"])
    from demon_fuzz.steering import _OracleTripped
    with pytest.raises(_OracleTripped) as exc:
        linreg.train(a, y, 0.1, 100, 1e-12, ctx)
    assert exc.value.verdict.oracle_id == "t3-nan-cost"
    # the cost went through infinity before turning NaN
    _, trace = linreg.train(a, y, 0.1, 100, 1e-12)
    assert np.isinf(trace.cost_history).any()
    assert np.isnan(trace.cost_history[-1])


def test_t3_nan_run_is_nontermination():
    h = get_harness("t3", "vulnerable")
    w = load_witnesses("t3")["t3-nan-cost"]
    v = run(h, w, enabled=["t3-nontermination"])
    assert isinstance(v, OracleTrip) and v.oracle_id == "t3-nontermination"
    assert isinstance(run(h, w, enabled=["t3-nan-cost", "t3-nontermination"]), OracleTrip)
    from demon_fuzz.steering import Hang
    assert run(h, w, enabled=["t3-nontermination"], budget=100) == Hang(100)


def test_t3_large_offset_features_diverge():
    rng = np.random.default_rng(0)
    x = np.column_stack([2.0**25 + 2 * rng.integers(0, 16, 8) + 1, rng.normal(size=(8, 3))])
    y = 0.5 * x[:, 0] + x[:, 1]
    data = linreg.pack_records(x, y)
    v = run(get_harness("t3", "vulnerable"), data, enabled=["t3-divergence"])
    assert isinstance(v, OracleTrip) and v.oracle_id == "t3-divergence"


def test_t3_seed_gap_below_tol():
    for variant in ("clean", "vulnerable"):
        h = get_harness(variant=variant, name="t3")
        models = h.fit(linreg.Dataset(*linreg.seed_dataset()))
        gap = np.max(np.abs(models["low"][0].weights - models["high"][0].weights))
        assert gap < h.tol


@pytest.mark.parametrize("data", [b"\x00" * 39, b"\x00" * 40 * 257])
def test_t3_shape_rejections(data):
    for variant in ("clean", "vulnerable"):
        assert isinstance(run(get_harness("t3", variant), data), ParseReject)


def test_t3_clean_validation():
    h = get_harness("t3", "clean")
    x, y = linreg.seed_dataset()
    big = x.copy()
    big[0, 0] = 2e9
    assert run(h, linreg.pack_records(big, y)) == ParseReject("value out of range")
    # a duplicated column is ill-conditioned in the sense of a null direction, which is allowed
    dup = x.copy()
    dup[:, 3] = dup[:, 2]
    assert isinstance(run(h, linreg.pack_records(dup, y)), Completed)
