"""T2: report archives -> token-bucket feature matrix -> k-means clustering.

Input format (little-endian)::

    b"SARC" | entry_count:u16 (<= 64) | (declared_len:u32, payload)*

Each entry is one sample. Its payload is a stream of tokens separated by
0x20; a token is a one-byte bucket hint followed by the token name. The
archive writer stores ``crc32(name) % 32`` as the hint.

Feature rows live in one shared arena of ``n_samples * 32`` cells. The
clean extractor recomputes the bucket from the name. The vulnerable one
trusts the hint byte as the column index without clamping it to the row,
so a forged hint writes into other samples' rows (offsets wrap inside the
arena, never outside it).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from ..oracles import Partition, PrecisionProbe, misclustering_trip, narrow, precision_trip
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

MAGIC = b"SARC"
MAX_ENTRIES = 64
N_FEATURES = 32


class ClusteringError(ValueError):
    pass


@dataclass(frozen=True)
class ArchiveInput:
    entries: tuple[bytes, ...]

    def tokens(self, i: int) -> list[bytes]:
        return [t for t in self.entries[i].split(b" ") if t]


_SITES = make_sites("t2", [
    ("header", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("bad-magic", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("too-many", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("entry", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("entry-truncated", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("trailing", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("empty-entry", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("token", Phase.EXECUTE, C.FEATURE_EXTRACTION),
    ("token-hint", Phase.EXECUTE, C.FEATURE_EXTRACTION),
    ("hint-mismatch", Phase.EXECUTE, C.FEATURE_EXTRACTION),
    ("arena-wrap", Phase.EXECUTE, C.FEATURE_EXTRACTION),
    ("normalize", Phase.EXECUTE, C.FEATURE_EXTRACTION),
    ("empty-row", Phase.EXECUTE, C.FEATURE_EXTRACTION),
    ("kmeans-init", Phase.EXECUTE, C.CLUSTERING),
    ("kmeans-degenerate", Phase.EXECUTE, C.CLUSTERING),
    ("kmeans-iter", Phase.EXECUTE, C.CLUSTERING),
    ("kmeans-moved", Phase.EXECUTE, C.CLUSTERING),
    ("kmeans-empty", Phase.EXECUTE, C.CLUSTERING),
    ("kmeans-fixpoint", Phase.EXECUTE, C.CLUSTERING),
])
S = {s.name: s.site_id for s in _SITES}


def bucket_of(name: bytes) -> int:
    return zlib.crc32(name) % N_FEATURES


def make_token(name: bytes) -> bytes:
    return bytes((bucket_of(name),)) + name


def build_archive(samples: list[list[bytes]]) -> bytes:
    """Pack token-name lists into an archive with correct bucket hints."""
    out = bytearray(MAGIC + struct.pack("<H", len(samples)))
    for names in samples:
        payload = b" ".join(make_token(n) for n in names)
        out += struct.pack("<I", len(payload)) + payload
    return bytes(out)


def parse_archive(data: bytes, ctx: ExecContext | None = None) -> ArchiveInput:
    visit = ctx.visit if ctx is not None else _no_visit
    visit(S["header"])
    if len(data) < 6:
        raise Rejection("short header")
    if data[:4] != MAGIC:
        visit(S["bad-magic"])
        raise Rejection("bad magic")
    (count,) = struct.unpack_from("<H", data, 4)
    if count > MAX_ENTRIES:
        visit(S["too-many"])
        raise Rejection("too many entries")
    pos = 6
    entries = []
    for _ in range(count):
        visit(S["entry"])
        if pos + 4 > len(data):
            visit(S["entry-truncated"])
            raise Rejection("truncated entry header")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n > len(data):
            visit(S["entry-truncated"])
            raise Rejection("declared length exceeds file")
        if n == 0:
            visit(S["empty-entry"])
        entries.append(data[pos:pos + n])
        pos += n
    if pos != len(data):
        visit(S["trailing"])
        raise Rejection("trailing bytes after last entry")
    return ArchiveInput(tuple(entries))


def _no_visit(site: int) -> None:
    pass


def extract_reference(archive: ArchiveInput) -> np.ndarray:
    """Clean extraction without instrumentation; rows are L1-normalized."""
    n = len(archive.entries)
    arena = np.zeros(n * N_FEATURES)
    for i in range(n):
        for tok in archive.tokens(i):
            arena[i * N_FEATURES + bucket_of(tok[1:])] += 1.0
    m = arena.reshape(n, N_FEATURES)
    sums = m.sum(axis=1, keepdims=True)
    np.divide(m, sums, out=m, where=sums > 0)
    return m


def kmeans(matrix: np.ndarray, k: int, max_iter: int = 50,
           ctx: ExecContext | None = None) -> list[int]:
    """Lloyd's k-means with pinned initialization and tie-breaking.

    Centroids start at the first ``k`` distinct rows in sample order;
    assignment ties go to the lowest cluster index; a cluster that loses
    all its members keeps its previous centroid. Stops at an assignment
    fixpoint or after ``max_iter`` rounds.
    """
    visit = ctx.visit if ctx is not None else _no_visit
    n = matrix.shape[0]
    if k < 1:
        raise ClusteringError("k must be >= 1")
    visit(S["kmeans-init"])
    seeds: list[int] = []
    for i in range(n):
        if not any(np.array_equal(matrix[i], matrix[j]) for j in seeds):
            seeds.append(i)
            if len(seeds) == k:
                break
    if len(seeds) < k:
        visit(S["kmeans-degenerate"])
        raise ClusteringError(f"only {len(seeds)} distinct rows for k={k}")
    centroids = matrix[seeds].copy()
    assign = None
    for _ in range(max_iter):
        visit(S["kmeans-iter"])
        if ctx is not None:
            ctx.step(n)
        d = ((matrix[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new = d.argmin(axis=1)
        if assign is not None and np.array_equal(new, assign):
            visit(S["kmeans-fixpoint"])
            break
        visit(S["kmeans-moved"])
        assign = new
        for c in range(k):
            members = matrix[assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
            else:
                visit(S["kmeans-empty"])
    return [int(a) for a in assign]


def distinct_rows(matrix: np.ndarray) -> int:
    return len({row.tobytes() for row in matrix})


class ArchiveHarness(TargetHarness):
    name = "t2"
    description = "archive token extractor + k-means (directed feature-matrix corruption)"
    ORACLES = (
        OracleSpec("t2-row-bounds", C.FEATURE_EXTRACTION, I.MISCLUSTERING,
                   "a feature write lands outside the current sample's row"),
        OracleSpec("t2-misclustering", C.CLUSTERING, I.MISCLUSTERING,
                   "the sentinel sample's co-cluster set differs from a clean extraction's"),
        OracleSpec("t2-arena-overrun", C.FEATURE_EXTRACTION, I.CODE_EXECUTION,
                   "a feature write runs past the end of the arena (opt-in)",
                   default_enabled=False),
        OracleSpec("t2-norm-precision", C.FEATURE_EXTRACTION, I.MISCLUSTERING,
                   "narrowing a normalized feature to binary32 loses more than epsilon "
                   "(opt-in; needs epsilon)", default_enabled=False),
    )
    SITES = _SITES
    default_step_budget = 100_000

    def __init__(self, variant: str = "clean", *, k: int = 2, max_iter: int = 50,
                 sentinel: int = 0, epsilon: float | None = None, **params):
        super().__init__(variant, k=k, max_iter=max_iter, sentinel=sentinel, epsilon=epsilon, **params)
        self.k = k
        self.max_iter = max_iter
        self.sentinel = sentinel
        self.probe = PrecisionProbe(epsilon) if epsilon is not None else None

    def parse(self, data: bytes, ctx: ExecContext) -> ArchiveInput:
        return parse_archive(data, ctx)

    def extract(self, archive: ArchiveInput, ctx: ExecContext) -> np.ndarray:
        n = len(archive.entries)
        size = n * N_FEATURES
        arena = [0.0] * size
        vulnerable = self.vulnerable
        for i in range(n):
            row = i * N_FEATURES
            for tok in archive.tokens(i):
                ctx.visit(S["token"])
                ctx.step()
                if vulnerable:
                    j = tok[0]
                    if j != bucket_of(tok[1:]):
                        ctx.visit(S["hint-mismatch"])
                else:
                    j = bucket_of(tok[1:])
                off = row + j
                if off >= size:
                    ctx.visit(S["arena-wrap"])
                    ctx.assert_decision("t2-arena-overrun", True,
                                        f"sample {i} write at cell {off} past arena of {size}")
                    off %= size
                ctx.assert_decision("t2-row-bounds", not row <= off < row + N_FEATURES,
                                    f"sample {i} bucket {j} lands in row {off // N_FEATURES}")
                arena[off] += 1.0
        m = np.array(arena, dtype=np.float64).reshape(n, N_FEATURES)
        for i in range(n):
            total = m[i].sum()
            if total <= 0:
                ctx.visit(S["empty-row"])
                continue
            ctx.visit(S["normalize"])
            m[i] /= total
            if vulnerable:
                # Stored as binary32, like the double->float normalization cast.
                if self.probe is not None and ctx.oracle_enabled("t2-norm-precision"):
                    for v in m[i]:
                        ctx.assert_decision("t2-norm-precision", precision_trip(float(v), self.probe),
                                            f"sample {i} feature {float(v)!r} narrows lossily")
                m[i] = m[i].astype(np.float32)
        return m

    def execute(self, archive: ArchiveInput, ctx: ExecContext) -> str:
        m = self.extract(archive, ctx)
        n = m.shape[0]
        if n == 0:
            return "empty"
        if not self.vulnerable and distinct_rows(m) < self.k:
            ctx.visit(S["kmeans-degenerate"])
            return "degenerate"
        labels = kmeans(m, self.k, self.max_iter, ctx)
        if ctx.oracle_enabled("t2-misclustering") and self.vulnerable and self.sentinel < n:
            ref = extract_reference(archive)
            if not np.array_equal(ref, m) and distinct_rows(ref) >= self.k:
                ref_labels = kmeans(ref, self.k, self.max_iter)
                ctx.assert_decision(
                    "t2-misclustering",
                    misclustering_trip(Partition.from_labels(ref_labels), Partition.from_labels(labels),
                                       self.sentinel),
                    f"sample {self.sentinel} moved cluster")
        return "clusters:" + ",".join(map(str, labels))


SEED_SAMPLES = [
    [b"open", b"read", b"close", b"stat"],
    [b"open", b"read", b"read", b"close"],
    [b"connect", b"send", b"recv", b"socket"],
    [b"socket", b"connect", b"send", b"send"],
]


def seed_archive() -> bytes:
    """Two file-IO reports and two network reports."""
    return build_archive(SEED_SAMPLES)


def row_bounds_witness() -> bytes:
    """Seed whose first token in sample 0 carries a forged 0xFF bucket hint."""
    data = bytearray(seed_archive())
    data[6 + 4] = 0xFF
    return bytes(data)


def misclustering_witness() -> bytes:
    """Seed whose sample 0 keeps its file-IO token names but carries the bucket
    hints of a network report, so the vulnerable extractor files it with the
    network samples while every write stays inside its own row."""
    names = SEED_SAMPLES[0]
    hints = [bucket_of(n) for n in SEED_SAMPLES[2]]
    payload = b" ".join(bytes((h,)) + n for h, n in zip(hints, names))
    rest = build_archive(SEED_SAMPLES[1:])[6:]
    return MAGIC + struct.pack("<H", len(SEED_SAMPLES)) + struct.pack("<I", len(payload)) + payload + rest
