"""Edge coverage bookkeeping: edge hashing, hit-count bucketing, novelty."""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

MAP_SIZE = 1 << 16
MAP_MASK = MAP_SIZE - 1

# Upper bound (inclusive) of the raw hit count for each class index 1..8.
# Class 0 is "never hit".
_CLASS_UPPER = (0, 1, 2, 3, 7, 15, 31, 127)
N_CLASSES = 9


def edge_id(prev_site: int, cur_site: int) -> int:
    return ((prev_site >> 1) ^ cur_site) & MAP_MASK


def hit_class(count: int) -> int:
    """Map a raw hit count to its class index in 0..8."""
    if count < 0:
        raise ValueError("hit counts are non-negative")
    if count <= 3:
        return count
    if count <= 7:
        return 4
    if count <= 15:
        return 5
    if count <= 31:
        return 6
    if count <= 127:
        return 7
    return 8


# Lookup used by the vectorized path; counts >= 128 are clipped to 128 first.
_LUT = np.array([hit_class(i) for i in range(129)], dtype=np.uint8)


class CoverageMap:
    """Fixed 64 Ki-bucket map of hit classes.

    ``nonzero`` caches the indices of non-zero buckets so that per-execution
    maps (which are very sparse) can be compared without a full scan.
    """

    __slots__ = ("buckets", "_nonzero")

    def __init__(self, buckets: bytes | bytearray | None = None):
        if buckets is None:
            self.buckets = bytearray(MAP_SIZE)
        else:
            if len(buckets) != MAP_SIZE:
                raise ValueError(f"coverage map must have {MAP_SIZE} buckets, got {len(buckets)}")
            self.buckets = bytearray(buckets)
            if max(self.buckets) >= N_CLASSES:
                raise ValueError("bucket values must be hit-class indices 0..8")
        self._nonzero: tuple[int, ...] | None = None

    @classmethod
    def from_sparse(cls, classes: Mapping[int, int]) -> "CoverageMap":
        m = cls()
        buckets = m.buckets
        for idx, cls_ in classes.items():
            buckets[idx] = cls_
        m._nonzero = tuple(sorted(i for i, c in classes.items() if c))
        return m

    @property
    def nonzero(self) -> tuple[int, ...]:
        if self._nonzero is None:
            arr = np.frombuffer(bytes(self.buckets), dtype=np.uint8)
            self._nonzero = tuple(int(i) for i in np.flatnonzero(arr))
        return self._nonzero

    def edges_covered(self) -> int:
        return len(self.nonzero)

    def copy(self) -> "CoverageMap":
        m = CoverageMap.__new__(CoverageMap)
        m.buckets = bytearray(self.buckets)
        m._nonzero = self._nonzero
        return m

    def to_bytes(self) -> bytes:
        return bytes(self.buckets)

    def merge(self, other: "CoverageMap") -> bool:
        """In-place union with ``other``; returns True if anything grew."""
        mine = self.buckets
        grew = False
        for idx in other.nonzero:
            c = other.buckets[idx]
            if c > mine[idx]:
                mine[idx] = c
                grew = True
        if grew:
            self._nonzero = None
        return grew

    def __eq__(self, other: object) -> bool:
        return isinstance(other, CoverageMap) and self.buckets == other.buckets

    def __repr__(self) -> str:
        return f"CoverageMap(edges={self.edges_covered()})"


def classify(raw_counts: Iterable[int] | np.ndarray) -> CoverageMap:
    counts = np.asarray(raw_counts, dtype=np.int64)
    if counts.shape != (MAP_SIZE,):
        raise ValueError(f"raw counts must have shape ({MAP_SIZE},)")
    if (counts < 0).any():
        raise ValueError("hit counts are non-negative")
    classes = _LUT[np.minimum(counts, 128)]
    m = CoverageMap.__new__(CoverageMap)
    m.buckets = bytearray(classes.tobytes())
    m._nonzero = None
    return m


def classify_sparse(counts: Mapping[int, int]) -> CoverageMap:
    """Same as :func:`classify` for a map given as ``{bucket: raw_count}``."""
    return CoverageMap.from_sparse({i: hit_class(c) for i, c in counts.items()})


def union(a: CoverageMap, b: CoverageMap) -> CoverageMap:
    out = a.copy()
    out.merge(b)
    return out


def is_interesting(exec_map: CoverageMap, global_map: CoverageMap) -> bool:
    g = global_map.buckets
    e = exec_map.buckets
    for idx in exec_map.nonzero:
        if e[idx] > g[idx]:
            return True
    return False


def has_new_edge(exec_map: CoverageMap, global_map: CoverageMap) -> bool:
    """True if ``exec_map`` hits a bucket that ``global_map`` has never seen."""
    g = global_map.buckets
    return any(g[idx] == 0 for idx in exec_map.nonzero)
