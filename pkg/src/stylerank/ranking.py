"""Exact k-nearest-neighbor ranking with a ball tree.

Nodes are stored as flat arrays in preorder.  Each node owns a contiguous
range ``idx[start:end]`` of a row permutation; internal nodes split their
range at the median of the widest-spread dimension (left child takes
``ceil(count / 2)``).  Queries are depth-first branch-and-bound: a node is
skipped when ``max(0, d(q, centroid) - radius)`` exceeds the current k-th
best distance.  Distances accumulate in float64 and ties are ordered by
ascending row index, so results equal a sorted linear scan.

``.btx`` layout (little-endian)::

    "BTX1" | u32 version | u32 leaf_size | u64 n | u32 dim | u32 node count | u64 .fmx checksum
    i64 start[nodes] | i64 end[nodes] | i64 left[nodes] | i64 right[nodes]
    f64 radius[nodes] | f64 centroid[nodes * dim] | i64 row permutation[n]
    u64 CRC64 of every preceding byte
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._checksum import ChecksumError, FormatError, crc64
from .feature_store import FeatureMatrix

MAGIC = b"BTX1"
VERSION = 1
DEFAULT_LEAF_SIZE = 32
SELF_MATCH_DISTANCE = 1e-9
# Pruning slack: bounds are computed in floating point and may overshoot by a few ulps.
_PRUNE_SLACK = 1e-10


class RankingError(ValueError):
    pass


@dataclass(frozen=True)
class RankedItem:
    id: str
    row: int
    distance: float
    rank: int

    def to_dict(self, decimals: int | None = 6) -> dict:
        d = self.distance if decimals is None else round(self.distance, decimals)
        return {"id": self.id, "rank": self.rank, "distance": d}


@dataclass(frozen=True)
class RankingResult:
    entries: tuple[RankedItem, ...]
    distance_evaluations: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def rows(self) -> list[int]:
        return [e.row for e in self.entries]

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    @property
    def distances(self) -> list[float]:
        return [e.distance for e in self.entries]

    def to_json(self) -> list[dict]:
        return [e.to_dict() for e in self.entries]


def euclidean(f, g) -> float:
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if f.shape != g.shape:
        raise RankingError(f"length mismatch: {f.shape} vs {g.shape}")
    diff = f - g
    return float(math.sqrt(np.dot(diff, diff)))


def _row_distances(rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = rows.astype(np.float64) - q
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


class BallTree:
    def __init__(self, data: np.ndarray, leaf_size: int, idx: np.ndarray, start: np.ndarray, end: np.ndarray,
                 left: np.ndarray, right: np.ndarray, radius: np.ndarray, centroid: np.ndarray,
                 fmx_checksum: int = 0, ids: tuple[str, ...] | None = None):
        self.data = data
        self.leaf_size = leaf_size
        self.idx = idx
        self.start, self.end, self.left, self.right = start, end, left, right
        self.radius = radius
        self.centroid = centroid
        self.fmx_checksum = fmx_checksum
        self.ids = ids

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def node_count(self) -> int:
        return len(self.start)

    def is_leaf(self, node: int) -> bool:
        return self.left[node] < 0

    def node_rows(self, node: int) -> np.ndarray:
        return self.idx[self.start[node]:self.end[node]]

    def knn(self, query, k: int) -> RankingResult:
        return knn(self, query, k)


def build(matrix: FeatureMatrix | np.ndarray, leaf_size: int = DEFAULT_LEAF_SIZE) -> BallTree:
    """Build a ball tree over the rows of ``matrix``; deterministic for fixed input."""
    if isinstance(matrix, FeatureMatrix):
        data, checksum, ids = matrix.data, matrix.checksum(), matrix.ids
    else:
        data, checksum, ids = np.asarray(matrix), 0, None
    if data.ndim != 2 or data.shape[0] < 1:
        raise RankingError("cannot build a tree over an empty matrix")
    if leaf_size < 1:
        raise RankingError("leaf_size must be >= 1")
    data64 = data.astype(np.float64)
    n = data.shape[0]
    idx = np.arange(n, dtype=np.int64)
    start, end, left, right, radius, centroid = [], [], [], [], [], []

    def make(lo: int, hi: int) -> int:
        node = len(start)
        rows = idx[lo:hi]
        pts = data64[rows]
        c = pts.mean(axis=0)
        start.append(lo)
        end.append(hi)
        left.append(-1)
        right.append(-1)
        centroid.append(c)
        radius.append(float(_row_distances(pts, c).max()))
        count = hi - lo
        if count > leaf_size:
            spread = pts.max(axis=0) - pts.min(axis=0)
            dim = int(np.argmax(spread))
            order = np.argsort(pts[:, dim], kind="stable")
            idx[lo:hi] = rows[order]
            mid = lo + (count + 1) // 2
            left[node] = make(lo, mid)
            right[node] = make(mid, hi)
        return node

    make(0, n)
    return BallTree(data, leaf_size, idx, np.array(start, dtype=np.int64), np.array(end, dtype=np.int64),
                    np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                    np.array(radius, dtype=np.float64), np.array(centroid, dtype=np.float64).reshape(-1, data.shape[1]),
                    checksum, ids)


def knn(tree: BallTree, query, k: int) -> RankingResult:
    """The ``min(k, n)`` nearest rows to ``query``, ordered by (distance, row)."""
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != tree.dim:
        raise RankingError(f"query has dimension {q.shape[0]}, index has {tree.dim}")
    if k < 1:
        raise RankingError("k must be >= 1")
    k = min(k, tree.n)
    heap: list[tuple[float, int]] = []  # max-heap of (-distance, -row)
    evaluations = 0

    def worst() -> float:
        return -heap[0][0] if len(heap) == k else math.inf

    def visit(node: int, centroid_dist: float) -> None:
        nonlocal evaluations
        lower = max(0.0, centroid_dist - tree.radius[node])
        if lower * (1.0 - _PRUNE_SLACK) > worst():
            return
        if tree.is_leaf(node):
            rows = tree.node_rows(node)
            dists = _row_distances(tree.data[rows], q)
            evaluations += len(rows)
            for d, r in zip(dists.tolist(), rows.tolist()):
                item = (-d, -r)
                if len(heap) < k:
                    heapq.heappush(heap, item)
                elif item > heap[0]:
                    heapq.heapreplace(heap, item)
            return
        a, b = int(tree.left[node]), int(tree.right[node])
        da = float(np.linalg.norm(tree.centroid[a] - q))
        db = float(np.linalg.norm(tree.centroid[b] - q))
        if db < da:
            a, b, da, db = b, a, db, da
        visit(a, da)
        visit(b, db)

    visit(0, float(np.linalg.norm(tree.centroid[0] - q)))
    found = sorted((-nd, -nr) for nd, nr in heap)
    ids = tree.ids
    entries = tuple(RankedItem(ids[r] if ids is not None else str(r), r, d, rank)
                    for rank, (d, r) in enumerate(found, 1))
    return RankingResult(entries, evaluations)


def brute_force(data: np.ndarray, query, k: int, ids=None) -> RankingResult:
    """Linear scan with the same distance arithmetic and tie rule as ``knn``."""
    q = np.asarray(query, dtype=np.float64).ravel()
    dists = _row_distances(np.asarray(data), q)
    order = np.lexsort((np.arange(len(dists)), dists))[:min(k, len(dists))]
    return RankingResult(tuple(RankedItem(ids[r] if ids is not None else str(r), int(r), float(dists[r]), rank)
                               for rank, r in enumerate(order, 1)), len(dists))


def recommend(tree: BallTree, matrix: FeatureMatrix, query_features, k: int, exclude_self: bool = False,
              query_id: str | None = None) -> RankingResult:
    """Top-``k`` catalog items for ``query_features``.

    With ``exclude_self`` a rank-1 hit closer than 1e-9 is treated as the query
    itself and dropped (if ``query_id`` is given, only when the ids match),
    and the list is extended by one so ``k`` items remain.
    """
    if tree.n != len(matrix) or (tree.fmx_checksum and tree.fmx_checksum != matrix.checksum()):
        raise RankingError("ball tree was not built from this feature matrix")
    result = knn(tree, query_features, k + 1 if exclude_self else k)
    entries = list(result.entries)
    if exclude_self and entries:
        first = entries[0]
        if first.distance < SELF_MATCH_DISTANCE and (query_id is None or matrix.ids[first.row] == query_id):
            entries = entries[1:]
    entries = entries[:k]
    return RankingResult(tuple(RankedItem(matrix.ids[e.row], e.row, e.distance, rank)
                               for rank, e in enumerate(entries, 1)), result.distance_evaluations)


# --------------------------------------------------------------------------
# tree audit
# --------------------------------------------------------------------------


def audit(tree: BallTree) -> list[str]:
    """Check the structural invariants; returns a list of violations (empty when valid)."""
    problems = []
    seen = np.zeros(tree.n, dtype=np.int64)
    data64 = tree.data.astype(np.float64)
    for node in range(tree.node_count):
        rows = tree.node_rows(node)
        if len(rows) == 0:
            problems.append(f"node {node} is empty")
            continue
        d = _row_distances(data64[rows], tree.centroid[node])
        if np.any(d > tree.radius[node] * (1 + 1e-12) + 1e-12):
            problems.append(f"node {node}: point outside ball")
        if tree.is_leaf(node):
            if len(rows) > tree.leaf_size:
                problems.append(f"leaf {node} holds {len(rows)} > {tree.leaf_size} points")
            seen[rows] += 1
        else:
            a, b = tree.left[node], tree.right[node]
            if tree.start[a] != tree.start[node] or tree.end[a] != tree.start[b] or tree.end[b] != tree.end[node]:
                problems.append(f"node {node}: children do not partition its range")
    if not np.all(seen == 1):
        problems.append("leaves do not cover every row exactly once")
    return problems


# --------------------------------------------------------------------------
# .btx serialization
# --------------------------------------------------------------------------

_BTX_HEADER = struct.Struct("<4sIIQIIQ")


def to_bytes(tree: BallTree) -> bytes:
    m = tree.node_count
    header = _BTX_HEADER.pack(MAGIC, VERSION, tree.leaf_size, tree.n, tree.dim, m, tree.fmx_checksum)
    parts = [header]
    for arr in (tree.start, tree.end, tree.left, tree.right):
        parts.append(np.ascontiguousarray(arr, dtype="<i8").tobytes())
    parts.append(np.ascontiguousarray(tree.radius, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(tree.centroid, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(tree.idx, dtype="<i8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", crc64(body))


def from_bytes(data: bytes, matrix: FeatureMatrix) -> BallTree:
    if len(data) < _BTX_HEADER.size + 8:
        raise FormatError("truncated .btx file")
    if data[:4] != MAGIC:
        raise FormatError(f"not a .btx file (magic {data[:4]!r})")
    if crc64(data[:-8]) != struct.unpack_from("<Q", data, len(data) - 8)[0]:
        raise ChecksumError(".btx checksum mismatch")
    _, version, leaf_size, n, dim, m, fmx_checksum = _BTX_HEADER.unpack_from(data)
    if version != VERSION:
        raise FormatError(f"unsupported .btx version {version}")
    expected = _BTX_HEADER.size + 8 * (5 * m + m * dim + n) + 8
    if len(data) != expected:
        raise FormatError("truncated .btx file")
    if fmx_checksum != matrix.checksum():
        raise ChecksumError("index was built from a different feature matrix (.fmx checksum mismatch)")
    if n != len(matrix) or dim != matrix.width:
        raise FormatError("index shape does not match the feature matrix")
    off = _BTX_HEADER.size

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).copy()
        off += 8 * count
        return arr

    start, end, left, right = (take("<i8", m).astype(np.int64) for _ in range(4))
    radius = take("<f8", m).astype(np.float64)
    centroid = take("<f8", m * dim).astype(np.float64).reshape(m, dim)
    idx = take("<i8", n).astype(np.int64)
    return BallTree(matrix.data, leaf_size, idx, start, end, left, right, radius, centroid, fmx_checksum, matrix.ids)


def save_tree(tree: BallTree, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(tree))


def load_tree(path: str | Path, matrix: FeatureMatrix) -> BallTree:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from exc
    return from_bytes(data, matrix)
