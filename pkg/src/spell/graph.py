"""Spatio-temporal graphs over face boxes.

Nodes are face boxes ordered by ``(time, entity_id)``. Edges are stored as an
``(E, 2)`` int array of ``(src, dst)`` pairs sorted by ``(dst, src)``; a node
aggregates messages from its in-neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import ValidationError

VARIANTS = ("forward", "undirected", "backward")

# "same frame" tolerance, also applied to the threshold test
TIME_EPS = 1e-6


@dataclass(frozen=True)
class FaceBox:
    video_id: str
    time: float
    entity_id: str
    box: tuple[float, float, float, float]
    label: int | None = None
    feature_index: int = -1

    @property
    def key(self) -> tuple[str, float, str]:
        return (self.video_id, self.time, self.entity_id)


@dataclass
class EdgeSet:
    edges: np.ndarray
    variant: str
    num_nodes: int

    def __len__(self):
        return len(self.edges)

    @property
    def src(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def dst(self) -> np.ndarray:
        return self.edges[:, 1]

    def pairs(self) -> set[tuple[int, int]]:
        return set(map(tuple, self.edges.tolist()))


@dataclass
class Chunk:
    nodes: list[FaceBox]
    edge_sets: dict[str, EdgeSet] = field(default_factory=dict)

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def times(self) -> np.ndarray:
        return np.array([b.time for b in self.nodes], dtype=np.float64)

    @property
    def feature_rows(self) -> np.ndarray:
        return np.array([b.feature_index for b in self.nodes], dtype=np.int64)

    def entity_codes(self) -> np.ndarray:
        codes: dict[str, int] = {}
        return np.array([codes.setdefault(b.entity_id, len(codes)) for b in self.nodes],
                        dtype=np.int64)


def sort_edges(edges: np.ndarray) -> np.ndarray:
    """Unique ``(src, dst)`` rows sorted by ``(dst, src)``."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) == 0:
        return edges
    n = int(edges.max()) + 1
    key = np.unique(edges[:, 1] * n + edges[:, 0])
    return np.stack([key % n, key // n], axis=1)


def order_and_chunk(boxes: list[FaceBox], n: int) -> list[Chunk]:
    """Sort one video's boxes by ``(time, entity_id)`` and split into runs of ``n``."""
    if n < 1:
        raise ValidationError(f"chunk size must be >= 1, got {n}")
    if not boxes:
        return []
    videos = {b.video_id for b in boxes}
    if len(videos) > 1:
        raise ValidationError(f"order_and_chunk got boxes from {len(videos)} videos: "
                              f"{sorted(videos)[:3]}")
    ordered = sorted(boxes, key=lambda b: (b.time, b.entity_id))
    return [Chunk(ordered[i:i + n]) for i in range(0, len(ordered), n)]


def connects(dt: np.ndarray, same_id: np.ndarray, tau: float, variant: str) -> np.ndarray:
    """Edge predicate for ``dt = Time(src) - Time(dst)``.

    Same-frame pairs connect regardless of identity and, in the directed
    variants, in both directions.
    """
    same_frame = np.abs(dt) <= TIME_EPS
    linked = same_id | same_frame
    if variant == "undirected":
        return (same_id & (np.abs(dt) <= tau + TIME_EPS)) | same_frame
    if variant == "forward":
        return linked & (dt <= TIME_EPS) & (dt >= -tau - TIME_EPS)
    if variant == "backward":
        return linked & (dt >= -TIME_EPS) & (dt <= tau + TIME_EPS)
    raise ValidationError(f"unknown edge variant {variant!r}")


def _candidate_pairs(times: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    # every pair whose time gap is within tau (+eps); times must be sorted
    reach = tau + TIME_EPS
    lo = np.searchsorted(times, times - reach, side="left")
    hi = np.searchsorted(times, times + reach, side="right")
    counts = hi - lo
    dst = np.repeat(np.arange(len(times)), counts)
    offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    src = np.repeat(lo, counts) + offsets
    return src, dst


def build_edges(chunk: Chunk, tau: float, variant: str) -> EdgeSet:
    if tau < 0:
        raise ValidationError(f"time threshold must be >= 0, got {tau}")
    if variant not in VARIANTS:
        raise ValidationError(f"unknown edge variant {variant!r}")
    times = chunk.times
    n = len(times)
    if n and np.any(np.diff(times) < 0):
        raise ValidationError("chunk nodes are not in temporal order")
    ids = chunk.entity_codes()
    src, dst = _candidate_pairs(times, tau)
    keep = connects(times[src] - times[dst], ids[src] == ids[dst], tau, variant)
    # self-loops always satisfy the predicate
    edges = np.stack([src[keep], dst[keep]], axis=1)
    return EdgeSet(sort_edges(edges), variant, n)


def build_chunk_graphs(chunk: Chunk, tau: float) -> Chunk:
    for variant in VARIANTS:
        chunk.edge_sets[variant] = build_edges(chunk, tau, variant)
    return chunk


def edge_dropout(edge_set: EdgeSet, p: float, rng_seed) -> EdgeSet:
    """Drop each non-self-loop edge independently with probability ``p``."""
    if not 0 <= p < 1:
        raise ValidationError(f"edge dropout probability must be in [0, 1), got {p}")
    if p == 0:
        return edge_set
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    e = edge_set.edges
    keep = (e[:, 0] == e[:, 1]) | (rng.random(len(e)) >= p)
    return EdgeSet(e[keep], edge_set.variant, edge_set.num_nodes)


def union_edge_sets(edge_sets: list[EdgeSet]) -> EdgeSet:
    """Disjoint union: node indices of later sets are offset by earlier node counts."""
    parts, offset = [], 0
    for es in edge_sets:
        parts.append(es.edges + offset)
        offset += es.num_nodes
    edges = np.concatenate(parts) if parts else np.zeros((0, 2), dtype=np.int64)
    variant = edge_sets[0].variant if edge_sets else "undirected"
    # per-set (dst, src) order plus increasing offsets keeps the union sorted
    return EdgeSet(edges, variant, offset)
