"""Static freeway graph and the relational spatiotemporal graph built over a history window."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property

import numpy as np


class Relation(IntEnum):
    SPATIAL_LATERAL = 0
    SPATIAL_LONGITUDINAL = 1
    TEMPORAL_SELF = 2
    TEMPORAL_LATERAL = 3
    TEMPORAL_LONGITUDINAL = 4


@dataclass(frozen=True, eq=False)
class GraphTopology:
    """Undirected multi-relation graph over ``(k + 1)`` stacked copies of a freeway.

    Node ``slice * n_base + mm_index * n_lanes + (lane - 1)``; slice ``k`` is the
    current time and slice 0 the oldest. Edges are stored once with ``u < v``.
    """

    n_milemarkers: int
    n_lanes: int
    k: int
    edges: np.ndarray  # [E, 3] int64 rows of (u, v, relation)
    n_relations: int = len(Relation)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_base(self) -> int:
        return self.n_milemarkers * self.n_lanes

    @property
    def n_slices(self) -> int:
        return self.k + 1

    @property
    def n_nodes(self) -> int:
        return self.n_base * self.n_slices

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def slice_of(self, node: int) -> int:
        return node // self.n_base

    def base_of(self, node: int) -> tuple[int, int]:
        b = node % self.n_base
        return b // self.n_lanes, b % self.n_lanes + 1

    @cached_property
    def current_slice(self) -> np.ndarray:
        """Node indices of the newest time slice."""
        return np.arange(self.k * self.n_base, self.n_nodes)

    def relation_counts(self) -> dict[Relation, int]:
        return {r: int((self.edges[:, 2] == r).sum()) for r in Relation}

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges[:, :2].ravel(), minlength=self.n_nodes)

    def messages(self, self_loops: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Directed ``(src, dst, relation)`` arrays, two per undirected edge, sorted by ``dst``.

        Self loops, when requested, carry relation ``-1``.
        """
        key = ("messages", self_loops)
        if key not in self._cache:
            u, v, r = self.edges.T if len(self.edges) else (np.empty(0, np.int64),) * 3
            src = np.concatenate([u, v])
            dst = np.concatenate([v, u])
            rel = np.concatenate([r, r])
            if self_loops:
                nodes = np.arange(self.n_nodes)
                src = np.concatenate([src, nodes])
                dst = np.concatenate([dst, nodes])
                rel = np.concatenate([rel, np.full(self.n_nodes, -1)])
            order = np.lexsort((src, dst))
            self._cache[key] = tuple(a[order].astype(np.int64) for a in (src, dst, rel))
        return self._cache[key]

    def adjacency(self) -> np.ndarray:
        """Dense 0/1 adjacency, for checks on small graphs."""
        a = np.zeros((self.n_nodes, self.n_nodes))
        a[self.edges[:, 0], self.edges[:, 1]] = 1
        a[self.edges[:, 1], self.edges[:, 0]] = 1
        return a

    def permuted(self, perm: np.ndarray) -> "GraphTopology":
        """Relabel node ``i`` as ``perm[i]``; used for equivariance checks."""
        u, v = perm[self.edges[:, 0]], perm[self.edges[:, 1]]
        e = np.stack([np.minimum(u, v), np.maximum(u, v), self.edges[:, 2]], axis=1)
        return GraphTopology(self.n_milemarkers, self.n_lanes, self.k, e, self.n_relations)

    def export(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"nodes={self.n_nodes} relations={self.n_relations}\n")
            for u, v, r in self.edges:
                fh.write(f"{u},{v},{r}\n")


def _node(mm: int, lane: int, n_lanes: int, offset: int = 0) -> int:
    return offset + mm * n_lanes + lane


def _spatial_pairs(n_mm: int, n_lanes: int):
    for m in range(n_mm):
        for lane in range(n_lanes - 1):
            yield m, lane, m, lane + 1, Relation.SPATIAL_LATERAL
    for m in range(n_mm - 1):
        for a in range(n_lanes):
            for b in range(n_lanes):
                yield m, a, m + 1, b, Relation.SPATIAL_LONGITUDINAL


def _edge_array(rows) -> np.ndarray:
    if not rows:
        return np.empty((0, 3), dtype=np.int64)
    e = np.array(rows, dtype=np.int64)
    lo, hi = np.minimum(e[:, 0], e[:, 1]), np.maximum(e[:, 0], e[:, 1])
    e = np.stack([lo, hi, e[:, 2]], axis=1)
    return e[np.lexsort((e[:, 2], e[:, 1], e[:, 0]))]


def build_static_topology(n_milemarkers: int, n_lanes: int) -> GraphTopology:
    """Lane-adjacent edges at one milemarker, all lane pairs between consecutive milemarkers."""
    if n_milemarkers < 1 or n_lanes < 1:
        raise ValueError("need at least one milemarker and one lane")
    rows = [
        (_node(m1, l1, n_lanes), _node(m2, l2, n_lanes), rel)
        for m1, l1, m2, l2, rel in _spatial_pairs(n_milemarkers, n_lanes)
    ]
    return GraphTopology(n_milemarkers, n_lanes, 0, _edge_array(rows))


def build_st_topology(base: GraphTopology, k: int) -> GraphTopology:
    """Stack ``k`` previous slices under the current one and join consecutive slices.

    Temporal edges link slice ``s`` to ``s + 1`` only: same node (self), lane
    neighbor at the same milemarker (lateral) and any lane at an adjacent
    milemarker (longitudinal), in both orientations.
    """
    if base.k != 0:
        raise ValueError("base topology must be static")
    if k < 0:
        raise ValueError("k must be non-negative")
    M, L, n = base.n_milemarkers, base.n_lanes, base.n_base
    rows = []
    for s in range(k + 1):
        off = s * n
        rows.extend((u + off, v + off, rel) for u, v, rel in base.edges)
    for s in range(k):
        old, new = s * n, (s + 1) * n
        for b in range(n):
            rows.append((b + old, b + new, Relation.TEMPORAL_SELF))
        for m1, l1, m2, l2, rel in _spatial_pairs(M, L):
            a, b = _node(m1, l1, L), _node(m2, l2, L)
            trel = Relation.TEMPORAL_LATERAL if rel == Relation.SPATIAL_LATERAL else Relation.TEMPORAL_LONGITUDINAL
            rows.append((a + old, b + new, trel))
            rows.append((b + old, a + new, trel))
    return GraphTopology(M, L, k, _edge_array(rows), base.n_relations)


def load_topology_export(path) -> tuple[int, int, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        head = dict(tok.split("=") for tok in fh.readline().split())
        edges = np.loadtxt(fh, delimiter=",", dtype=np.int64, ndmin=2)
    return int(head["nodes"]), int(head["relations"]), edges.reshape(-1, 3)
