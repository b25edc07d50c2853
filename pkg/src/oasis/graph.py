"""Directed marketplace graphs and per-arm edge-weight treatments.

Edges are stored as flat arrays sorted by ``(src, dst)``.  Two CSR-style
index arrays give O(degree) access to a node's outgoing edges (``Ch``) and
incoming edges (``Pa``).
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .errors import ParameterError
from .rng import make_rng

__all__ = [
    "MarketplaceGraph",
    "TreatmentSet",
    "Violation",
    "generate_clustered_graph",
    "validate",
    "SIMPLEX_TOL",
]

SIMPLEX_TOL = 1e-9


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MarketplaceGraph:
    """Immutable directed graph with per-edge ``p_base`` and ``alpha``.

    Use :meth:`from_edges` to build one; it sorts the edge list and rejects
    self-loops and duplicate pairs.  Unset attributes are NaN.
    """

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    p_base: np.ndarray
    alpha: np.ndarray
    cluster_of: np.ndarray
    out_ptr: np.ndarray = field(repr=False)
    in_ptr: np.ndarray = field(repr=False)
    in_edges: np.ndarray = field(repr=False)

    @classmethod
    def from_edges(cls, n_nodes, src, dst, p_base=None, alpha=None, cluster_of=None):
        n_nodes = int(n_nodes)
        src = np.asarray(src, dtype=np.int64).ravel()
        dst = np.asarray(dst, dtype=np.int64).ravel()
        if src.shape != dst.shape:
            raise ParameterError("src and dst must have the same length")
        if src.size and (src.min() < 0 or dst.min() < 0 or max(src.max(), dst.max()) >= n_nodes):
            raise ParameterError(f"node ids must lie in [0, {n_nodes})")
        if np.any(src == dst):
            k = int(np.flatnonzero(src == dst)[0])
            raise ParameterError(f"self-loop at node {src[k]}")
        m = src.size
        p_base = np.full(m, np.nan) if p_base is None else np.asarray(p_base, dtype=float).ravel()
        alpha = np.full(m, np.nan) if alpha is None else np.asarray(alpha, dtype=float).ravel()
        if p_base.size != m or alpha.size != m:
            raise ParameterError("attribute arrays must match the edge count")
        order = np.lexsort((dst, src))
        src, dst, p_base, alpha = src[order], dst[order], p_base[order], alpha[order]
        dup = (src[1:] == src[:-1]) & (dst[1:] == dst[:-1])
        if np.any(dup):
            k = int(np.flatnonzero(dup)[0])
            raise ParameterError(f"duplicate edge ({src[k]}, {dst[k]})")
        if cluster_of is None:
            cluster_of = np.zeros(n_nodes, dtype=np.int64)
        cluster_of = np.asarray(cluster_of, dtype=np.int64).ravel()
        if cluster_of.size != n_nodes:
            raise ParameterError("cluster_of must have one label per node")

        out_ptr = np.zeros(n_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n_nodes), out=out_ptr[1:])
        in_edges = np.lexsort((src, dst))
        in_ptr = np.zeros(n_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(dst, minlength=n_nodes), out=in_ptr[1:])
        return cls(
            n_nodes=n_nodes,
            src=_frozen(src, np.int64),
            dst=_frozen(dst, np.int64),
            p_base=_frozen(p_base, float),
            alpha=_frozen(alpha, float),
            cluster_of=_frozen(cluster_of, np.int64),
            out_ptr=_frozen(out_ptr, np.int64),
            in_ptr=_frozen(in_ptr, np.int64),
            in_edges=_frozen(in_edges, np.int64),
        )

    @property
    def n_edges(self):
        return int(self.src.size)

    def children(self, i):
        """Edge indices of ``i -> *``, ordered by destination."""
        return np.arange(self.out_ptr[i], self.out_ptr[i + 1])

    def parents(self, j):
        """Edge indices of ``* -> j``, ordered by source."""
        return self.in_edges[self.in_ptr[j]:self.in_ptr[j + 1]]

    @property
    def out_degree(self):
        return np.diff(self.out_ptr)

    @property
    def in_degree(self):
        return np.diff(self.in_ptr)

    def edge_index(self, src, dst):
        """Vectorised lookup of edge ids; -1 where the edge does not exist."""
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        keys = self.src * self.n_nodes + self.dst
        want = src * self.n_nodes + dst
        pos = np.searchsorted(keys, want)
        pos_c = np.minimum(pos, max(keys.size - 1, 0))
        hit = (pos < keys.size) & (keys[pos_c] == want) if keys.size else np.zeros(want.shape, bool)
        return np.where(hit, pos_c, -1)

    def consumer_sums(self, weights):
        """Per-node sum of incoming ``weights`` (one value per edge)."""
        return np.bincount(self.dst, weights=weights, minlength=self.n_nodes)

    def with_attributes(self, p_base=None, alpha=None):
        """Copy with replaced per-edge attributes (arrays in edge order)."""
        p = self.p_base if p_base is None else _frozen(p_base, float)
        a = self.alpha if alpha is None else _frozen(alpha, float)
        if p.size != self.n_edges or a.size != self.n_edges:
            raise ParameterError("attribute arrays must match the edge count")
        return MarketplaceGraph(
            self.n_nodes, self.src, self.dst, p, a, self.cluster_of,
            self.out_ptr, self.in_ptr, self.in_edges,
        )

    def is_symmetric(self):
        rev = self.edge_index(self.dst, self.src)
        return bool(np.all(rev >= 0))


@dataclass(frozen=True, eq=False)
class TreatmentSet:
    """Edge weights for arms ``0..m``; row 0 is the control (baseline)."""

    weights: np.ndarray  # shape (n_arms, n_edges)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float, ndmin=2)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n_arms(self):
        return int(self.weights.shape[0])

    def arm(self, r):
        return self.weights[r]

    @classmethod
    def from_graph(cls, graph, *arms):
        """Control arm from ``graph.p_base`` followed by the given arms."""
        return cls(np.vstack([graph.p_base, *arms]))


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    node: int = -1
    edge: tuple = ()
    arm: int = -1
    magnitude: float = 0.0


def _simplex_violations(graph, weights, arm, label):
    out = []
    has_parents = graph.in_degree > 0
    sums = graph.consumer_sums(np.nan_to_num(weights, nan=np.inf))
    deficit = 1.0 - sums
    bad = has_parents & ~(np.abs(deficit) <= SIMPLEX_TOL)
    for j in np.flatnonzero(bad):
        out.append(Violation(
            "SimplexViolation",
            f"{label}: incoming weights of node {j} sum to {sums[j]!r} (deficit {deficit[j]:.3g})",
            node=int(j), arm=arm, magnitude=float(deficit[j]),
        ))
    outside = np.flatnonzero(~((weights >= 0) & (weights <= 1)))
    for e in outside:
        out.append(Violation(
            "RangeViolation",
            f"{label}: weight {weights[e]!r} on edge ({graph.src[e]}, {graph.dst[e]}) outside [0, 1]",
            edge=(int(graph.src[e]), int(graph.dst[e])), arm=arm, magnitude=float(weights[e]),
        ))
    return out


def validate(graph, treatments=None):
    """Check structural and simplex invariants; returns a list of violations."""
    report = []
    loops = np.flatnonzero(graph.src == graph.dst)
    for e in loops:
        report.append(Violation("SelfLoop", f"self-loop at node {graph.src[e]}",
                                node=int(graph.src[e]), edge=(int(graph.src[e]),) * 2))
    dup = np.flatnonzero((graph.src[1:] == graph.src[:-1]) & (graph.dst[1:] == graph.dst[:-1]))
    for k in dup:
        pair = (int(graph.src[k]), int(graph.dst[k]))
        report.append(Violation("DuplicateEdge", f"duplicate edge {pair}", edge=pair))
    if not np.all(np.isnan(graph.alpha)):
        for e in np.flatnonzero(~(graph.alpha > 0)):
            pair = (int(graph.src[e]), int(graph.dst[e]))
            report.append(Violation("NonPositiveAlpha", f"alpha {graph.alpha[e]!r} on edge {pair}",
                                    edge=pair, magnitude=float(graph.alpha[e])))
    if not np.all(np.isnan(graph.p_base)):
        report.extend(_simplex_violations(graph, graph.p_base, -1, "p_base"))
    if treatments is not None:
        w = treatments.weights
        if w.shape[1] != graph.n_edges:
            report.append(Violation("ShapeMismatch",
                                    f"treatments cover {w.shape[1]} edges, graph has {graph.n_edges}"))
            return report
        for r in range(treatments.n_arms):
            report.extend(_simplex_violations(graph, w[r], r, f"arm {r}"))
        diff = np.abs(w[0] - graph.p_base)
        for e in np.flatnonzero(~(diff <= SIMPLEX_TOL)):
            pair = (int(graph.src[e]), int(graph.dst[e]))
            report.append(Violation("ControlMismatch",
                                    f"arm 0 differs from p_base on edge {pair}",
                                    edge=pair, arm=0, magnitude=float(diff[e])))
    return report


# -- generation ---------------------------------------------------------------

def _barabasi_albert(n, m, power, rng):
    """Undirected preferential-attachment edges on nodes ``0..n-1``.

    The first ``m + 1`` nodes form a clique; each later node attaches ``m``
    distinct stubs with probability proportional to ``(degree + 1) ** power``.
    """
    m = min(m, n - 1)
    deg = np.zeros(n)
    edges = []
    seed_n = m + 1
    for a in range(seed_n):
        for b in range(a + 1, seed_n):
            edges.append((a, b))
    deg[:seed_n] = seed_n - 1
    for t in range(seed_n, n):
        w = (deg[:t] + 1.0) ** power
        targets = rng.choice(t, size=m, replace=False, p=w / w.sum())
        for s in np.sort(targets):
            edges.append((int(s), t))
        deg[targets] += 1
        deg[t] = m
    return np.asarray(edges, dtype=np.int64).reshape(-1, 2)


def _erdos_renyi(n, p, rng):
    """G(n, p) as an array of undirected pairs ``(i < j)``."""
    n_pairs = n * (n - 1) // 2
    if p <= 0 or n < 2:
        return np.empty((0, 2), dtype=np.int64)
    target = int(rng.binomial(n_pairs, min(p, 1.0)))
    keys = np.empty(0, dtype=np.int64)
    while keys.size < target:
        need = target - keys.size
        a = rng.integers(0, n, size=need + need // 8 + 16)
        b = rng.integers(0, n, size=a.size)
        ok = a != b
        lo, hi = np.minimum(a[ok], b[ok]), np.maximum(a[ok], b[ok])
        fresh = np.setdiff1d(np.unique(lo * n + hi), keys)
        # take a random subset of the fresh pairs so the draw stays uniform
        if fresh.size > need:
            fresh = rng.choice(fresh, size=need, replace=False)
        keys = np.union1d(keys, fresh)
    return np.column_stack([keys // n, keys % n])


def generate_clustered_graph(n_clusters, cluster_size, d_ba, ba_power, d_er, seed):
    """Union of per-cluster BA graphs and one ER overlay, made bidirectional.

    Each cluster is an independent preferential-attachment graph with
    ``ceil(d_ba / 2)`` stubs per new node; the overlay is G(n, d_er / (n-1)) on
    all nodes.  Every undirected edge becomes two directed edges.  ``p_base``
    and ``alpha`` are left unset.
    """
    if int(n_clusters) < 1 or int(cluster_size) < 2:
        raise ParameterError("need n_clusters >= 1 and cluster_size >= 2")
    if not d_ba >= 1 or not d_er >= 0 or not ba_power >= 0:
        raise ParameterError("need d_ba >= 1, d_er >= 0, ba_power >= 0")
    n_clusters, cluster_size = int(n_clusters), int(cluster_size)
    n = n_clusters * cluster_size
    stubs = int(math.ceil(d_ba / 2))
    parts = []
    for c in range(n_clusters):
        e = _barabasi_albert(cluster_size, stubs, ba_power, make_rng(seed, "ba", c))
        parts.append(e + c * cluster_size)
    parts.append(_erdos_renyi(n, d_er / (n - 1), make_rng(seed, "er")) if n > 1 else np.empty((0, 2), np.int64))
    und = np.vstack(parts)
    und = np.sort(und, axis=1)
    keys = np.unique(und[:, 0] * n + und[:, 1])
    a, b = keys // n, keys % n
    cluster_of = np.repeat(np.arange(n_clusters), cluster_size)
    return MarketplaceGraph.from_edges(
        n, np.concatenate([a, b]), np.concatenate([b, a]), cluster_of=cluster_of
    )
