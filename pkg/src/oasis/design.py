"""Assemble the allocation design and convert it to score boost factors."""

from dataclasses import dataclass

import numpy as np

from .allocation import allocation_data, make_block_plan, solve_allocation
from .errors import DegenerateScoreError, DesignError, DivisionByZeroError
from .partition import ROLE_CPRIME, ROLE_LAMBDA, ROLE_OMEGA, compute_sum_bounds
from .qp import QpConfig

__all__ = [
    "DesignOutput",
    "BoostTable",
    "assemble_design",
    "compute_boost_factors",
    "PROVENANCE",
]

PROV_BASE, PROV_EXACT, PROV_OPTIMIZED, PROV_RENORMALIZED = 0, 1, 2, 3
PROVENANCE = ("base", "consumer-exact", "optimized", "renormalized")


@dataclass(frozen=True, eq=False)
class DesignOutput:
    p_star: np.ndarray
    provenance: np.ndarray   # codes into PROVENANCE
    partition: object
    bounds: object
    objective_trace: list
    block_trace: list
    rejected_blocks: int = 0

    def provenance_labels(self):
        return np.asarray(PROVENANCE, dtype=object)[self.provenance]


def assemble_design(graph, treatments, partition, risk, qp_config=None, alpha_override=None,
                    plan=None):
    """Build ``p*`` for every edge: exact arms, optimised exposure edges, renormalised rest."""
    cfg = qp_config or QpConfig()
    bounds = compute_sum_bounds(graph, partition, risk)
    p = graph.p_base.copy()
    prov = np.zeros(graph.n_edges, dtype=np.int8)

    dst_role = partition.role[graph.dst]
    exact = (dst_role == ROLE_OMEGA) | (dst_role == ROLE_LAMBDA)
    e_exact = np.flatnonzero(exact)
    p[e_exact] = treatments.weights[partition.arm[graph.dst[e_exact]], e_exact]
    prov[e_exact] = PROV_EXACT

    trace, block_trace, rejected = [], [], 0
    if bounds.consumers.size:
        data = allocation_data(graph, treatments, partition, bounds, alpha_override)
        if plan is None:
            plan = make_block_plan(bounds.consumers, cfg.k_blocks, cfg.max_outer)
        res = solve_allocation(graph, treatments, partition, bounds, plan, cfg,
                               alpha_override, data=data)
        p[res.var_edges] = res.x
        prov[res.var_edges] = PROV_OPTIMIZED
        trace, block_trace, rejected = res.trace, res.block_trace, res.rejected

        in_c = np.zeros(graph.n_nodes, dtype=bool)
        in_c[bounds.consumers] = True
        rest = in_c[graph.dst] & ~partition.in_omega_prime[graph.src]
        e_rest = np.flatnonzero(rest)
        opt_mass = np.bincount(graph.dst[res.var_edges], weights=res.x, minlength=graph.n_nodes)
        base_mass = np.zeros(graph.n_nodes)
        base_mass[bounds.consumers] = bounds.base_mass
        degenerate = np.zeros(graph.n_nodes, dtype=bool)
        degenerate[bounds.consumers] = bounds.degenerate
        j = graph.dst[e_rest]
        with np.errstate(divide="ignore", invalid="ignore"):
            factor = np.where(degenerate[j], 0.0, (1.0 - opt_mass[j]) / (1.0 - base_mass[j]))
        p[e_rest] = graph.p_base[e_rest] * factor
        prov[e_rest] = PROV_RENORMALIZED
        if np.any(~np.isfinite(p)) or np.any(p < -1e-12):
            raise DesignError("renormalisation produced invalid weights")
    return DesignOutput(p, prov, partition, bounds, trace, block_trace, rejected)


@dataclass(frozen=True, eq=False)
class BoostTable:
    edges: np.ndarray   # edge ids into exposure-set consumers
    b: np.ndarray

    def apply(self, graph, scores):
        """Boosted scores renormalised per consumer, on ``self.edges``."""
        boosted = scores[self.edges] * self.b
        tot = np.bincount(graph.dst[self.edges], weights=boosted, minlength=graph.n_nodes)
        return boosted / tot[graph.dst[self.edges]]


def compute_boost_factors(graph, design, baseline_scores):
    """Multiplicative factors on baseline scores that reproduce ``p*`` on exposure consumers.

    The control weights are taken as the per-consumer normalised
    ``baseline_scores``.  For consumers without parents outside the measurement
    set the outside-mass ratio cancels and ``b = p* / p0`` is used.
    """
    scores = np.asarray(baseline_scores, dtype=float)
    if scores.shape != (graph.n_edges,):
        raise ValueError("need one baseline score per edge")
    consumers = design.bounds.consumers
    in_c = np.zeros(graph.n_nodes, dtype=bool)
    in_c[consumers] = True
    edges = np.flatnonzero(in_c[graph.dst])
    if np.any(~(scores[edges] >= 0)):
        raise DegenerateScoreError("baseline scores must be non-negative on exposure-set edges")
    j = graph.dst[edges]
    tot = np.bincount(j, weights=scores[edges], minlength=graph.n_nodes)
    p0 = scores[edges] / tot[j]
    from_op = design.partition.in_omega_prime[graph.src[edges]]
    pstar = design.p_star[edges]

    zero = from_op & (p0 <= 0)
    if np.any(zero):
        k = edges[np.flatnonzero(zero)[0]]
        raise DegenerateScoreError(f"zero baseline weight on optimised edge "
                                   f"({graph.src[k]}, {graph.dst[k]})")
    a0 = np.bincount(j[from_op], weights=p0[from_op], minlength=graph.n_nodes)
    a_star = np.bincount(j[from_op], weights=pstar[from_op], minlength=graph.n_nodes)
    n_out = np.bincount(j[~from_op], minlength=graph.n_nodes)
    closed = n_out == 0
    stuck = in_c & ~closed & (1.0 - a_star <= 0)
    if np.any(stuck):
        bad = np.flatnonzero(stuck)
        raise DivisionByZeroError(
            f"optimised weights exhaust the mass of consumers {bad.tolist()[:20]}", bad)
    b = np.ones(edges.size)
    jo = j[from_op]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(closed[jo], 1.0, (1.0 - a0[jo]) / (1.0 - a_star[jo]))
    b[from_op] = pstar[from_op] / p0[from_op] * ratio
    return BoostTable(edges, b)
