"""Exposure-matching QP over edges from measurement nodes into the exposure set.

For a producer ``i`` in arm ``r`` the residual target is

    h_i = Z_i(T^(r)) - Z'_i(T*)

where ``Z'_i`` collects the exposure already fixed by consumer-exact and
baseline edges.  The objective is ``sum_i (h_i - sum_j alpha_ij p_ij)^2`` over
the free edges ``i -> j`` with ``j`` in the exposure set, subject to
multiplicative box bounds and per-consumer ranged sums.

:func:`solve_allocation` splits the consumers into blocks and runs
Gauss-Seidel sweeps, solving each block exactly while the others are fixed.
"""

from dataclasses import dataclass
import warnings

import numpy as np
import scipy.sparse as sp

from .errors import DesignError, InputError
from .partition import ROLE_CPRIME, ROLE_LAMBDA, ROLE_OMEGA
from .qp import QpConfig, QpProblem, solve_qp
from .rng import make_rng

__all__ = [
    "AllocationData",
    "BlockPlan",
    "AllocationResult",
    "allocation_data",
    "build_full_problem",
    "make_block_plan",
    "solve_allocation",
    "solve_blocks",
    "solve_full",
    "benchmark_instance",
    "evaluate_allocation_objective",
    "repair_feasibility",
]

CONSUMERS_PER_BLOCK = 1000


@dataclass(frozen=True, eq=False)
class AllocationData:
    """Structural pieces of the allocation QP; ``F x - h`` is the residual vector."""

    var_edges: np.ndarray       # edge ids of the free weights, ascending
    var_consumer: np.ndarray    # row into ``consumers`` per variable
    var_producer: np.ndarray    # row into ``producers`` per variable
    producers: np.ndarray       # measurement node ids (all of them)
    target: np.ndarray          # h per producer
    F: sp.csr_matrix            # producers x variables, entries alpha
    consumers: np.ndarray
    lower: np.ndarray           # per consumer
    upper: np.ndarray
    box_lo: np.ndarray          # per variable
    box_hi: np.ndarray
    p_base: np.ndarray          # per variable

    @property
    def n_vars(self):
        return int(self.var_edges.size)

    def objective(self, x):
        r = self.F @ x - self.target
        return float(r @ r)


def _alpha(graph, alpha_override):
    if alpha_override is None:
        if np.any(np.isnan(graph.alpha)):
            raise InputError("graph alpha is unset; pass alpha_override")
        return graph.alpha
    return np.full(graph.n_edges, float(alpha_override))


def _fixed_weights(graph, treatments, partition):
    """Per-edge weight under the design for every edge not into the exposure set."""
    dst_role = partition.role[graph.dst]
    dst_arm = partition.arm[graph.dst]
    exact = (dst_role == ROLE_OMEGA) | (dst_role == ROLE_LAMBDA)
    w = graph.p_base.copy()
    rows = np.where(exact, dst_arm, 0)
    w[exact] = treatments.weights[rows[exact], np.flatnonzero(exact)]
    return w, exact


def allocation_data(graph, treatments, partition, bounds, alpha_override=None):
    alpha = _alpha(graph, alpha_override)
    role, arm = partition.role, partition.arm
    n = graph.n_nodes
    src_omega = role[graph.src] == ROLE_OMEGA
    free = src_omega & (role[graph.dst] == ROLE_CPRIME)
    fixed_w, _ = _fixed_weights(graph, treatments, partition)

    producers = partition.omega_prime
    prod_row = np.full(n, -1, dtype=np.int64)
    prod_row[producers] = np.arange(producers.size)

    e_out = np.flatnonzero(src_omega)
    src_arm = arm[graph.src[e_out]]
    target_full = alpha[e_out] * treatments.weights[src_arm, e_out]
    already = np.where(free[e_out], 0.0, alpha[e_out] * fixed_w[e_out])
    target = np.bincount(prod_row[graph.src[e_out]], weights=target_full - already,
                         minlength=producers.size)

    var_edges = np.flatnonzero(free)
    cons_row = np.full(n, -1, dtype=np.int64)
    cons_row[bounds.consumers] = np.arange(bounds.consumers.size)
    var_consumer = cons_row[graph.dst[var_edges]]
    if np.any(var_consumer < 0):
        raise DesignError("bounds do not cover every exposure-set consumer")
    var_producer = prod_row[graph.src[var_edges]]
    F = sp.csr_matrix((alpha[var_edges], (var_producer, np.arange(var_edges.size))),
                      shape=(producers.size, var_edges.size))
    pb = graph.p_base[var_edges]
    box_lo = bounds.r_min * pb
    box_hi = bounds.r_max * pb
    lo_sum = np.bincount(var_consumer, weights=box_lo, minlength=bounds.consumers.size)
    hi_sum = np.bincount(var_consumer, weights=box_hi, minlength=bounds.consumers.size)
    bad = (lo_sum > bounds.upper + 1e-12) | (hi_sum < bounds.lower - 1e-12)
    if np.any(bad):
        raise DesignError(f"infeasible bounds for consumers {bounds.consumers[bad].tolist()}")
    return AllocationData(var_edges, var_consumer, var_producer, producers, target, F,
                          bounds.consumers, bounds.lower, bounds.upper, box_lo, box_hi, pb)


def _qp_from(F, h, const, var_consumer, n_cons, box_lo, box_hi, lower, upper):
    nv = F.shape[1]
    P = 2.0 * (F.T @ F)
    q = -2.0 * (F.T @ h)
    G = sp.csr_matrix((np.ones(nv), (var_consumer, np.arange(nv))), shape=(n_cons, nv))
    A = sp.vstack([sp.identity(nv, format="csr"), G], format="csc")
    return QpProblem(P, q, A, np.concatenate([box_lo, lower]),
                     np.concatenate([box_hi, upper]), const)


def build_full_problem(graph, treatments, partition, bounds, alpha_override=None):
    """Return ``(QpProblem, var_edges)`` for the whole exposure set at once."""
    d = allocation_data(graph, treatments, partition, bounds, alpha_override)
    qp = _qp_from(d.F, d.target, float(d.target @ d.target), d.var_consumer,
                  d.consumers.size, d.box_lo, d.box_hi, d.lower, d.upper)
    return qp, d.var_edges


@dataclass(frozen=True)
class BlockPlan:
    blocks: tuple     # consumer node ids per block
    max_outer: int = 10

    @property
    def K(self):
        return len(self.blocks)


def make_block_plan(consumers, k_blocks=0, max_outer=10):
    """Deal consumers (ascending id) round-robin into ``k_blocks`` blocks.

    ``k_blocks=0`` picks roughly one block per thousand consumers.
    """
    consumers = np.sort(np.asarray(consumers, dtype=np.int64))
    if k_blocks <= 0:
        k_blocks = max(1, int(round(consumers.size / CONSUMERS_PER_BLOCK)))
    k_blocks = max(1, min(int(k_blocks), max(consumers.size, 1)))
    blocks = tuple(consumers[k::k_blocks] for k in range(k_blocks))
    return BlockPlan(blocks, int(max_outer))


def repair_feasibility(x, box_lo, box_hi, var_consumer, lower, upper):
    """Move ``x`` into the box and consumer-sum bounds with minimal proportional shifts."""
    x = np.clip(x, box_lo, box_hi)
    n_cons = lower.size
    for _ in range(2):
        s = np.bincount(var_consumer, weights=x, minlength=n_cons)
        over = np.maximum(s - upper, 0.0)
        under = np.maximum(lower - s, 0.0)
        if not (np.any(over > 0) or np.any(under > 0)):
            break
        down = x - box_lo
        up = box_hi - x
        cap_down = np.bincount(var_consumer, weights=down, minlength=n_cons)
        cap_up = np.bincount(var_consumer, weights=up, minlength=n_cons)
        with np.errstate(divide="ignore", invalid="ignore"):
            f_down = np.where(cap_down > 0, np.minimum(over / cap_down, 1.0), 0.0)
            f_up = np.where(cap_up > 0, np.minimum(under / cap_up, 1.0), 0.0)
        x = x - down * f_down[var_consumer] + up * f_up[var_consumer]
        x = np.clip(x, box_lo, box_hi)
    return x


@dataclass(frozen=True, eq=False)
class AllocationResult:
    var_edges: np.ndarray
    x: np.ndarray
    trace: list           # J after initialisation and after each sweep
    block_trace: list     # J after every block solve
    rejected: int         # block solutions discarded for not improving
    statuses: list


class _Block:
    def __init__(self, data, consumers_k):
        cmask = np.isin(data.consumers, consumers_k)
        cons_rows = np.flatnonzero(cmask)
        self.vars = np.flatnonzero(cmask[data.var_consumer])
        remap = np.full(data.consumers.size, -1, dtype=np.int64)
        remap[cons_rows] = np.arange(cons_rows.size)
        self.var_consumer = remap[data.var_consumer[self.vars]]
        Fk = data.F[:, self.vars].tocsr()
        self.rows = np.flatnonzero(np.diff(Fk.indptr) > 0)
        self.F = Fk[self.rows]
        self.lower = data.lower[cons_rows]
        self.upper = data.upper[cons_rows]
        self.box_lo = data.box_lo[self.vars]
        self.box_hi = data.box_hi[self.vars]
        self.y = None

    def problem(self, h):
        return _qp_from(self.F, h, float(h @ h), self.var_consumer, self.lower.size,
                        self.box_lo, self.box_hi, self.lower, self.upper)


def solve_allocation(graph, treatments, partition, bounds, plan=None, qp_config=None,
                     alpha_override=None, data=None):
    """Gauss-Seidel sweeps over consumer blocks, starting from ``p_base``."""
    cfg = qp_config or QpConfig()
    d = data or allocation_data(graph, treatments, partition, bounds, alpha_override)
    return solve_blocks(d, plan, cfg)


def solve_full(data, qp_config=None):
    """Solve the whole allocation QP in one factorisation; returns a QpSolution."""
    d = data
    qp = _qp_from(d.F, d.target, float(d.target @ d.target), d.var_consumer,
                  d.consumers.size, d.box_lo, d.box_hi, d.lower, d.upper)
    return solve_qp(qp, qp_config or QpConfig(), x0=d.p_base)


def solve_blocks(d, plan=None, qp_config=None):
    """Block Gauss-Seidel on prepared :class:`AllocationData`."""
    cfg = qp_config or QpConfig()
    if plan is None:
        plan = make_block_plan(d.consumers, cfg.k_blocks, cfg.max_outer)
    covered = np.concatenate(plan.blocks) if plan.blocks else np.empty(0, np.int64)
    if not np.array_equal(np.sort(covered), np.sort(d.consumers)):
        raise DesignError("block plan must cover the exposure set exactly once")

    x = d.p_base.copy()
    resid = d.F @ x - d.target
    J = float(resid @ resid)
    trace, block_trace, statuses = [J], [J], []
    rejected = 0
    blocks = [_Block(d, b) for b in plan.blocks]
    for _sweep in range(plan.max_outer):
        for blk in blocks:
            if blk.vars.size == 0:
                continue
            xk_old = x[blk.vars]
            r_rows = resid[blk.rows]
            h = -(r_rows - blk.F @ xk_old)   # target minus contributions of other blocks
            prob = blk.problem(h)
            sol = solve_qp(prob, cfg, x0=xk_old, y0=blk.y)
            statuses.append(sol.status)
            if sol.status == "infeasible":
                raise DesignError("block subproblem reported infeasible; consumers "
                                  f"{d.consumers[np.unique(d.var_consumer[blk.vars])].tolist()[:20]}")
            xk = repair_feasibility(sol.x, blk.box_lo, blk.box_hi, blk.var_consumer,
                                    blk.lower, blk.upper)
            new_r = blk.F @ xk - h
            old_r = r_rows
            if float(new_r @ new_r) <= float(old_r @ old_r):
                x[blk.vars] = xk
                resid[blk.rows] = new_r
                blk.y = sol.y
            else:
                rejected += 1
            J = float(resid @ resid)
            block_trace.append(J)
        prev = trace[-1]
        trace.append(J)
        if prev - J <= 1e-12 * max(1.0, abs(prev)):
            break
    if any(s == "max_iter" for s in statuses):
        warnings.warn("some block solves stopped at the iteration limit", RuntimeWarning,
                      stacklevel=2)
    # recompute exactly to avoid drift from incremental residual updates
    resid = d.F @ x - d.target
    J = float(resid @ resid)
    trace[-1] = J
    block_trace[-1] = J
    return AllocationResult(d.var_edges, x, trace, block_trace, rejected, statuses)


def _weights_array(graph, weights):
    if isinstance(weights, dict):
        arr = np.full(graph.n_edges, np.nan)
        if weights:
            pairs = np.array(list(weights.keys()), dtype=np.int64).reshape(-1, 2)
            idx = graph.edge_index(pairs[:, 0], pairs[:, 1])
            if np.any(idx < 0):
                k = int(np.flatnonzero(idx < 0)[0])
                raise InputError(f"edge {tuple(pairs[k])} is not in the graph")
            arr[idx] = np.fromiter(weights.values(), dtype=float, count=len(weights))
        return arr
    arr = np.asarray(weights, dtype=float)
    if arr.shape != (graph.n_edges,):
        raise InputError("weights must be a mapping or one value per edge")
    return arr


def evaluate_allocation_objective(graph, treatments, partition, weights, alpha_override=None):
    """Sum over measurement producers of (Z_i(T^(r)) - Z_i(T*))^2.

    ``weights`` gives ``p*`` on every edge from a measurement node into the
    exposure set (mapping ``(src, dst) -> p`` or a per-edge array with NaN
    for "not given").  Other edges follow the design's fixed assignment.
    """
    w = _weights_array(graph, weights)
    alpha = _alpha(graph, alpha_override)
    role, arm = partition.role, partition.arm
    total = 0.0
    for r, members in enumerate(partition.omega):
        p_r = treatments.weights[r]
        for i in members:
            z_target = 0.0
            z_star = 0.0
            for e in graph.children(i):
                j = graph.dst[e]
                z_target += alpha[e] * p_r[e]
                if role[j] == ROLE_CPRIME:
                    if np.isnan(w[e]):
                        raise InputError(f"missing weight for edge ({i}, {j})")
                    z_star += alpha[e] * w[e]
                elif role[j] in (ROLE_OMEGA, ROLE_LAMBDA):
                    z_star += alpha[e] * treatments.weights[arm[j], e]
                else:
                    z_star += alpha[e] * graph.p_base[e]
            total += (z_target - z_star) ** 2
    return total


def benchmark_instance(n, seed, n_nodes=100, r_min=0.1, r_max=10.0, s_min=0.2, s_max=5.0):
    """Random allocation problem with ``n`` variables.

    Each variable is a producer-consumer pair drawn uniformly from ``n_nodes``
    producers and ``n_nodes`` consumers (repeated pairs are separate
    variables).  Targets ``h_i ~ U[0, n / n_nodes]``, baselines
    ``p ~ U[0, 1]``, box ``[r_min p, r_max p]`` and per-consumer sums within
    ``[s_min, s_max]`` times the baseline sum.  All alphas are one.
    """
    rng = make_rng(seed, "benchmark", int(n))
    prod = rng.integers(0, n_nodes, size=n)
    cons = rng.integers(0, n_nodes, size=n)
    h = rng.uniform(0.0, n / n_nodes, size=n_nodes)
    pb = rng.uniform(0.0, 1.0, size=n)
    consumers = np.unique(cons)
    row = np.full(n_nodes, -1, dtype=np.int64)
    row[consumers] = np.arange(consumers.size)
    var_consumer = row[cons]
    base = np.bincount(var_consumer, weights=pb, minlength=consumers.size)
    F = sp.csr_matrix((np.ones(n), (prod, np.arange(n))), shape=(n_nodes, n))
    return AllocationData(
        var_edges=np.arange(n), var_consumer=var_consumer, var_producer=prod,
        producers=np.arange(n_nodes), target=h, F=F, consumers=consumers,
        lower=s_min * base, upper=s_max * base, box_lo=r_min * pb, box_hi=r_max * pb,
        p_base=pb,
    )
