"""Random node partitions for the allocation design and consumer sum bounds."""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ParameterError
from .rng import make_rng

__all__ = [
    "Partition",
    "RiskConfig",
    "RiskBounds",
    "sample_partition",
    "compute_sum_bounds",
    "ROLE_REST",
    "ROLE_OMEGA",
    "ROLE_LAMBDA",
    "ROLE_CPRIME",
]

ROLE_REST, ROLE_OMEGA, ROLE_LAMBDA, ROLE_CPRIME = 0, 1, 2, 3
DEGENERATE_MASS = 1e-12


@dataclass(frozen=True, eq=False)
class Partition:
    """Measurement arms ``omega[r]``, shadow arms ``lambda_[r]`` and exposure set ``c_prime``."""

    n_nodes: int
    omega: tuple
    lambda_: tuple
    c_prime: np.ndarray
    q: float = float("nan")

    def __post_init__(self):
        def norm(a):
            a = np.unique(np.asarray(a, dtype=np.int64))
            a.setflags(write=False)
            return a
        object.__setattr__(self, "omega", tuple(norm(a) for a in self.omega))
        object.__setattr__(self, "lambda_", tuple(norm(a) for a in self.lambda_))
        object.__setattr__(self, "c_prime", norm(self.c_prime))
        if len(self.omega) != len(self.lambda_):
            raise ParameterError("omega and lambda must list the same arms")
        counts = np.zeros(self.n_nodes, dtype=np.int64)
        for a in (*self.omega, *self.lambda_, self.c_prime):
            if a.size and (a[0] < 0 or a[-1] >= self.n_nodes):
                raise ParameterError("partition node id out of range")
            counts[a] += 1
        if np.any(counts > 1):
            raise ParameterError(f"partition sets overlap at node {int(np.argmax(counts > 1))}")

    @property
    def n_arms(self):
        return len(self.omega)

    @cached_property
    def role(self):
        role = np.zeros(self.n_nodes, dtype=np.int8)
        for a in self.omega:
            role[a] = ROLE_OMEGA
        for a in self.lambda_:
            role[a] = ROLE_LAMBDA
        role[self.c_prime] = ROLE_CPRIME
        role.setflags(write=False)
        return role

    @cached_property
    def arm(self):
        """Arm index for nodes in omega/lambda sets, -1 elsewhere."""
        arm = np.full(self.n_nodes, -1, dtype=np.int64)
        for r, (om, la) in enumerate(zip(self.omega, self.lambda_)):
            arm[om] = r
            arm[la] = r
        arm.setflags(write=False)
        return arm

    @property
    def in_omega_prime(self):
        return self.role == ROLE_OMEGA

    @property
    def omega_prime(self):
        return np.flatnonzero(self.in_omega_prime)

    def eligible_children(self, graph):
        """Children of measurement nodes that are in no omega/lambda set."""
        return _eligible(graph, self.role)


def _eligible(graph, role):
    from_omega = role[graph.src] == ROLE_OMEGA
    kids = np.unique(graph.dst[from_omega])
    return kids[(role[kids] != ROLE_OMEGA) & (role[kids] != ROLE_LAMBDA)]


def _arm_sizes(frac, n_arms, n):
    frac = np.broadcast_to(np.asarray(frac, dtype=float), (n_arms,))
    if np.any(frac < 0):
        raise ParameterError("fractions must be non-negative")
    return frac, np.rint(frac * n).astype(int)


def sample_partition(graph, n_arms, frac_omega, frac_lambda, q, seed,
                     mode="sample", frac_gamma=0.0):
    """Draw disjoint omega/lambda sets uniformly and select the exposure set.

    ``mode="sample"`` keeps each eligible child independently with
    probability ``q``.  ``mode="gamma"`` draws a further random set of
    ``frac_gamma * n`` nodes and keeps the children of measurement nodes
    inside it.
    """
    n = graph.n_nodes
    n_arms = int(n_arms)
    if n_arms < 1:
        raise ParameterError("need at least one arm")
    if not 0.0 <= q <= 1.0:
        raise ParameterError(f"q must lie in [0, 1], got {q}")
    fo, so = _arm_sizes(frac_omega, n_arms, n)
    fl, sl = _arm_sizes(frac_lambda, n_arms, n)
    g = float(frac_gamma) if mode == "gamma" else 0.0
    if mode not in ("sample", "gamma"):
        raise ParameterError(f"unknown exposure-set mode {mode!r}")
    if fo.sum() + fl.sum() + g >= 1.0 or so.sum() + sl.sum() + round(g * n) > n:
        raise ParameterError("set fractions must sum to less than 1")
    if np.any(so < 1):
        raise ParameterError("every measurement arm needs at least one node")

    rng = make_rng(seed, "partition")
    perm = rng.permutation(n)
    pos = 0
    omega, lam = [], []
    for size in so:
        omega.append(perm[pos:pos + size])
        pos += size
    for size in sl:
        lam.append(perm[pos:pos + size])
        pos += size

    role = np.zeros(n, dtype=np.int8)
    for a in omega:
        role[a] = ROLE_OMEGA
    for a in lam:
        role[a] = ROLE_LAMBDA
    eligible = _eligible(graph, role)
    if mode == "sample":
        draws = rng.random(eligible.size)
        c_prime = eligible[draws < q]
    else:
        gamma = perm[pos:pos + int(round(g * n))]
        c_prime = np.intersect1d(gamma, eligible)
    return Partition(n, tuple(omega), tuple(lam), c_prime, float(q))


@dataclass(frozen=True)
class RiskConfig:
    r_min: float = 0.0
    r_max: float = 10.0
    s_min: float = 0.2
    s_max: float = 5.0

    def __post_init__(self):
        if not 0 <= self.r_min <= 1 <= self.r_max:
            raise ParameterError("need 0 <= r_min <= 1 <= r_max")
        if not 0 <= self.s_min <= 1 <= self.s_max:
            raise ParameterError("need 0 <= s_min <= 1 <= s_max")


@dataclass(frozen=True, eq=False)
class RiskBounds:
    """Per-consumer bounds on the total weight from measurement nodes."""

    risk: RiskConfig
    consumers: np.ndarray     # exposure-set node ids with measurement parents
    base_mass: np.ndarray     # baseline weight from measurement parents
    lower: np.ndarray
    upper: np.ndarray
    degenerate: np.ndarray    # no baseline mass outside the measurement parents

    def __getattr__(self, name):
        if name in ("r_min", "r_max", "s_min", "s_max"):
            return getattr(self.risk, name)
        raise AttributeError(name)


def compute_sum_bounds(graph, partition, risk):
    if not isinstance(risk, RiskConfig):
        risk = RiskConfig(*risk)
    in_op = partition.in_omega_prime
    to_c = partition.role[graph.dst] == ROLE_CPRIME
    from_op = in_op[graph.src]
    mass = np.bincount(graph.dst[to_c & from_op], weights=graph.p_base[to_c & from_op],
                       minlength=graph.n_nodes)
    has_parent = np.bincount(graph.dst[to_c & from_op], minlength=graph.n_nodes) > 0
    consumers = partition.c_prime[has_parent[partition.c_prime]]
    s = mass[consumers]
    outside = 1.0 - s
    lower = np.maximum(0.0, 1.0 - risk.s_max * outside)
    upper = np.minimum(1.0, 1.0 - risk.s_min * outside)
    degenerate = outside <= DEGENERATE_MASS
    lower[degenerate] = 1.0
    upper[degenerate] = 1.0
    return RiskBounds(risk, consumers, s, lower, upper, degenerate)
