"""Sparse convex QP solver based on operator splitting (ADMM).

Problems have the form::

    minimize    0.5 x'Px + q'x + const
    subject to  l <= Ax <= u

The iteration alternates a regularised KKT solve (factorised once and reused
until the step size ``rho`` adapts) with a projection of ``Ax`` onto the box
``[l, u]``.  Termination uses the usual scaled primal/dual residual test;
primal infeasibility is detected from the dual-iterate differences.
"""

from dataclasses import dataclass, asdict, fields
import json
import warnings

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ParameterError

__all__ = ["QpProblem", "QpSolution", "QpConfig", "solve_qp", "kkt_residuals", "dump_problem"]

RHO_MIN, RHO_MAX = 1e-6, 1e6
RHO_EQ_SCALE = 1e3
ADAPT_TOLERANCE = 5.0
# bound on one rho update; unbounded jumps can make rho cycle between extremes
ADAPT_MAX_STEP = 100.0


@dataclass(frozen=True)
class QpConfig:
    rho: float = 0.1
    sigma: float = 1e-6
    relax_alpha: float = 1.6
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    eps_pinf: float = 1e-5
    max_iter: int = 4000
    check_every: int = 10
    adapt_every: int = 50
    polish: bool = True
    k_blocks: int = 0  # 0: size blocks to ~1000 consumers
    max_outer: int = 10

    def __post_init__(self):
        positive = ("rho", "sigma", "eps_pinf", "max_iter", "check_every", "adapt_every",
                    "max_outer")
        bad = [k for k in positive if not getattr(self, k) > 0]
        if not 0 < self.relax_alpha < 2:
            bad.append("relax_alpha")
        if self.eps_abs < 0 or self.eps_rel < 0 or self.eps_abs + self.eps_rel <= 0:
            bad.append("eps_abs/eps_rel")
        if self.k_blocks < 0:
            bad.append("k_blocks")
        if bad:
            raise ParameterError(f"invalid solver settings: {', '.join(bad)}")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown solver keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class QpProblem:
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    l: np.ndarray
    u: np.ndarray
    const: float = 0.0

    def __post_init__(self):
        P = sp.csc_matrix(self.P, dtype=float)
        A = sp.csc_matrix(self.A, dtype=float)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).ravel())
        object.__setattr__(self, "l", np.asarray(self.l, dtype=float).ravel())
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float).ravel())
        n = self.q.size
        if P.shape != (n, n) or A.shape[1] != n:
            raise ValueError("inconsistent problem dimensions")
        if self.l.size != A.shape[0] or self.u.size != A.shape[0]:
            raise ValueError("bounds must have one entry per constraint row")
        if np.any(self.l > self.u):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def n_vars(self):
        return int(self.q.size)

    @property
    def n_rows(self):
        return int(self.A.shape[0])

    def objective(self, x):
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.const)


@dataclass(frozen=True, eq=False)
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    objective_value: float
    primal_residual: float
    dual_residual: float
    iterations: int
    status: str  # solved | max_iter | infeasible
    polished: bool = False
    certificate_norm: float = float("nan")
    rho: float = float("nan")


def kkt_residuals(problem, x, y):
    """Stationarity, primal violation and complementarity at ``(x, y)``."""
    Ax = problem.A @ x
    stat = problem.P @ x + problem.q + problem.A.T @ y
    viol = np.maximum(problem.l - Ax, 0) + np.maximum(Ax - problem.u, 0)
    y_pos, y_neg = np.maximum(y, 0), np.minimum(y, 0)
    with np.errstate(invalid="ignore"):
        slack_u = np.where(np.isfinite(problem.u), problem.u - Ax, 0.0)
        slack_l = np.where(np.isfinite(problem.l), Ax - problem.l, 0.0)
    comp = np.abs(y_pos * slack_u) + np.abs(y_neg * slack_l)
    return {
        "stationarity": float(np.max(np.abs(stat), initial=0.0)),
        "primal": float(np.max(viol, initial=0.0)),
        "complementarity": float(np.max(comp, initial=0.0)),
    }


def _rho_vector(problem, rho):
    l, u = problem.l, problem.u
    r = np.full(problem.n_rows, rho)
    r[(l == -np.inf) & (u == np.inf)] = RHO_MIN
    r[u - l < 1e-12] = rho * RHO_EQ_SCALE
    return r


def _factor(problem, sigma, rho_vec):
    n = problem.n_vars
    K = sp.bmat(
        [[problem.P + sigma * sp.identity(n, format="csc"), problem.A.T],
         [problem.A, sp.diags(-1.0 / rho_vec)]],
        format="csc",
    )
    return spla.splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                     options={"SymmetricMode": True})


def _inf_norm(v):
    return float(np.max(np.abs(v), initial=0.0))


def _polish(problem, x, y, z, delta=1e-7, refine=5):
    """Solve the equality-constrained QP on the guessed active set."""
    low = (z - problem.l) < -y
    upp = (problem.u - z) < y
    act = np.flatnonzero(low | upp)
    n = problem.n_vars
    A_act = problem.A[act]
    b_act = np.where(low[act], problem.l[act], problem.u[act])
    K = sp.bmat(
        [[problem.P, A_act.T], [A_act, None]], format="csc"
    ) if act.size else sp.csc_matrix(problem.P)
    reg = sp.diags(np.concatenate([np.full(n, delta), np.full(act.size, -delta)]))
    try:
        lu = spla.splu(sp.csc_matrix(K + reg), permc_spec="MMD_AT_PLUS_A",
                       diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    except RuntimeError:
        return None
    rhs = np.concatenate([-problem.q, b_act])
    sol = lu.solve(rhs)
    for _ in range(refine):
        sol = sol + lu.solve(rhs - K @ sol)
    xp = sol[:n]
    yp = np.zeros(problem.n_rows)
    yp[act] = sol[n:]
    # multipliers must carry the sign of the bound they are attached to
    tol = 1e-9 * max(1.0, _inf_norm(yp))
    if np.any(yp[low & ~upp] > tol) or np.any(yp[upp & ~low] < -tol):
        return None
    return xp, yp


def solve_qp(problem, config=None, x0=None, y0=None):
    """Minimise ``problem`` by ADMM; optional warm start ``(x0, y0)``."""
    cfg = config or QpConfig()
    n, m = problem.n_vars, problem.n_rows
    P, q, A, l, u = problem.P, problem.q, problem.A, problem.l, problem.u
    if n == 0:
        return QpSolution(np.zeros(0), np.zeros(m), np.zeros(m), float(problem.const),
                          0.0, 0.0, 0, "solved")

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    y = np.zeros(m) if y0 is None else np.array(y0, dtype=float)
    z = np.clip(A @ x, l, u)
    rho = float(cfg.rho)
    rho_vec = _rho_vector(problem, rho)
    lu = _factor(problem, cfg.sigma, rho_vec)
    a = cfg.relax_alpha
    sigma = cfg.sigma

    status = "max_iter"
    cert = float("nan")
    r_prim = r_dual = np.inf
    it = 0
    for it in range(1, cfg.max_iter + 1):
        y_prev = y
        rhs = np.concatenate([sigma * x - q, z - y / rho_vec])
        sol = lu.solve(rhs)
        xt, nu = sol[:n], sol[n:]
        zt = z + (nu - y) / rho_vec
        x = a * xt + (1 - a) * x
        zr = a * zt + (1 - a) * z
        z = np.clip(zr + y / rho_vec, l, u)
        y = y + rho_vec * (zr - z)

        if it % cfg.check_every and it != cfg.max_iter:
            continue
        Ax, Px, ATy = A @ x, P @ x, A.T @ y
        r_prim = _inf_norm(Ax - z)
        r_dual = _inf_norm(Px + q + ATy)
        eps_p = cfg.eps_abs + cfg.eps_rel * max(_inf_norm(Ax), _inf_norm(z))
        eps_d = cfg.eps_abs + cfg.eps_rel * max(_inf_norm(Px), _inf_norm(ATy), _inf_norm(q))
        if r_prim <= eps_p and r_dual <= eps_d:
            status = "solved"
            break
        dy = y - y_prev
        ndy = _inf_norm(dy)
        if ndy > 0:
            support = (np.where(dy > 0, np.where(np.isfinite(u), u, 0.0), 0.0) @ dy
                       + np.where(dy < 0, np.where(np.isfinite(l), l, 0.0), 0.0) @ dy)
            if (_inf_norm(A.T @ dy) <= cfg.eps_pinf * ndy
                    and support <= -cfg.eps_pinf * ndy):
                status = "infeasible"
                cert = ndy
                break
        if it % cfg.adapt_every == 0:
            num = r_prim / max(_inf_norm(Ax), _inf_norm(z), 1e-30)
            den = r_dual / max(_inf_norm(Px), _inf_norm(ATy), _inf_norm(q), 1e-30)
            if num > 0 and den > 0:
                step = np.clip(np.sqrt(num / den), 1 / ADAPT_MAX_STEP, ADAPT_MAX_STEP)
                new_rho = float(np.clip(rho * step, RHO_MIN, RHO_MAX))
                if new_rho > ADAPT_TOLERANCE * rho or new_rho < rho / ADAPT_TOLERANCE:
                    rho = new_rho
                    rho_vec = _rho_vector(problem, rho)
                    lu = _factor(problem, sigma, rho_vec)

    polished = False
    if status != "infeasible" and cfg.polish:
        res = _polish(problem, x, y, z)
        if res is not None:
            xp, yp = res
            Axp = A @ xp
            viol = _inf_norm(np.maximum(l - Axp, 0) + np.maximum(Axp - u, 0))
            dres = _inf_norm(P @ xp + q + A.T @ yp)
            if (np.all(np.isfinite(xp)) and viol <= max(r_prim, 1e-9)
                    and dres <= max(r_dual, 1e-9)):
                x, y, z = xp, yp, np.clip(Axp, l, u)
                r_prim, r_dual = viol, dres
                polished = True
                status = "solved" if status == "max_iter" and viol <= cfg.eps_abs and dres <= cfg.eps_abs else status
    if status == "max_iter":
        warnings.warn(f"QP solver hit max_iter={cfg.max_iter} "
                      f"(primal {r_prim:.2e}, dual {r_dual:.2e})", RuntimeWarning, stacklevel=2)
    return QpSolution(
        x=x, y=y, z=z,
        objective_value=problem.objective(x),
        primal_residual=float(r_prim), dual_residual=float(r_dual),
        iterations=it, status=status, polished=polished,
        certificate_norm=cert, rho=rho,
    )


def dump_problem(problem, path):
    """Write P, q, A, l, u as plain text for cross-checking with other solvers."""
    P = sp.triu(problem.P).tocoo()
    A = problem.A.tocoo()
    with open(path, "w") as fh:
        fh.write(f"# qp n_vars {problem.n_vars} n_rows {problem.n_rows} const {problem.const!r}\n")
        fh.write(f"P {P.nnz}\n")
        for i, j, v in zip(P.row, P.col, P.data):
            fh.write(f"{i} {j} {v:.17g}\n")
        fh.write(f"q {problem.n_vars}\n")
        fh.writelines(f"{v:.17g}\n" for v in problem.q)
        fh.write(f"A {A.nnz}\n")
        for i, j, v in zip(A.row, A.col, A.data):
            fh.write(f"{i} {j} {v:.17g}\n")
        fh.write(f"l {problem.n_rows}\n")
        fh.writelines(f"{v:.17g}\n" for v in problem.l)
        fh.write(f"u {problem.n_rows}\n")
        fh.writelines(f"{v:.17g}\n" for v in problem.u)
