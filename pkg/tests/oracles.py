"""Independent reference computations used by the tests."""

import itertools

import numpy as np
import scipy.sparse as sp

from oasis.qp import QpProblem


def random_qp(rng, n, sum_row=True):
    """Least-squares QP with a box and (optionally) one ranged sum row."""
    m = n + 1
    F = rng.normal(size=(m, n))
    h = rng.normal(size=m) * 2
    lo = rng.uniform(-1.0, 0.5, size=n)
    hi = lo + rng.uniform(0.5, 2.0, size=n)
    rows = [np.eye(n)]
    l, u = [lo], [hi]
    if sum_row:
        a, b = lo.sum(), hi.sum()
        s_lo = a + rng.uniform(0.0, 0.5) * (b - a)
        s_hi = s_lo + rng.uniform(0.05, 0.5) * (b - s_lo)
        rows.append(np.ones((1, n)))
        l.append([s_lo])
        u.append([s_hi])
    A = np.vstack(rows)
    return QpProblem(sp.csc_matrix(2 * F.T @ F), -2 * F.T @ h, sp.csc_matrix(A),
                     np.concatenate(l), np.concatenate(u), float(h @ h))


def grid_minimum(problem, step=1e-6, points=41, max_moves=500):
    """Minimise by exhaustive grid search with successive refinement.

    The first grid spans the variable box.  At every spacing the grid is
    re-centred on the incumbent until it stops improving, so the search can
    travel along slanted constraint rows; then the spacing shrinks by ten
    until it reaches ``step``.
    """
    A = problem.A.toarray()
    P = problem.P.toarray()
    n = problem.n_vars
    box_rows = np.flatnonzero((np.abs(A) > 0).sum(axis=1) == 1)
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    for r in box_rows:
        j = int(np.flatnonzero(A[r])[0])
        lo[j] = max(lo[j], problem.l[r] / A[r, j])
        hi[j] = min(hi[j], problem.u[r] / A[r, j])
    tol = 1e-12

    def best_on_grid(centre, half):
        axes = [np.unique(np.clip(np.linspace(c - w, c + w, points), a, b))
                for c, w, a, b in zip(centre, half, lo, hi)]
        X = np.array(list(itertools.product(*axes)))
        AX = X @ A.T
        X = X[np.all((AX >= problem.l - tol) & (AX <= problem.u + tol), axis=1)]
        if not X.size:
            return None, np.inf
        f = 0.5 * np.einsum("ij,jk,ik->i", X, P, X) + X @ problem.q + problem.const
        k = int(np.argmin(f))
        return X[k], float(f[k])

    half = (hi - lo) / 2
    best_x, best_f = best_on_grid((lo + hi) / 2, half)
    if best_x is None:
        return None, np.inf
    while True:
        for _ in range(max_moves):
            x, f = best_on_grid(best_x, half)
            if not f < best_f:
                break
            best_x, best_f = x, f
        spacing = 2 * half / (points - 1)
        if np.all(spacing <= step):
            return best_x, best_f
        half = half / 10


def face_minimum(problem, tol=1e-9):
    """Exact minimiser of a small QP by enumerating active constraint sets.

    For every subset of rows held at one of their bounds, minimise the
    objective on that affine set and keep the best primal-feasible point.
    The convex optimum lies on one of these faces, so the result is exact
    up to rounding.  Exponential in the row count; meant for a handful of rows.
    """
    A = problem.A.toarray()
    P = problem.P.toarray()
    q = np.asarray(problem.q, dtype=float)
    n, m = problem.n_vars, A.shape[0]
    best_x, best_f = None, np.inf
    for k in range(0, min(n, m) + 1):
        for rows in itertools.combinations(range(m), k):
            for sides in itertools.product((0, 1), repeat=k):
                b = np.array([problem.l[r] if s == 0 else problem.u[r] for r, s in zip(rows, sides)])
                if not np.all(np.isfinite(b)):
                    continue
                E = A[list(rows)] if k else np.zeros((0, n))
                K = np.block([[P, E.T], [E, np.zeros((k, k))]])
                rhs = np.concatenate([-q, b])
                sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
                x = sol[:n]
                if not np.allclose(K @ sol, rhs, atol=1e-9 * (1 + np.abs(rhs).max())):
                    continue
                ax = A @ x
                if np.any(ax < problem.l - tol) or np.any(ax > problem.u + tol):
                    continue
                f = 0.5 * x @ P @ x + q @ x + problem.const
                if f < best_f:
                    best_x, best_f = x, float(f)
    return best_x, best_f
