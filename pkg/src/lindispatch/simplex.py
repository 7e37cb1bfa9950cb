"""Dense two-phase tableau simplex.

Solves ``min c.x  s.t.  A_ub x <= b_ub,  A_eq x = b_eq,  lo <= x <= hi``
with ``x`` otherwise free. Free variables are kept unsplit: they enter the
basis in either direction and never leave it. Entering columns follow
Dantzig's rule (ties to the lowest index); after a run of degenerate pivots
the solver falls back to Bland's rule until the objective moves again, which
rules out cycling. Everything is deterministic for identical input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration_limit"


@dataclass
class LPResult:
    status: str
    x: np.ndarray | None = None
    fun: float = float("nan")
    ineq_duals: np.ndarray | None = None   # >= 0, one per A_ub row
    eq_duals: np.ndarray | None = None
    lower_duals: np.ndarray | None = None  # >= 0, one per variable
    upper_duals: np.ndarray | None = None
    ray: np.ndarray | None = None          # improving direction when unbounded
    iterations: int = 0
    infeasibility: float = 0.0

    @property
    def success(self) -> bool:
        return self.status == OPTIMAL


class _Tableau:
    def __init__(self, T: np.ndarray, basis: np.ndarray, free: np.ndarray, pivot_tol: float):
        self.T = T              # rows 0..m-1 constraints, row m objective; last column rhs
        self.basis = basis
        self.free = free        # per column: True for free variables
        self.tol = pivot_tol
        self.iterations = 0

    @property
    def m(self) -> int:
        return self.T.shape[0] - 1

    def pivot(self, i: int, j: int) -> None:
        T = self.T
        T[i] /= T[i, j]
        col = T[:, j].copy()
        col[i] = 0.0
        nz = np.flatnonzero(col)
        if nz.size:
            T[nz] -= np.outer(col[nz], T[i])
        T[:, j] = 0.0
        T[i, j] = 1.0
        self.basis[i] = j
        self.iterations += 1

    def run(self, allowed: np.ndarray, max_iter: int, bland_after: int = 50):
        """Iterate to optimality. Returns (status, entering column, direction)."""
        T = self.T
        m = self.m
        degenerate = 0
        is_basic = np.zeros(T.shape[1] - 1, dtype=bool)
        while True:
            if self.iterations >= max_iter:
                return ITERATION_LIMIT, -1, 0
            r = T[m, :-1]
            is_basic[:] = False
            is_basic[self.basis] = True
            cand = allowed & ~is_basic
            improving = cand & ((r < -self.tol) | (self.free & (r > self.tol)))
            idx = np.flatnonzero(improving)
            if idx.size == 0:
                return OPTIMAL, -1, 0
            if degenerate >= bland_after:
                j = int(idx[0])
            else:
                j = int(idx[np.argmax(np.abs(r[idx]))])
            direction = 1.0 if r[j] < 0 else -1.0
            col = direction * T[:m, j]
            rhs = T[:m, -1]
            limited = (col > self.tol) & ~self.free[self.basis]
            rows = np.flatnonzero(limited)
            if rows.size == 0:
                return UNBOUNDED, j, direction
            ratios = np.maximum(rhs[rows], 0.0) / col[rows]
            best = ratios.min()
            ties = rows[ratios <= best + 1e-12 * max(1.0, best)]
            i = int(ties[np.argmin(self.basis[ties])])
            degenerate = degenerate + 1 if best <= 1e-12 else 0
            self.pivot(i, j)


def _bounds(n: int, bounds) -> tuple[np.ndarray, np.ndarray]:
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    if bounds is not None:
        for k, (a, b) in enumerate(bounds):
            lo[k] = -np.inf if a is None else a
            hi[k] = np.inf if b is None else b
    return lo, hi


def linprog(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, bounds=None, *,
            tol: float = 1e-9, max_iter: int | None = None, x0=None, lazy=None) -> LPResult:
    """Minimise ``c.x`` subject to the given constraints.

    ``bounds`` is a sequence of ``(lo, hi)`` pairs (``None`` for infinite);
    variables without bounds are free. Finite bounds are handled as extra
    inequality rows. Variables fixed by a bound pair or by a single-entry
    equality row are substituted out before the tableau is built. ``x0`` moves
    the origin of the tableau; a point near feasibility keeps phase 1 short.
    ``lazy`` marks inequality rows that are only added once violated, which
    pays off when most rows are slack at the optimum.
    """
    c = np.asarray(c, dtype=float)
    n = c.size
    A_ub = np.zeros((0, n)) if A_ub is None else np.atleast_2d(np.asarray(A_ub, dtype=float))
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float).ravel()
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).ravel()
    A_ub = A_ub.reshape(-1, n)
    A_eq = A_eq.reshape(-1, n)
    lo, hi = _bounds(n, bounds)
    if np.any(lo > hi):
        return LPResult(INFEASIBLE, infeasibility=float(np.max(lo - hi)))
    if lazy is not None and np.any(lazy):
        return _row_generation(c, A_ub, b_ub, A_eq, b_eq, lo, hi, tol, max_iter, x0,
                               np.asarray(lazy, dtype=bool))
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float)
        res = linprog(c, A_ub, b_ub - A_ub @ x0, A_eq, b_eq - A_eq @ x0,
                      list(zip(lo - x0, hi - x0)), tol=tol, max_iter=max_iter)
        if res.x is not None:
            res.x = res.x + x0
            res.fun = float(c @ res.x)
        return res

    # presolve: fixed variables
    value = np.full(n, np.nan)
    row_of = np.full(n, -1)
    singleton = np.zeros(A_eq.shape[0], dtype=bool)
    for k, row in enumerate(A_eq):
        nz = np.flatnonzero(row)
        if nz.size != 1:
            continue
        j = int(nz[0])
        v = b_eq[k] / row[j]
        if not np.isnan(value[j]) and abs(v - value[j]) > tol * (1 + abs(v)):
            return LPResult(INFEASIBLE, infeasibility=abs(v - value[j]))
        if row_of[j] < 0:
            value[j], row_of[j] = v, k
        singleton[k] = True
    same = np.isfinite(lo) & (lo == hi) & np.isnan(value)
    value[same] = lo[same]
    fixed = ~np.isnan(value)
    if not fixed.any():
        return _solve(c, A_ub, b_ub, A_eq, b_eq, lo, hi, tol, max_iter)
    if np.any((value[fixed] < lo[fixed] - tol) | (value[fixed] > hi[fixed] + tol)):
        return LPResult(INFEASIBLE, infeasibility=float(np.max(np.maximum(lo - value, value - hi)[fixed])))

    keep = ~fixed
    xf = np.where(fixed, value, 0.0)
    rest = ~singleton
    sub = _solve(c[keep], A_ub[:, keep], b_ub - A_ub @ xf, A_eq[np.ix_(rest, keep)],
                 b_eq[rest] - A_eq[rest] @ xf, lo[keep], hi[keep], tol, max_iter)
    if sub.status == UNBOUNDED:
        ray = np.zeros(n)
        ray[keep] = sub.ray
        return LPResult(UNBOUNDED, ray=ray, iterations=sub.iterations)
    if sub.status != OPTIMAL:
        return sub
    x = xf.copy()
    x[keep] = sub.x
    eq = np.zeros(A_eq.shape[0])
    eq[rest] = sub.eq_duals
    lower = np.zeros(n)
    upper = np.zeros(n)
    lower[keep], upper[keep] = sub.lower_duals, sub.upper_duals
    # reduced cost of each fixed variable goes to its defining row or bound
    r = c + A_ub.T @ sub.ineq_duals + A_eq.T @ eq
    for j in np.flatnonzero(fixed):
        if row_of[j] >= 0:
            eq[row_of[j]] = -r[j] / A_eq[row_of[j], j]
        elif r[j] > 0:
            lower[j] = r[j]
        else:
            upper[j] = -r[j]
    return LPResult(OPTIMAL, x=x, fun=float(c @ x), ineq_duals=sub.ineq_duals, eq_duals=eq,
                    lower_duals=lower, upper_duals=upper, iterations=sub.iterations)


def _row_generation(c, A_ub, b_ub, A_eq, b_eq, lo, hi, tol, max_iter, x0, lazy) -> LPResult:
    bounds = list(zip(lo, hi))
    active = ~lazy
    if x0 is not None:
        active |= A_ub @ x0 - b_ub > 0
    iterations = 0
    while True:
        rows = np.flatnonzero(active)
        res = linprog(c, A_ub[rows], b_ub[rows], A_eq, b_eq, bounds, tol=tol,
                      max_iter=max_iter, x0=x0)
        iterations += res.iterations
        if res.status == UNBOUNDED and not active.all():
            active[:] = True
            continue
        if res.status != OPTIMAL:
            # a relaxation that is infeasible makes the full problem infeasible
            res.iterations = iterations
            return res
        slack = A_ub @ res.x - b_ub
        viol = ~active & (slack > tol * (1.0 + np.abs(b_ub)))
        if not viol.any():
            duals = np.zeros(A_ub.shape[0])
            duals[rows] = res.ineq_duals
            res.ineq_duals = duals
            res.iterations = iterations
            return res
        active |= viol


def _solve(c, A_ub, b_ub, A_eq, b_eq, lo, hi, tol, max_iter) -> LPResult:
    n = c.size

    lo_idx = np.flatnonzero(np.isfinite(lo))
    hi_idx = np.flatnonzero(np.isfinite(hi))
    eye = np.eye(n)
    G = np.vstack([A_ub, -eye[lo_idx], eye[hi_idx]])
    h = np.concatenate([b_ub, -lo[lo_idx], hi[hi_idx]])
    m_ub, m_eq = G.shape[0], A_eq.shape[0]
    m = m_ub + m_eq

    # standard rows: [G I 0] for inequalities, [A_eq 0 0] for equalities
    A = np.zeros((m, n + m_ub))
    A[:m_ub, :n] = G
    A[:m_ub, n:] = np.eye(m_ub)
    A[m_ub:, :n] = A_eq
    b = np.concatenate([h, b_eq])
    sign = np.where(b < 0, -1.0, 1.0)
    A *= sign[:, None]
    b = b * sign

    needs_art = np.ones(m, dtype=bool)
    needs_art[:m_ub] = sign[:m_ub] < 0
    art_rows = np.flatnonzero(needs_art)
    n_art = art_rows.size
    ncol = n + m_ub + n_art
    T = np.zeros((m + 1, ncol + 1))
    T[:m, : n + m_ub] = A
    T[art_rows, n + m_ub + np.arange(n_art)] = 1.0
    T[:m, -1] = b
    basis = np.empty(m, dtype=int)
    basis[:m_ub] = n + np.arange(m_ub)
    basis[art_rows] = n + m_ub + np.arange(n_art)
    free = np.zeros(ncol, dtype=bool)
    free[:n] = True
    if max_iter is None:
        max_iter = 50 * (m + n) + 1000
    tab = _Tableau(T, basis, free, pivot_tol=tol)

    # phase 1: minimise the sum of artificials
    if n_art:
        T[m, :] = 0.0
        T[m, n + m_ub:ncol] = 1.0
        T[m] -= T[art_rows].sum(axis=0)
        allowed = np.ones(ncol, dtype=bool)
        status, _, _ = tab.run(allowed, max_iter)
        if status == ITERATION_LIMIT:
            return LPResult(status, iterations=tab.iterations)
        infeas = -T[m, -1]
        if infeas > max(1e-8, tol * (1.0 + np.abs(b).max(initial=0.0))):
            return LPResult(INFEASIBLE, iterations=tab.iterations, infeasibility=float(infeas))
        # drive remaining artificials out of the basis, dropping redundant rows
        keep = np.ones(m, dtype=bool)
        for i in range(m):
            if tab.basis[i] >= n + m_ub:
                row = T[i, : n + m_ub]
                cand = np.flatnonzero(np.abs(row) > 1e-9)
                if cand.size:
                    tab.pivot(i, int(cand[np.argmax(np.abs(row[cand]))]))
                else:
                    keep[i] = False
        keep_rows = np.flatnonzero(keep)
        T = np.vstack([T[keep_rows][:, list(range(n + m_ub)) + [ncol]], T[m:, list(range(n + m_ub)) + [ncol]]])
        tab.T = T
        tab.basis = tab.basis[keep_rows]
        tab.free = free[: n + m_ub]
    else:
        keep_rows = np.arange(m)

    # phase 2
    T = tab.T
    mk = T.shape[0] - 1
    cz = np.zeros(n + m_ub)
    cz[:n] = c
    T[mk, :-1] = cz
    T[mk, -1] = 0.0
    T[mk] -= cz[tab.basis] @ T[:mk]
    status, j, direction = tab.run(np.ones(n + m_ub, dtype=bool), max_iter)
    if status == ITERATION_LIMIT:
        return LPResult(status, iterations=tab.iterations)
    if status == UNBOUNDED:
        dz = np.zeros(n + m_ub)
        dz[j] = direction
        dz[tab.basis] = -direction * T[:mk, j]
        return LPResult(UNBOUNDED, ray=dz[:n], iterations=tab.iterations)

    # refine the vertex and duals from the original data
    B = A[np.ix_(keep_rows, tab.basis)]
    bk = b[keep_rows]
    z = np.zeros(n + m_ub)
    try:
        z[tab.basis] = np.linalg.solve(B, bk)
        y = np.linalg.solve(B.T, cz[tab.basis])
    except np.linalg.LinAlgError:
        z[tab.basis] = T[:mk, -1]
        y = np.linalg.lstsq(B.T, cz[tab.basis], rcond=None)[0]
    x = z[:n]
    y_full = np.zeros(m)
    y_full[keep_rows] = y
    lam = -(sign * y_full)
    ineq = np.maximum(lam[:m_ub], 0.0)
    n_ub0 = A_ub.shape[0]
    lower_duals = np.zeros(n)
    upper_duals = np.zeros(n)
    lower_duals[lo_idx] = ineq[n_ub0:n_ub0 + lo_idx.size]
    upper_duals[hi_idx] = ineq[n_ub0 + lo_idx.size:]
    return LPResult(
        OPTIMAL, x=x, fun=float(c @ x), ineq_duals=ineq[:n_ub0], eq_duals=lam[m_ub:],
        lower_duals=lower_duals, upper_duals=upper_duals, iterations=tab.iterations,
    )
