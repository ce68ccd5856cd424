"""Dense bounded-variable primal simplex (two phase) with a Bland's-rule fallback.

Solves ``min c.z  s.t.  A z = b,  l <= z <= u`` where bounds may be infinite.
Meant for small models and as an independent check on the HiGHS backend.
"""
from __future__ import annotations

import numpy as np

from ..errors import NumericalFailure

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"


class _Simplex:
    def __init__(self, A, b, lower, upper, tol=1e-9, max_iter=20000, stall_limit=50):
        self.A = A
        self.b = b
        self.l = lower
        self.u = upper
        self.m, self.n = A.shape
        self.tol = tol
        self.max_iter = max_iter
        self.stall_limit = stall_limit
        self.iterations = 0

    def run(self, c, basis, x):
        """Iterate from a feasible basis. ``x`` holds nonbasic values; returns status."""
        A, l, u, tol = self.A, self.l, self.u, self.tol
        bland = False
        stall = 0
        while True:
            if self.iterations >= self.max_iter:
                raise NumericalFailure(f"simplex did not converge in {self.max_iter} iterations")
            self.iterations += 1
            B = A[:, basis]
            nonbasic = np.ones(self.n, dtype=bool)
            nonbasic[basis] = False
            rhs = self.b - A[:, nonbasic] @ x[nonbasic]
            try:
                x[basis] = np.linalg.solve(B, rhs)
                y = np.linalg.solve(B.T, c[basis])
            except np.linalg.LinAlgError:
                raise NumericalFailure("singular basis") from None
            d = c - A.T @ y
            can_up = nonbasic & (d < -tol) & (x < u - tol)
            can_down = nonbasic & (d > tol) & (x > l + tol)
            cand = np.flatnonzero(can_up | can_down)
            if cand.size == 0:
                return OPTIMAL
            if bland:
                j = int(cand[0])
            else:
                j = int(cand[np.argmax(np.abs(d[cand]))])
            direction = 1.0 if can_up[j] else -1.0
            alpha = np.linalg.solve(B, A[:, j])
            rate = -direction * alpha  # d x_B / d theta
            theta = u[j] - l[j] if np.isfinite(u[j] - l[j]) else np.inf
            leave = -1
            leave_at = 0.0
            xb = x[basis]
            for r in range(self.m):
                k = basis[r]
                if rate[r] < -1e-12 and np.isfinite(l[k]):
                    t = max(xb[r] - l[k], 0.0) / -rate[r]
                    bound = l[k]
                elif rate[r] > 1e-12 and np.isfinite(u[k]):
                    t = max(u[k] - xb[r], 0.0) / rate[r]
                    bound = u[k]
                else:
                    continue
                better = t < theta - 1e-12
                tie = abs(t - theta) <= 1e-12 and leave >= 0
                if better or (tie and (basis[r] < basis[leave] if bland else abs(rate[r]) > abs(rate[leave]))):
                    theta, leave, leave_at = t, r, bound
            if not np.isfinite(theta):
                return UNBOUNDED
            stall = stall + 1 if theta <= 1e-12 else 0
            if stall >= self.stall_limit:
                bland = True
            x[j] += direction * theta
            if leave < 0:
                continue  # bound flip
            k = basis[leave]
            x[basis] = xb + rate * theta
            x[k] = leave_at
            basis[leave] = j


def solve_standard_form(c, A, b, lower, upper, tol=1e-9, max_iter=20000):
    """Return ``(status, z, iterations)``; ``z`` is None unless optimal."""
    c = np.asarray(c, dtype=float)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    m, n = A.shape
    if np.any(lower > upper + tol):
        return INFEASIBLE, None, 0
    x = np.where(np.isfinite(lower), lower, np.where(np.isfinite(upper), upper, 0.0))
    if m == 0:
        if np.any((c < -tol) & ~np.isfinite(upper)) or np.any((c > tol) & ~np.isfinite(lower)):
            return UNBOUNDED, None, 0
        z = np.where(c < 0, upper, np.where(c > 0, lower, x))
        return OPTIMAL, z, 0
    resid = b - A @ x
    sign = np.where(resid >= 0, 1.0, -1.0)
    # phase 1 on [A | diag(sign)] with artificial variables
    A1 = np.hstack([A, np.diag(sign)])
    l1 = np.concatenate([lower, np.zeros(m)])
    u1 = np.concatenate([upper, np.full(m, np.inf)])
    x1 = np.concatenate([x, np.abs(resid)])
    basis = list(range(n, n + m))
    solver = _Simplex(A1, b, l1, u1, tol=tol, max_iter=max_iter)
    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    solver.run(c1, basis, x1)
    infeas = x1[n:].sum()
    if infeas > max(1e-7, 1e-9 * (1.0 + np.abs(b).max())):
        return INFEASIBLE, None, solver.iterations
    # phase 2: artificials pinned to zero
    solver.u = np.concatenate([upper, np.zeros(m)])
    x1[n:] = np.clip(x1[n:], 0.0, 0.0)
    c2 = np.concatenate([c, np.zeros(m)])
    status = solver.run(c2, basis, x1)
    if status != OPTIMAL:
        return status, None, solver.iterations
    z = np.clip(x1[:n], lower, upper)
    return OPTIMAL, z, solver.iterations
