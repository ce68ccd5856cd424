"""LP relaxations of a :class:`MilpModel`.

Two interchangeable backends share the :class:`Relaxation` interface: HiGHS
(warm-started across bound changes and appended cut rows) and the dense
primal simplex in :mod:`.simplex`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidModel, NumericalFailure
from . import simplex
from .model import EQ, GE, LE, MilpModel

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"


@dataclass
class LpResult:
    status: str
    x: np.ndarray | None
    objective: float
    iterations: int = 0


def row_ranges(model: MilpModel):
    """Rows as CSR-like triplets plus ``lo <= a.x <= hi`` ranges."""
    lo = np.empty(len(model.rows))
    hi = np.empty(len(model.rows))
    for k, r in enumerate(model.rows):
        if r.relation == LE:
            lo[k], hi[k] = -np.inf, r.rhs
        elif r.relation == GE:
            lo[k], hi[k] = r.rhs, np.inf
        elif r.relation == EQ:
            lo[k] = hi[k] = r.rhs
        else:
            raise InvalidModel(f"bad relation {r.relation!r}")
    return lo, hi


class Relaxation:
    """Interface: fixed objective and rows, per-solve bounds, append-only cuts."""

    def __init__(self, model: MilpModel):
        self.model = model
        self.n = model.n_vars
        self.c = model.objective_vector()
        self.constant = model.objective_constant

    def add_cuts(self, cuts) -> None:  # pragma: no cover - interface
        raise NotImplementedError

    def solve(self, lb, ub) -> LpResult:  # pragma: no cover - interface
        raise NotImplementedError


class HighsRelaxation(Relaxation):
    def __init__(self, model: MilpModel, feas_tol: float = 1e-9):
        super().__init__(model)
        import highspy

        self._hs = highspy
        h = highspy.Highs()
        h.setOptionValue("output_flag", False)
        h.setOptionValue("presolve", "off")
        h.setOptionValue("threads", 1)
        h.setOptionValue("random_seed", 0)
        h.setOptionValue("primal_feasibility_tolerance", feas_tol)
        h.setOptionValue("dual_feasibility_tolerance", feas_tol)
        self.h = h
        inf = highspy.kHighsInf
        lo, hi = row_ranges(model)
        rows, cols, vals = [], [], []
        for k, r in enumerate(model.rows):
            rows.append(np.full(len(r.ids), k))
            cols.append(r.ids)
            vals.append(r.coefs)
        rows = np.concatenate(rows) if rows else np.zeros(0, dtype=int)
        cols = np.concatenate(cols) if cols else np.zeros(0, dtype=int)
        vals = np.concatenate(vals) if vals else np.zeros(0)
        order = np.lexsort((rows, cols))
        rows, cols, vals = rows[order], cols[order], vals[order]
        start = np.searchsorted(cols, np.arange(self.n + 1)).astype(np.int32)
        lp = highspy.HighsLp()
        lp.num_col_ = self.n
        lp.num_row_ = len(model.rows)
        lp.col_cost_ = self.c
        lp.col_lower_ = np.clip(np.asarray(model.lb, dtype=float), -inf, inf)
        lp.col_upper_ = np.clip(np.asarray(model.ub, dtype=float), -inf, inf)
        lp.row_lower_ = np.clip(lo, -inf, inf)
        lp.row_upper_ = np.clip(hi, -inf, inf)
        lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
        lp.a_matrix_.start_ = start
        lp.a_matrix_.index_ = rows.astype(np.int32)
        lp.a_matrix_.value_ = vals.astype(float)
        h.passModel(lp)
        self._all_cols = np.arange(self.n, dtype=np.int32)

    def add_cuts(self, cuts) -> None:
        cuts = list(cuts)
        if not cuts:
            return
        inf = self._hs.kHighsInf
        starts, idx, vals, upper = [], [], [], []
        nnz = 0
        for ids, coefs, rhs in cuts:
            starts.append(nnz)
            idx.append(np.asarray(ids, dtype=np.int32))
            vals.append(np.asarray(coefs, dtype=float))
            upper.append(rhs)
            nnz += len(ids)
        self.h.addRows(
            len(cuts),
            np.full(len(cuts), -inf),
            np.asarray(upper, dtype=float),
            nnz,
            np.asarray(starts, dtype=np.int32),
            np.concatenate(idx),
            np.concatenate(vals),
        )

    def solve(self, lb, ub) -> LpResult:
        hs = self._hs
        h = self.h
        inf = hs.kHighsInf
        if self.n == 0:
            ok = all(r.residual(np.zeros(0)) <= 1e-9 for r in self.model.rows)
            if ok:
                return LpResult(OPTIMAL, np.zeros(0), self.constant)
            return LpResult(INFEASIBLE, None, np.inf)
        h.changeColsBounds(
            self.n, self._all_cols,
            np.clip(np.asarray(lb, dtype=float), -inf, inf),
            np.clip(np.asarray(ub, dtype=float), -inf, inf),
        )
        status = self._run()
        if status not in (hs.HighsModelStatus.kOptimal, hs.HighsModelStatus.kInfeasible,
                          hs.HighsModelStatus.kUnbounded, hs.HighsModelStatus.kUnboundedOrInfeasible):
            # lost the warm basis in a bad state; retry cold once
            h.clearSolver()
            status = self._run()
        iters = int(h.getInfo().simplex_iteration_count)
        if status == hs.HighsModelStatus.kOptimal:
            x = np.array(h.getSolution().col_value)
            return LpResult(OPTIMAL, x, float(self.c @ x) + self.constant, iters)
        if status == hs.HighsModelStatus.kInfeasible:
            return LpResult(INFEASIBLE, None, np.inf, iters)
        if status in (hs.HighsModelStatus.kUnbounded, hs.HighsModelStatus.kUnboundedOrInfeasible):
            # disambiguate with a zero objective
            h.changeColsCost(self.n, self._all_cols, np.zeros(self.n))
            feas = self._run()
            h.changeColsCost(self.n, self._all_cols, self.c)
            if feas == hs.HighsModelStatus.kOptimal:
                return LpResult(UNBOUNDED, None, -np.inf, iters)
            return LpResult(INFEASIBLE, None, np.inf, iters)
        raise NumericalFailure(f"HiGHS returned {h.modelStatusToString(status)}")

    def _run(self):
        self.h.run()
        return self.h.getModelStatus()


class SimplexRelaxation(Relaxation):
    """Dense standard-form rebuild per solve; for small models only."""

    def __init__(self, model: MilpModel, max_iter: int = 20000):
        super().__init__(model)
        lo, hi = row_ranges(model)
        m = len(model.rows)
        dense = np.zeros((m, self.n))
        for k, r in enumerate(model.rows):
            dense[k, r.ids] += r.coefs
        self.dense = dense
        self.lo = lo
        self.hi = hi
        self.max_iter = max_iter

    def add_cuts(self, cuts) -> None:
        rows = []
        for ids, coefs, rhs in cuts:
            row = np.zeros(self.n)
            np.add.at(row, np.asarray(ids, dtype=int), coefs)
            rows.append(row)
            self.lo = np.append(self.lo, -np.inf)
            self.hi = np.append(self.hi, rhs)
        if rows:
            self.dense = np.vstack([self.dense, np.array(rows)])

    def solve(self, lb, ub) -> LpResult:
        m = self.dense.shape[0]
        # a.x - s = 0 with slack bounds [lo, hi]
        A = np.hstack([self.dense, -np.eye(m)])
        c = np.concatenate([self.c, np.zeros(m)])
        lower = np.concatenate([np.asarray(lb, dtype=float), self.lo])
        upper = np.concatenate([np.asarray(ub, dtype=float), self.hi])
        status, z, iters = simplex.solve_standard_form(c, A, np.zeros(m), lower, upper, max_iter=self.max_iter)
        if status == simplex.OPTIMAL:
            x = z[: self.n]
            return LpResult(OPTIMAL, x, float(self.c @ x) + self.constant, iters)
        if status == simplex.INFEASIBLE:
            return LpResult(INFEASIBLE, None, np.inf, iters)
        return LpResult(UNBOUNDED, None, -np.inf, iters)


BACKENDS = {"highs": HighsRelaxation, "simplex": SimplexRelaxation}


def make_relaxation(model: MilpModel, backend: str = "highs") -> Relaxation:
    try:
        cls = BACKENDS[backend]
    except KeyError:
        raise ValueError(f"unknown LP backend {backend!r}; choose from {sorted(BACKENDS)}") from None
    return cls(model)


def solve_lp_relaxation(model: MilpModel, backend: str = "highs", lb=None, ub=None, cuts=()) -> LpResult:
    """Solve the continuous relaxation: binaries relaxed to their box, sos2 sets
    dropped, quad caps present only through ``cuts``."""
    model.validate()
    relax = make_relaxation(model, backend)
    relax.add_cuts(cuts)
    lb = np.asarray(model.lb if lb is None else lb, dtype=float)
    ub = np.asarray(model.ub if ub is None else ub, dtype=float)
    return relax.solve(lb, ub)
