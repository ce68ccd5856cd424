from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import BINARY, CAP_TOL, FEAS_TOL, INT_TOL, SOS_TOL, MilpModel


@dataclass(frozen=True)
class Violation:
    kind: str  # "bound", "linear", "integrality", "sos2", "quad_cap"
    index: int
    residual: float


def sos2_excess(values, ids) -> float:
    """Total weight outside the best adjacent pair of an sos2 set."""
    v = np.abs(np.asarray(values)[ids])
    if len(v) < 2:
        return 0.0
    pair = v[:-1] + v[1:]
    return float(v.sum() - pair.max())


def sos2_ok(values, ids, tol: float = SOS_TOL) -> bool:
    nz = np.flatnonzero(np.abs(np.asarray(values)[ids]) > tol)
    return len(nz) <= 1 or (len(nz) == 2 and nz[1] - nz[0] == 1)


def check_solution(
    model: MilpModel,
    values,
    feas_tol: float = FEAS_TOL,
    int_tol: float = INT_TOL,
    sos_tol: float = SOS_TOL,
    cap_tol: float = CAP_TOL,
) -> list[Violation]:
    """Every bound, row, integrality, sos2 and cap violation beyond tolerance."""
    x = np.asarray(values, dtype=float)
    if x.shape != (model.n_vars,):
        raise ValueError(f"expected {model.n_vars} values, got shape {x.shape}")
    out: list[Violation] = []
    lb, ub = np.asarray(model.lb), np.asarray(model.ub)
    for i in range(model.n_vars):
        r = max(lb[i] - x[i], x[i] - ub[i], 0.0)
        if r > feas_tol or not np.isfinite(x[i]):
            out.append(Violation("bound", i, float(r)))
    for k, row in enumerate(model.rows):
        r = row.residual(x)
        if r > feas_tol:
            out.append(Violation("linear", k, r))
    for i, kind in enumerate(model.kind):
        if kind == BINARY:
            r = abs(x[i] - round(x[i]))
            if r > int_tol:
                out.append(Violation("integrality", i, float(r)))
    for k, ids in enumerate(model.sos2_sets):
        if not sos2_ok(x, ids, sos_tol):
            out.append(Violation("sos2", k, sos2_excess(x, ids)))
    for k, cap in enumerate(model.quad_caps):
        r = cap.value(x) - cap.c
        if r > cap_tol:
            out.append(Violation("quad_cap", k, r))
    return out
