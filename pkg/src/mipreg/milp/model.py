"""Sparse MILP model container with sos2 sets and convex quadratic caps."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import BadBounds, InvalidModel, ParseError, UnknownVariable

CONTINUOUS = "continuous"
BINARY = "binary"
LE, EQ, GE = "<=", "=", ">="
RELATIONS = (LE, EQ, GE)

FEAS_TOL = 1e-7
INT_TOL = 1e-6
SOS_TOL = 1e-6
CAP_TOL = 1e-6


@dataclass(frozen=True)
class LinearRow:
    ids: np.ndarray
    coefs: np.ndarray
    relation: str
    rhs: float

    def activity(self, x) -> float:
        return float(self.coefs @ np.asarray(x)[self.ids]) if len(self.ids) else 0.0

    def residual(self, x) -> float:
        """Amount by which ``x`` violates the row (0 when satisfied)."""
        a = self.activity(x)
        if self.relation == LE:
            return max(0.0, a - self.rhs)
        if self.relation == GE:
            return max(0.0, self.rhs - a)
        return abs(a - self.rhs)


@dataclass(frozen=True)
class QuadCap:
    """Convex constraint ``||A @ x[ids] + b||^2 <= c``."""

    ids: np.ndarray
    A: np.ndarray
    b: np.ndarray
    c: float

    def value(self, x) -> float:
        y = self.A @ np.asarray(x)[self.ids] + self.b
        return float(y @ y)

    def tangent_cut(self, x) -> tuple[np.ndarray, np.ndarray, float]:
        """Supporting hyperplane of the cap's ball at the image of ``x``.

        Returns ``(ids, coefs, rhs)`` for ``coefs @ x[ids] <= rhs``, valid for every
        point satisfying the cap and violated by ``x`` whenever ``x`` violates it.
        """
        y = self.A @ np.asarray(x)[self.ids] + self.b
        u = y / np.linalg.norm(y)
        return self.ids, u @ self.A, math.sqrt(self.c) - float(u @ self.b)


def _as_row(row) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(row, dict):
        items = row.items()
    else:
        items = list(row)
    acc: dict[int, float] = {}
    for i, v in items:
        acc[int(i)] = acc.get(int(i), 0.0) + float(v)
    ids = np.fromiter(acc.keys(), dtype=int, count=len(acc))
    coefs = np.fromiter(acc.values(), dtype=float, count=len(acc))
    return ids, coefs


class MilpModel:
    """Minimisation model: bounded variables, linear rows, sos2 sets and quad caps.

    Variable ids are dense consecutive integers in creation order.
    """

    def __init__(self):
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.kind: list[str] = []
        self.names: list[str | None] = []
        self.rows: list[LinearRow] = []
        self.sos2_sets: list[np.ndarray] = []
        self.quad_caps: list[QuadCap] = []
        self.objective: dict[int, float] = {}
        self.objective_constant = 0.0
        # known lower bound on the objective, used to floor node bounds
        self.objective_floor: float | None = None

    # -- construction -----------------------------------------------------
    @property
    def n_vars(self) -> int:
        return len(self.lb)

    def add_variable(self, lb: float = 0.0, ub: float = math.inf, kind: str = CONTINUOUS, name: str | None = None) -> int:
        lb, ub = float(lb), float(ub)
        if kind not in (CONTINUOUS, BINARY):
            raise InvalidModel(f"unknown variable kind {kind!r}")
        if math.isnan(lb) or math.isnan(ub) or lb > ub:
            raise BadBounds(f"lb={lb} ub={ub}")
        if kind == BINARY and (lb < 0.0 or ub > 1.0):
            raise BadBounds(f"binary bounds must lie in [0, 1], got [{lb}, {ub}]")
        self.lb.append(lb)
        self.ub.append(ub)
        self.kind.append(kind)
        self.names.append(name)
        return len(self.lb) - 1

    def add_binary(self, name: str | None = None) -> int:
        return self.add_variable(0.0, 1.0, BINARY, name)

    def _check_ids(self, ids) -> None:
        ids = np.asarray(ids, dtype=int)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_vars):
            bad = ids[(ids < 0) | (ids >= self.n_vars)]
            raise UnknownVariable(f"unknown variable id(s) {bad.tolist()}")

    def add_linear(self, row, relation: str, rhs: float) -> int:
        """Add ``row . x (relation) rhs``; ``row`` is a dict or iterable of (id, coef)."""
        if relation not in RELATIONS:
            raise InvalidModel(f"unknown relation {relation!r}")
        ids, coefs = _as_row(row)
        self._check_ids(ids)
        keep = coefs != 0.0
        self.rows.append(LinearRow(ids[keep], coefs[keep], relation, float(rhs)))
        return len(self.rows) - 1

    def add_sos2(self, ids) -> int:
        ids = np.asarray(list(ids), dtype=int)
        if len(ids) < 3:
            raise InvalidModel("sos2 sets need at least 3 members")
        if len(set(ids.tolist())) != len(ids):
            raise InvalidModel("sos2 members must be distinct")
        self._check_ids(ids)
        self.sos2_sets.append(ids)
        return len(self.sos2_sets) - 1

    def add_quad_cap(self, ids, A, b, c: float) -> int:
        ids = np.asarray(list(ids), dtype=int)
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.asarray(b, dtype=float).ravel()
        self._check_ids(ids)
        if A.shape[1] != len(ids) or A.shape[0] != len(b):
            raise InvalidModel("quad cap dimensions do not match")
        if c < 0:
            raise InvalidModel("quad cap bound must be >= 0")
        self.quad_caps.append(QuadCap(ids, A, b, float(c)))
        return len(self.quad_caps) - 1

    def set_objective(self, row, constant: float = 0.0) -> None:
        ids, coefs = _as_row(row)
        self._check_ids(ids)
        self.objective = {int(i): float(c) for i, c in zip(ids, coefs) if c != 0.0}
        self.objective_constant = float(constant)

    def set_bounds(self, var: int, lb: float, ub: float) -> None:
        self._check_ids([var])
        if lb > ub:
            raise BadBounds(f"lb={lb} ub={ub}")
        if self.kind[var] == BINARY and (lb < 0 or ub > 1):
            raise BadBounds("binary bounds must lie in [0, 1]")
        self.lb[var], self.ub[var] = float(lb), float(ub)

    def copy(self) -> "MilpModel":
        m = MilpModel()
        m.lb, m.ub, m.kind, m.names = list(self.lb), list(self.ub), list(self.kind), list(self.names)
        m.rows = list(self.rows)
        m.sos2_sets = list(self.sos2_sets)
        m.quad_caps = list(self.quad_caps)
        m.objective = dict(self.objective)
        m.objective_constant = self.objective_constant
        m.objective_floor = self.objective_floor
        return m

    # -- evaluation -------------------------------------------------------
    def binary_ids(self) -> np.ndarray:
        return np.array([i for i, k in enumerate(self.kind) if k == BINARY], dtype=int)

    def objective_vector(self) -> np.ndarray:
        c = np.zeros(self.n_vars)
        for i, v in self.objective.items():
            c[i] = v
        return c

    def evaluate(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(sum(v * x[i] for i, v in self.objective.items()) + self.objective_constant)

    def validate(self) -> None:
        for ids in self.sos2_sets:
            if len(ids) < 3:
                raise InvalidModel("sos2 sets need at least 3 members")
            self._check_ids(ids)
        for r in self.rows:
            self._check_ids(r.ids)
        for q in self.quad_caps:
            self._check_ids(q.ids)
        self._check_ids(list(self.objective))
        for i, k in enumerate(self.kind):
            if k == BINARY and (self.lb[i] < 0 or self.ub[i] > 1):
                raise BadBounds(f"binary {i} bounds outside [0, 1]")

    # -- text dump --------------------------------------------------------
    def dumps(self) -> str:
        """Line-oriented text rendering; floats use shortest round-trip repr."""
        r = _num
        out = ["# mipreg milp model v1"]
        for i in range(self.n_vars):
            name = self.names[i]
            out.append(f"var {i} {self.kind[i]} {r(self.lb[i])} {r(self.ub[i])}" + (f" {name}" if name else ""))
        terms = " ".join(f"{i}:{r(v)}" for i, v in sorted(self.objective.items()))
        out.append(f"obj {r(self.objective_constant)}" + (f" {terms}" if terms else ""))
        if self.objective_floor is not None:
            out.append(f"floor {r(self.objective_floor)}")
        for row in self.rows:
            terms = " ".join(f"{i}:{r(v)}" for i, v in zip(row.ids.tolist(), row.coefs.tolist()))
            out.append(f"con {row.relation} {r(row.rhs)}" + (f" {terms}" if terms else ""))
        for s in self.sos2_sets:
            out.append("sos2 " + " ".join(str(i) for i in s.tolist()))
        for q in self.quad_caps:
            parts = [r(q.c), str(len(q.ids)), *map(str, q.ids.tolist()), str(len(q.b)),
                     *map(r, q.b.tolist()), *map(r, q.A.ravel().tolist())]
            out.append("qcap " + " ".join(parts))
        return "\n".join(out) + "\n"

    @classmethod
    def loads(cls, text: str) -> "MilpModel":
        m = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            try:
                if tok[0] == "var":
                    if int(tok[1]) != m.n_vars:
                        raise ValueError("variable ids must be consecutive")
                    m.add_variable(float(tok[3]), float(tok[4]), tok[2], tok[5] if len(tok) > 5 else None)
                elif tok[0] == "obj":
                    m.set_objective(_terms(tok[2:]), float(tok[1]))
                elif tok[0] == "floor":
                    m.objective_floor = float(tok[1])
                elif tok[0] == "con":
                    m.add_linear(_terms(tok[3:]), tok[1], float(tok[2]))
                elif tok[0] == "sos2":
                    m.add_sos2(int(t) for t in tok[1:])
                elif tok[0] == "qcap":
                    c = float(tok[1])
                    n = int(tok[2])
                    ids = [int(t) for t in tok[3:3 + n]]
                    k = int(tok[3 + n])
                    b = [float(t) for t in tok[4 + n:4 + n + k]]
                    a = np.array([float(t) for t in tok[4 + n + k:]]).reshape(k, n)
                    m.add_quad_cap(ids, a, b, c)
                else:
                    raise ValueError(f"unknown record {tok[0]!r}")
            except (ValueError, IndexError) as exc:
                raise ParseError(str(exc), line=lineno) from None
        return m


def _num(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def _terms(tokens) -> list[tuple[int, float]]:
    out = []
    for t in tokens:
        i, v = t.split(":")
        out.append((int(i), float(v)))
    return out
