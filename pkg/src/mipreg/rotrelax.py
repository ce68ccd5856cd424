"""Piecewise-convex relaxation of SO(3) inside a :class:`MilpModel`.

Each entry ``r_ij`` of the relaxed matrix is a convex combination of uniform
breakpoints over [-1, 1] with sos2 weights, which pins an auxiliary ``w_ij`` to
the chord of ``r_ij^2``. Column norms and their pairwise/triple combinations are
capped, and the third row is tied to the cross product of the first two via
McCormick envelopes of six bilinear terms:

    v1 = R13*R22   v2 = R12*R23   v3 = R21*R13
    v4 = R11*R23   v5 = R21*R12   v6 = R11*R22

    R31 = v2 - v1,  R32 = v3 - v4,  R33 = v6 - v5

(1-based indices; rows are ``u1 x u2 = u3``).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import BadBounds, PartitionTooCoarse
from .geom.transforms import project_to_so3
from .milp.model import EQ, GE, LE, MilpModel

DEFAULT_PARTITIONS = 50

# (v index, (row, col) of x, (row, col) of y), 0-based
BILINEAR_TERMS = (
    (0, (0, 2), (1, 1)),
    (1, (0, 1), (1, 2)),
    (2, (1, 0), (0, 2)),
    (3, (0, 0), (1, 2)),
    (4, (1, 0), (0, 1)),
    (5, (0, 0), (1, 1)),
)
# third-row entry (2, j) = v[plus] - v[minus]
THIRD_ROW = ((0, 1, 0), (1, 2, 3), (2, 5, 4))


@dataclass(frozen=True)
class RelaxedRotationBlock:
    r_ids: np.ndarray  # (3, 3)
    w_ids: np.ndarray  # (3, 3)
    lambda_ids: np.ndarray  # (3, 3, n+1)
    v_ids: np.ndarray  # (6,)
    n_partitions: int
    constrain_both: bool = False

    @property
    def breakpoints(self) -> np.ndarray:
        return breakpoints(self.n_partitions)


def breakpoints(n: int) -> np.ndarray:
    k = np.arange(n + 1)
    return (2.0 * k - n) / n


def mccormick_envelope(model: MilpModel, x_id: int, y_id: int, name: str | None = None) -> int:
    """Add ``v ~ x*y`` with the four McCormick inequalities on [-1, 1]^2."""
    for i in (x_id, y_id):
        if model.lb[i] != -1.0 or model.ub[i] != 1.0:
            raise BadBounds(f"variable {i} must have bounds [-1, 1] for the envelope")
    v = model.add_variable(-1.0, 1.0, name=name)
    # under-estimators: v >= x + y - 1, v >= -x - y - 1
    model.add_linear({v: 1.0, x_id: -1.0, y_id: -1.0}, GE, -1.0)
    model.add_linear({v: 1.0, x_id: 1.0, y_id: 1.0}, GE, -1.0)
    # over-estimators: v <= -x + y + 1, v <= x - y + 1
    model.add_linear({v: 1.0, x_id: 1.0, y_id: -1.0}, LE, 1.0)
    model.add_linear({v: 1.0, x_id: -1.0, y_id: 1.0}, LE, 1.0)
    return v


def _caps_on(model: MilpModel, vecs: list[np.ndarray]) -> None:
    """Norm caps on three 3-vectors of variable ids (columns or rows)."""
    eye = np.eye(3)
    for a in vecs:
        model.add_quad_cap(a, eye, np.zeros(3), 1.0)
    for i, j in itertools.combinations(range(3), 2):
        for s in (1.0, -1.0):
            model.add_quad_cap(np.concatenate([vecs[i], vecs[j]]), np.hstack([eye, s * eye]), np.zeros(3), 2.0)
    for s2, s3 in itertools.product((1.0, -1.0), repeat=2):
        model.add_quad_cap(
            np.concatenate(vecs), np.hstack([eye, s2 * eye, s3 * eye]), np.zeros(3), 3.0
        )


def build_rotation_block(model: MilpModel, n_partitions: int = DEFAULT_PARTITIONS, constrain_both: bool = False) -> RelaxedRotationBlock:
    """Add the relaxed-rotation variables and constraints to ``model``."""
    if n_partitions < 2:
        raise PartitionTooCoarse("n_partitions must be >= 2")
    if n_partitions % 2 or n_partitions > 200:
        raise ValueError("n_partitions must be even and at most 200")
    q = breakpoints(n_partitions)
    q2 = q * q
    r_ids = np.empty((3, 3), dtype=int)
    w_ids = np.empty((3, 3), dtype=int)
    lam = np.empty((3, 3, n_partitions + 1), dtype=int)
    for i in range(3):
        for j in range(3):
            r = model.add_variable(-1.0, 1.0, name=f"R{i}{j}")
            w = model.add_variable(0.0, 1.0, name=f"W{i}{j}")
            ls = [model.add_variable(0.0, 1.0, name=f"L{i}{j}_{k}") for k in range(n_partitions + 1)]
            model.add_linear([(r, 1.0)] + [(l, -qk) for l, qk in zip(ls, q)], EQ, 0.0)
            model.add_linear([(w, 1.0)] + [(l, -qk) for l, qk in zip(ls, q2)], EQ, 0.0)
            model.add_linear([(l, 1.0) for l in ls], EQ, 1.0)
            model.add_sos2(ls)
            r_ids[i, j], w_ids[i, j] = r, w
            lam[i, j] = ls
    # the chord overshoots x^2 by at most h^2/4 = 1/n^2, so a unit vector has
    # 1 <= sum of chords <= 1 + 3/n^2
    w_hi = 1.0 + 3.0 / n_partitions**2
    for c in range(3):
        model.add_linear([(w_ids[i, c], 1.0) for i in range(3)], GE, 1.0)
        model.add_linear([(w_ids[i, c], 1.0) for i in range(3)], LE, w_hi)
    _caps_on(model, [r_ids[:, c] for c in range(3)])
    if constrain_both:
        for i in range(3):
            model.add_linear([(w_ids[i, c], 1.0) for c in range(3)], GE, 1.0)
            model.add_linear([(w_ids[i, c], 1.0) for c in range(3)], LE, w_hi)
        _caps_on(model, [r_ids[i, :] for i in range(3)])
    v_ids = np.empty(6, dtype=int)
    for k, a, b in BILINEAR_TERMS:
        v_ids[k] = mccormick_envelope(model, r_ids[a], r_ids[b], name=f"V{k + 1}")
    for col, plus, minus in THIRD_ROW:
        model.add_linear({r_ids[2, col]: 1.0, v_ids[plus]: -1.0, v_ids[minus]: 1.0}, EQ, 0.0)
    return RelaxedRotationBlock(r_ids, w_ids, lam, v_ids, n_partitions, constrain_both)


def interval_weights(value: float, n: int) -> tuple[int, float]:
    """Locate ``value`` in the breakpoint grid: returns (k, t) with
    ``value = (1 - t) q_k + t q_{k+1}``."""
    x = float(np.clip(value, -1.0, 1.0))
    k = int(np.floor((x + 1.0) * n / 2.0))
    k = min(max(k, 0), n - 1)
    q = breakpoints(n)
    t = (x - q[k]) / (q[k + 1] - q[k])
    return k, float(np.clip(t, 0.0, 1.0))


def chord_square(value: float, n: int) -> float:
    """The piecewise-linear interpolant of ``x^2`` on the breakpoint grid."""
    k, t = interval_weights(value, n)
    q = breakpoints(n)
    return (1.0 - t) * q[k] ** 2 + t * q[k + 1] ** 2


def encode_rotation(block: RelaxedRotationBlock, r_prime, values: np.ndarray) -> np.ndarray:
    """Write a (true or relaxed) matrix into ``values``: r, sos2 weights, chord
    squares and exact bilinear products. Returns ``values`` for chaining."""
    m = np.clip(np.asarray(r_prime, dtype=float), -1.0, 1.0)
    n = block.n_partitions
    q = breakpoints(n)
    for i in range(3):
        for j in range(3):
            k, t = interval_weights(m[i, j], n)
            lam = block.lambda_ids[i, j]
            values[lam] = 0.0
            values[lam[k]] = 1.0 - t
            values[lam[k + 1]] = t
            values[block.r_ids[i, j]] = (1.0 - t) * q[k] + t * q[k + 1]
            values[block.w_ids[i, j]] = (1.0 - t) * q[k] ** 2 + t * q[k + 1] ** 2
    for k, a, b in BILINEAR_TERMS:
        values[block.v_ids[k]] = values[block.r_ids[a]] * values[block.r_ids[b]]
    return values


def extract_rotation(block: RelaxedRotationBlock, values) -> tuple[np.ndarray, np.ndarray, float]:
    """Raw relaxed matrix, its nearest rotation, and their Frobenius distance."""
    raw = np.asarray(values, dtype=float)[block.r_ids]
    proj = project_to_so3(raw)
    return raw, proj, float(np.linalg.norm(raw - proj))
