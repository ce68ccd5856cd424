"""Local refinement: weighted Kabsch, ICP, trimmed ICP and a Mahalanobis ICP.

The Mahalanobis variant matches each sensor point against the model under the
combined covariance ``Sigma_m + R Sigma_s R^T`` and updates the pose by
Gauss-Newton steps on the small-angle parametrisation ``R = exp([w]) R0`` with
step halving. It stands in for IMLP-style refinement; it is not a
reimplementation of any published IMLP code.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfiguration, MissingCovariances
from .geom.clouds import PointCloud, nearest_neighbors
from .geom.transforms import RigidTransform, axis_angle_to_matrix

log = logging.getLogger(__name__)

EUCLIDEAN = "euclidean"
MAHALANOBIS = "mahalanobis"


@dataclass
class IcpOptions:
    max_iterations: int = 100
    convergence_tol: float = 1e-8
    trim_fraction: float = 0.0
    metric: str = EUCLIDEAN
    # drop pairs further apart than this (Euclidean, model frame); None keeps all
    reject_distance: float | None = None
    # drop pairs whose metric residual (whitened for mahalanobis) exceeds this
    reject_residual: float | None = None
    # Euclidean prefilter size for Mahalanobis matching
    mahalanobis_candidates: int = 16
    gauss_newton_steps: int = 5

    def __post_init__(self):
        if not 0.0 <= self.trim_fraction < 1.0:
            raise ValueError("trim_fraction must lie in [0, 1)")
        if self.metric not in (EUCLIDEAN, MAHALANOBIS):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class RefinementResult:
    pose: RigidTransform
    iterations: int
    final_mean_residual: float  # RMS of matched (whitened) residuals
    converged: bool
    correspondences: np.ndarray | None = None
    # per iteration: (rms before update, rms after update), same pairs
    history: list[tuple[float, float]] = field(default_factory=list)


def kabsch_weighted(source_pts, target_pts, weights=None) -> RigidTransform:
    """Rigid transform minimising ``sum w_i |R p_i + t - q_i|^2``."""
    p = np.asarray(source_pts, dtype=float).reshape(-1, 3)
    q = np.asarray(target_pts, dtype=float).reshape(-1, 3)
    if p.shape != q.shape:
        raise ValueError("source and target need the same shape")
    w = np.ones(len(p)) if weights is None else np.asarray(weights, dtype=float).ravel()
    if len(w) != len(p):
        raise ValueError("one weight per pair")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and >= 0")
    support = w > 0
    if support.sum() < 3:
        raise DegenerateConfiguration("need at least 3 pairs with positive weight")
    w = w / w.sum()
    pc = w @ p
    qc = w @ q
    dp = (p - pc) * np.sqrt(w)[:, None]
    dq = (q - qc) * np.sqrt(w)[:, None]
    sv = np.linalg.svd(dp, compute_uv=False)
    scale = max(sv[0], 1e-300)
    if sv[0] < 1e-12 or sv[1] < 1e-9 * scale:
        raise DegenerateConfiguration("weighted source points are coincident or collinear")
    h = dp.T @ dq
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, qc - r @ pc)


def _combined_precision(source: PointCloud, target: PointCloud, rot, src_idx, tgt_idx):
    """Inverse of ``Sigma_m[j] + R Sigma_s[i] R^T`` for each pair."""
    c = target.covariances[tgt_idx] + np.einsum("ab,...bc,dc->...ad", rot, source.covariances[src_idx], rot)
    return np.linalg.inv(c)


def _check_covariances(source: PointCloud, target: PointCloud) -> None:
    if not (source.has_covariances and target.has_covariances):
        raise MissingCovariances("mahalanobis ICP needs covariances on both clouds")


def _correspond(source: PointCloud, target: PointCloud, pose: RigidTransform, opt: IcpOptions):
    """Matches for every source point: (target index, squared residual, precision or None)."""
    posed = pose.apply(source.points)
    if opt.metric == EUCLIDEAN:
        idx, dist = nearest_neighbors(posed, target.points, 1)
        return idx[:, 0], dist[:, 0] ** 2, None, dist[:, 0]
    k = min(opt.mahalanobis_candidates, len(target))
    cand, edist = nearest_neighbors(posed, target.points, k)
    n = len(posed)
    src = np.repeat(np.arange(n)[:, None], k, axis=1)
    prec = _combined_precision(source, target, pose.rotation, src, cand)
    r = posed[:, None, :] - target.points[cand]
    d2 = np.einsum("nka,nkab,nkb->nk", r, prec, r)
    # candidates come sorted by Euclidean distance then index; pick the lowest
    # index among exact Mahalanobis ties
    best = np.empty(n, dtype=int)
    for i in range(n):
        m = d2[i].min()
        tie = np.flatnonzero(d2[i] <= m)
        best[i] = tie[np.argmin(cand[i, tie])]
    rows = np.arange(n)
    return cand[rows, best], d2[rows, best], prec[rows, best], edist[rows, best]


def _select(d2, edist, opt: IcpOptions) -> np.ndarray:
    keep = np.ones(len(d2), dtype=bool)
    if opt.reject_distance is not None:
        keep &= edist <= opt.reject_distance
    if opt.reject_residual is not None:
        keep &= d2 <= opt.reject_residual**2
    if keep.sum() < 3:
        keep[np.argsort(d2, kind="stable")[:3]] = True
    if opt.trim_fraction > 0.0:
        idx = np.flatnonzero(keep)
        n_keep = max(3, int(math.ceil((1.0 - opt.trim_fraction) * len(idx))))
        order = idx[np.argsort(d2[idx], kind="stable")]
        keep = np.zeros(len(d2), dtype=bool)
        keep[order[:n_keep]] = True
    return keep


def _weighted_sse(pose: RigidTransform, src, tgt, prec) -> float:
    r = pose.apply(src) - tgt
    if prec is None:
        return float(np.einsum("na,na->", r, r))
    return float(np.einsum("na,nab,nb->", r, prec, r))


def gauss_newton_step(pose: RigidTransform, src, tgt, prec, steps: int = 5) -> RigidTransform:
    """Minimise ``sum r_i^T P_i r_i`` over the pose with pairs and ``P`` frozen.

    Each accepted step does not increase the objective (step halving).
    """
    cur = _weighted_sse(pose, src, tgt, prec)
    for _ in range(steps):
        p = src @ pose.rotation.T
        r = p + pose.translation - tgt
        # d r / d(w, t) = [-[p]x, I]
        J = np.zeros((len(p), 3, 6))
        J[:, 0, 1], J[:, 0, 2] = p[:, 2], -p[:, 1]
        J[:, 1, 0], J[:, 1, 2] = -p[:, 2], p[:, 0]
        J[:, 2, 0], J[:, 2, 1] = p[:, 1], -p[:, 0]
        J[:, :, 3:] = np.eye(3)
        PJ = np.einsum("nab,nbc->nac", prec, J)
        H = np.einsum("nai,naj->ij", J, PJ)
        g = np.einsum("nai,na->i", PJ, r)
        delta = -np.linalg.lstsq(H, g, rcond=None)[0]
        step = 1.0
        accepted = False
        for _halving in range(40):
            w = step * delta[:3]
            ang = np.linalg.norm(w)
            rot = axis_angle_to_matrix(w, ang) @ pose.rotation
            cand = RigidTransform(rot, pose.translation + step * delta[3:])
            val = _weighted_sse(cand, src, tgt, prec)
            if val <= cur:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        gain = cur - val
        pose, cur = cand, val
        if gain <= 1e-15 * max(cur, 1.0):
            break
    return pose


def icp(source: PointCloud, target: PointCloud, init: RigidTransform | None = None, options: IcpOptions | None = None) -> RefinementResult:
    """Refine the sensor->model pose ``init`` by alternating matching and alignment."""
    opt = options or IcpOptions()
    if len(source) == 0 or len(target) == 0:
        raise ValueError("both clouds must be nonempty")
    if opt.metric == MAHALANOBIS:
        _check_covariances(source, target)
    pose = init or RigidTransform.identity()
    history = []
    last = None
    converged = False
    corr = None
    it = 0
    for it in range(1, opt.max_iterations + 1):
        corr, d2, prec, edist = _correspond(source, target, pose, opt)
        keep = _select(d2, edist, opt)
        src = source.points[keep]
        tgt = target.points[corr[keep]]
        p = None if prec is None else prec[keep]
        n = len(src)
        before = math.sqrt(_weighted_sse(pose, src, tgt, p) / n)
        if p is None:
            new = kabsch_weighted(src, tgt)
        else:
            new = gauss_newton_step(pose, src, tgt, p, opt.gauss_newton_steps)
        after = math.sqrt(_weighted_sse(new, src, tgt, p) / n)
        if after > before:
            # Kabsch is optimal for the frozen pairs; only rounding lands here
            new, after = pose, before
        history.append((before, after))
        pose = new
        ref = before if last is None else last
        last = after
        if abs(ref - after) < opt.convergence_tol:
            converged = True
            break
    return RefinementResult(pose, it, last, converged, corr, history)


def matched_rms(source: PointCloud, target: PointCloud, pose: RigidTransform, options: IcpOptions | None = None) -> float:
    """RMS residual of the matching that ``icp`` would use at ``pose``."""
    opt = options or IcpOptions()
    corr, d2, _, edist = _correspond(source, target, pose, opt)
    keep = _select(d2, edist, opt)
    return float(math.sqrt(d2[keep].mean()))


def subsample(cloud: PointCloud, count: int | None, seed: int = 0) -> PointCloud:
    """Uniform random subset without replacement, in original order."""
    if count is None or count >= len(cloud):
        return cloud
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(cloud), size=count, replace=False))
    return cloud.subset(idx)


class IcpHeuristic:
    """Milp heuristic factory: refine the pose of an LP/incumbent point by ICP
    and hand back a re-encoded feasible point when it improves.

    Pass an instance as ``heuristic`` to :func:`mipreg.regmip.solve_registration`.
    """

    is_factory = True

    def __init__(self, target_model: PointCloud, options: IcpOptions | None = None,
                 sensor: PointCloud | None = None, n_sensor: int = 300, n_model: int = 500, seed: int = 0):
        self.target = subsample(target_model, n_model, seed)
        self.sensor = None if sensor is None else subsample(sensor, n_sensor, seed + 1)
        self.options = options or IcpOptions(max_iterations=30)
        self.n_sensor = n_sensor
        self.seed = seed
        self.calls = 0
        self.improvements = 0

    def __call__(self, problem, model, vmap):
        from . import regmip

        sensor = self.sensor if self.sensor is not None else subsample(problem.sensor, self.n_sensor, self.seed + 1)

        def cb(x):
            self.calls += 1
            try:
                pose, _, _ = regmip.decode_solution(vmap, x)
            except Exception:
                return None
            start = regmip.encode_pose(problem, model, vmap, pose)
            try:
                refined = icp(sensor, self.target, pose, self.options).pose
            except DegenerateConfiguration:
                return None
            y = regmip.encode_pose(problem, model, vmap, refined)
            if y is None:
                return None
            if start is not None and model.evaluate(y) >= model.evaluate(start) - 1e-12:
                return None
            self.improvements += 1
            return y

        return cb


def heuristic_from_icp(target_model: PointCloud, options: IcpOptions | None = None, **kwargs) -> IcpHeuristic:
    return IcpHeuristic(target_model, options, **kwargs)
