"""Registration MILPs: Euclidean and Mahalanobis L1 objectives with outlier flags.

The model searches for ``(R', t')`` mapping sampled model points onto sensor
points, so that residuals ``R' m_j + t' - s_i`` live in the sensor frame where
the sensor covariances are expressed. Poses are reported sensor->model.
"""
from __future__ import annotations

import configparser
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .errors import EmptyBand, InfeasibleModel, MissingCovariances, Singular
from .geom.clouds import PointCloud, nearest_neighbors
from .geom.transforms import RigidTransform, convert_prime_pose, whitening_factor
from .milp import BINARY, EQ, GE, MilpModel, SolveOptions, branch_and_bound
from .milp.bnb import STATUS_INFEASIBLE, STATUS_UNBOUNDED, MilpSolution
from .rotrelax import RelaxedRotationBlock, build_rotation_block, encode_rotation, extract_rotation

log = logging.getLogger(__name__)

EUCLIDEAN = "euclidean"
MAHALANOBIS = "mahalanobis"
OUTLIER = -1


@dataclass
class RegistrationOptions:
    phi_max: float = 1000.0
    gamma: float | None = None  # None: use big_m, fully releasing outlier rows
    big_m: float = 1e4
    allow_outliers: bool = True
    metric: str = MAHALANOBIS
    n_partitions: int = 50
    translation_bound: float | None = None
    constrain_both: bool = False
    objective_shift: float = 0.0
    # shrink each big-M row to the residual's range over the variable box
    tighten_big_m: bool = True

    @property
    def gamma_value(self) -> float:
        return self.big_m if self.gamma is None else float(self.gamma)


@dataclass
class MipRegistrationProblem:
    sensor: PointCloud
    model_points: PointCloud
    band: np.ndarray | None = None
    options: RegistrationOptions = field(default_factory=RegistrationOptions)

    def validate(self) -> None:
        o = self.options
        if o.metric not in (EUCLIDEAN, MAHALANOBIS):
            raise ValueError(f"unknown metric {o.metric!r}")
        if o.phi_max <= 0:
            raise ValueError("phi_max must be > 0")
        if o.big_m < o.phi_max:
            raise ValueError("big_m must be >= phi_max")
        if o.metric == MAHALANOBIS and not self.sensor.has_covariances:
            raise MissingCovariances("mahalanobis metric needs sensor covariances")
        if len(self.sensor) == 0 or len(self.model_points) == 0:
            raise ValueError("sensor and model clouds must be nonempty")
        if self.band is not None:
            band = np.asarray(self.band)
            if band.ndim != 2 or band.shape[0] != len(self.sensor):
                raise ValueError("band must have one row per sensor point")
            if band.size and (band.min() < 0 or band.max() >= len(self.model_points)):
                raise ValueError("band index out of range")

    def candidates(self, i: int) -> np.ndarray:
        if self.band is None:
            return np.arange(len(self.model_points))
        row = np.asarray(self.band[i], dtype=int)
        _, first = np.unique(row, return_index=True)
        return row[np.sort(first)]

    def whiteners(self) -> np.ndarray:
        n = len(self.sensor)
        if self.options.metric == EUCLIDEAN:
            return np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        return np.array([whitening_factor(c) for c in self.sensor.covariances])

    def translation_bound(self) -> float:
        if self.options.translation_bound is not None:
            return float(self.options.translation_bound)
        pts = self.model_points.points
        diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
        # |t'| = |s - R' m| <= max|s| + max|m| for any matched pair, so clouds
        # far from the origin still fit
        s = np.linalg.norm(self.sensor.points, axis=1).max()
        m = np.linalg.norm(pts, axis=1).max()
        return max(2.0 * diag, float(s + m)) + 1e-6


@dataclass
class VariableMap:
    block: RelaxedRotationBlock
    t_ids: np.ndarray
    phi_ids: np.ndarray
    alpha_ids: np.ndarray  # (n_S, 3)
    o_ids: np.ndarray  # (n_S,), -1 when outliers are disabled
    c_ids: list[np.ndarray]
    candidates: list[np.ndarray]
    whiteners: np.ndarray
    row_m: list[np.ndarray]  # per sensor point: (n_cand, 3) big-M used in each row pair
    row_gamma: list[np.ndarray]


@dataclass
class MipRegistrationResult:
    pose: RigidTransform
    raw_rotation_distance: float
    assignment: np.ndarray
    objective: float
    relaxed_objective: float
    lower_bound: float
    gap: float
    status: str
    candidates: list[tuple[RigidTransform, float]]
    node_count: int
    wall_time_s: float
    solution: MilpSolution | None = None
    # exact objective of each candidate (projected pose, cheapest in-band assignment)
    candidate_true_objectives: list[float] = field(default_factory=list)

    @property
    def best_true_candidate(self) -> tuple[RigidTransform, float]:
        """Candidate pose with the lowest exact objective; the relaxed ranking can
        favour matrices far from SO(3) whose projection fits poorly."""
        k = int(np.argmin(self.candidate_true_objectives))
        return self.candidates[k][0], self.candidate_true_objectives[k]

    @property
    def outliers(self) -> np.ndarray:
        return np.flatnonzero(self.assignment == OUTLIER)


def restrict_band(sensor: PointCloud, model_points: PointCloud, approx_pose: RigidTransform, band_width: int) -> np.ndarray:
    """Indices of the ``band_width`` model points nearest each posed sensor point."""
    if band_width < 1 or band_width > len(model_points):
        raise ValueError("band_width must lie in [1, number of model points]")
    idx, _ = nearest_neighbors(approx_pose.apply(sensor.points), model_points.points, band_width)
    return idx


def build_model(problem: MipRegistrationProblem) -> tuple[MilpModel, RelaxedRotationBlock, VariableMap]:
    problem.validate()
    o = problem.options
    n_s = len(problem.sensor)
    cands = [problem.candidates(i) for i in range(n_s)]
    if not o.allow_outliers:
        empty = [i for i, c in enumerate(cands) if len(c) == 0]
        if empty:
            raise EmptyBand(f"sensor point(s) {empty} have no candidates and outliers are disabled")
    W = problem.whiteners()
    model = MilpModel()
    block = build_rotation_block(model, o.n_partitions, o.constrain_both)
    tb = problem.translation_bound()
    t_ids = np.array([model.add_variable(-tb, tb, name=f"T{a}") for a in range(3)])
    M = o.big_m
    r = block.r_ids
    phi_ids = np.empty(n_s, dtype=int)
    alpha_ids = np.empty((n_s, 3), dtype=int)
    o_ids = np.full(n_s, -1, dtype=int)
    c_ids, row_m, row_gamma = [], [], []
    for i in range(n_s):
        phi = model.add_variable(0.0, np.inf, name=f"phi{i}")
        alpha = [model.add_variable(0.0, np.inf, name=f"alpha{i}_{k}") for k in range(3)]
        phi_ids[i] = phi
        alpha_ids[i] = alpha
        model.add_linear([(phi, 1.0)] + [(a, -1.0) for a in alpha], GE, 0.0)
        if o.allow_outliers:
            oi = model.add_variable(0.0, 1.0, BINARY, name=f"o{i}")
            o_ids[i] = oi
            model.add_linear({phi: 1.0, oi: -o.phi_max}, GE, 0.0)
        cs = np.array([model.add_variable(0.0, 1.0, BINARY, name=f"C{i}_{j}") for j in cands[i]], dtype=int)
        c_ids.append(cs)
        assign = [(c, 1.0) for c in cs]
        if o.allow_outliers:
            assign.append((o_ids[i], 1.0))
        model.add_linear(assign, EQ, 1.0)
        Wi = W[i]
        si = problem.sensor.points[i]
        ws = Wi @ si
        pts = problem.model_points.points[cands[i]]
        # |e_k| <= sum_a |W_ka| (sum_b |m_b| + tb + |s_a|) anywhere in the box
        ebound = (np.abs(pts).sum(axis=1)[:, None] + tb + np.abs(si)[None, :]) @ np.abs(Wi).T
        mrow = np.minimum(M, ebound) if o.tighten_big_m else np.full(ebound.shape, M)
        grow = mrow if o.gamma is None else np.full(ebound.shape, float(o.gamma))
        row_m.append(mrow)
        row_gamma.append(grow)
        for jj, (c, m) in enumerate(zip(cs, pts)):
            for k in range(3):
                # e_k = sum_ab W[k,a] m[b] R'_ab + sum_a W[k,a] t'_a - (W s)_k
                lin = [(r[a, b], Wi[k, a] * m[b]) for a in range(3) for b in range(3)]
                lin += [(t_ids[a], Wi[k, a]) for a in range(3)]
                mk = mrow[jj, k]
                for sign in (1.0, -1.0):
                    # alpha_k >= sign * e_k - M (1 - C) - gamma o
                    row = [(alpha[k], 1.0), (c, -mk)] + [(v, -sign * coef) for v, coef in lin]
                    if o.allow_outliers:
                        row.append((o_ids[i], grow[jj, k]))
                    model.add_linear(row, GE, -sign * ws[k] - mk)
    model.set_objective({int(p): 1.0 / n_s for p in phi_ids}, o.objective_shift)
    model.objective_floor = o.objective_shift
    vmap = VariableMap(block, t_ids, phi_ids, alpha_ids, o_ids, c_ids, cands, W, row_m, row_gamma)
    return model, block, vmap


def residual_costs(pose: RigidTransform, sensor_points, model_points, whiteners, chunk: int = 256) -> np.ndarray:
    """Whitened L1 residual for every (sensor, model) pair: shape (n_S, n_M).

    The residual ``R' m + t' - s`` equals ``R^T (m - (R s + t))``.
    """
    s = np.asarray(sensor_points, dtype=float)
    m = np.asarray(model_points, dtype=float)
    rt = pose.rotation.T
    posed = pose.apply(s)
    out = np.empty((len(s), len(m)))
    for a in range(0, len(s), chunk):
        d = m[None, :, :] - posed[a:a + chunk, None, :]  # model frame
        e = d @ rt.T  # into the sensor frame
        we = np.einsum("ikl,ijl->ijk", whiteners[a:a + chunk], e)
        out[a:a + chunk] = np.abs(we).sum(axis=2)
    return out


def best_assignment(pose, sensor, model_points, metric=MAHALANOBIS, phi_max=1000.0, allow_outliers=True, candidates=None):
    """Cheapest match per sensor point; returns (assignment, per-point cost)."""
    W = _whiteners(sensor, metric)
    costs = residual_costs(pose, sensor.points, model_points.points, W)
    if candidates is not None:
        mask = np.full(costs.shape, np.inf)
        for i, c in enumerate(candidates):
            mask[i, c] = 0.0
        costs = costs + mask
    j = np.argmin(costs, axis=1)
    cost = costs[np.arange(len(j)), j]
    assign = j.astype(int)
    if allow_outliers:
        out = cost > phi_max
        assign[out] = OUTLIER
        cost = np.where(out, phi_max, cost)
    return assign, cost


def _whiteners(sensor: PointCloud, metric: str) -> np.ndarray:
    if metric == EUCLIDEAN:
        return np.broadcast_to(np.eye(3), (len(sensor), 3, 3))
    if not sensor.has_covariances:
        raise MissingCovariances("mahalanobis metric needs sensor covariances")
    return np.array([whitening_factor(c) for c in sensor.covariances])


def true_objective(pose: RigidTransform, sensor: PointCloud, model_points: PointCloud, assignment, metric=MAHALANOBIS, phi_max=1000.0) -> float:
    """Unrelaxed objective: mean of whitened L1 residuals, ``phi_max`` per outlier."""
    assignment = np.asarray(assignment, dtype=int)
    if len(assignment) != len(sensor):
        raise ValueError("assignment needs one entry per sensor point")
    W = _whiteners(sensor, metric)
    rt = pose.rotation.T
    posed = pose.apply(sensor.points)
    total = 0.0
    for i, j in enumerate(assignment):
        if j == OUTLIER:
            total += phi_max
            continue
        e = rt @ (model_points.points[j] - posed[i])
        total += float(np.abs(W[i] @ e).sum())
    return total / len(sensor)


def registration_objective(pose, sensor, model_points, metric=MAHALANOBIS, phi_max=1000.0, allow_outliers=True) -> tuple[float, np.ndarray]:
    """Objective at ``pose`` with the cheapest assignment over all model points."""
    assign, cost = best_assignment(pose, sensor, model_points, metric, phi_max, allow_outliers)
    return float(cost.mean()), assign


def encode_pose(problem: MipRegistrationProblem, model: MilpModel, vmap: VariableMap, pose: RigidTransform) -> np.ndarray | None:
    """A feasible MILP point realising ``pose`` with its cheapest in-band assignment.

    Returns None when the pose cannot be represented (translation outside the
    box, or a residual too large for the big-M rows).
    """
    o = problem.options
    r_prime = pose.rotation.T
    t_prime = -r_prime @ pose.translation
    tb = problem.translation_bound()
    if np.any(np.abs(t_prime) > tb):
        return None
    x = np.zeros(model.n_vars)
    encode_rotation(vmap.block, r_prime, x)
    # the encoded matrix differs from r_prime only by rounding; use what the model sees
    r_enc = x[vmap.block.r_ids]
    x[vmap.t_ids] = t_prime
    s = problem.sensor.points
    for i in range(len(s)):
        cands = vmap.candidates[i]
        if len(cands) == 0:
            if o.allow_outliers:
                x[vmap.o_ids[i]] = 1.0
                x[vmap.phi_ids[i]] = o.phi_max
                continue
            return None
        res = problem.model_points.points[cands] @ r_enc.T + t_prime - s[i]
        wres = res @ vmap.whiteners[i].T
        l1 = np.abs(wres).sum(axis=1)
        best = int(np.argmin(l1))
        mrow = vmap.row_m[i]
        if o.allow_outliers and l1[best] > o.phi_max:
            x[vmap.o_ids[i]] = 1.0
            x[vmap.phi_ids[i]] = o.phi_max
            if np.any(np.abs(wres) > mrow + vmap.row_gamma[i]):
                return None
            continue
        alpha = np.abs(wres[best])
        slack = np.abs(wres) - mrow
        slack[best] = -np.inf
        if np.any(slack > alpha[None, :]):
            return None
        x[vmap.c_ids[i][best]] = 1.0
        x[vmap.alpha_ids[i]] = alpha
        x[vmap.phi_ids[i]] = alpha.sum()
    return x


def decode_solution(vmap: VariableMap, values) -> tuple[RigidTransform, float, np.ndarray]:
    """Pose (sensor->model, projected onto SO(3)), projection distance, assignment."""
    x = np.asarray(values, dtype=float)
    _, proj, dist = extract_rotation(vmap.block, x)
    pose = convert_prime_pose(proj, x[vmap.t_ids])
    assign = np.full(len(vmap.phi_ids), OUTLIER, dtype=int)
    for i, cs in enumerate(vmap.c_ids):
        if len(cs):
            k = int(np.argmax(x[cs]))
            if x[cs[k]] > 0.5:
                assign[i] = int(vmap.candidates[i][k])
    return pose, dist, assign


def rounding_heuristic(problem: MipRegistrationProblem, model: MilpModel, vmap: VariableMap):
    """Snap an LP point onto a feasible one: project the rotation, keep t',
    and re-pick the cheapest in-band assignment."""

    def cb(x):
        try:
            pose, _, _ = decode_solution(vmap, x)
        except Singular:
            return None
        return encode_pose(problem, model, vmap, pose)

    return cb


def solve_registration(
    problem: MipRegistrationProblem,
    solve_options: SolveOptions | None = None,
    heuristic=None,
    initial_poses=(),
) -> MipRegistrationResult:
    """Build and solve the registration MILP; ``heuristic`` is either a milp
    heuristic callback or a factory ``f(problem, model, vmap) -> callback``."""
    model, block, vmap = build_model(problem)
    opts = replace(solve_options) if solve_options is not None else SolveOptions()
    if heuristic is not None:
        cb = heuristic(problem, model, vmap) if getattr(heuristic, "is_factory", False) else heuristic
        opts.heuristic = cb
    seeds = list(opts.initial_solutions)
    for p in initial_poses:
        x = encode_pose(problem, model, vmap, p)
        if x is not None:
            seeds.append(x)
    opts.initial_solutions = seeds
    if opts.rounding is None:
        opts.rounding = rounding_heuristic(problem, model, vmap)
    sol = branch_and_bound(model, opts)
    if sol.values is None:
        if sol.status in (STATUS_INFEASIBLE, STATUS_UNBOUNDED):
            raise InfeasibleModel(f"registration model is {sol.status.lower()}; check band width and outlier settings")
        raise InfeasibleModel(f"no feasible point found before the solver stopped ({sol.status})")
    o = problem.options
    pose, dist, assign = decode_solution(vmap, sol.values)
    obj = true_objective(pose, problem.sensor, problem.model_points, assign, o.metric, o.phi_max)
    candidates, true_objs = [], []
    for values, rel in sol.incumbents:
        p, _, _ = decode_solution(vmap, values)
        candidates.append((p, rel))
        _, cost = best_assignment(p, problem.sensor, problem.model_points, o.metric, o.phi_max,
                                  o.allow_outliers, vmap.candidates)
        true_objs.append(float(cost.mean()))
    return MipRegistrationResult(
        pose=pose,
        raw_rotation_distance=dist,
        assignment=assign,
        objective=obj,
        relaxed_objective=sol.objective,
        lower_bound=sol.lower_bound,
        gap=sol.gap,
        status=sol.status,
        candidates=candidates,
        node_count=sol.node_count,
        wall_time_s=sol.wall_time_s,
        solution=sol,
        candidate_true_objectives=true_objs,
    )


# -- problem manifests -----------------------------------------------------
def save_problem(path, sensor_path, model_path, options: RegistrationOptions, band_path=None) -> None:
    cfg = configparser.ConfigParser()
    cfg["problem"] = {"sensor": str(sensor_path), "model": str(model_path)}
    if band_path:
        cfg["problem"]["band"] = str(band_path)
    cfg["options"] = {k: "" if v is None else str(v) for k, v in asdict(options).items()}
    with open(path, "w", encoding="utf-8") as fh:
        cfg.write(fh)


def parse_options(section, base: RegistrationOptions | None = None) -> RegistrationOptions:
    base = base or RegistrationOptions()
    kw = {}
    for f in fields(RegistrationOptions):
        if f.name not in section:
            continue
        raw = section[f.name].strip()
        cur = getattr(base, f.name)
        if raw == "" or raw.lower() == "none":
            kw[f.name] = None
        elif isinstance(cur, bool):
            kw[f.name] = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(cur, int) and not isinstance(cur, bool):
            kw[f.name] = int(raw)
        elif isinstance(cur, float) or cur is None:
            kw[f.name] = float(raw)
        else:
            kw[f.name] = raw
    return replace(base, **kw)


def load_problem(path) -> MipRegistrationProblem:
    from .geom.io import read_cloud

    cfg = configparser.ConfigParser()
    if not cfg.read(path, encoding="utf-8"):
        raise FileNotFoundError(path)
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    sec = cfg["problem"]
    sensor = read_cloud(resolve(sec["sensor"]))
    model_points = read_cloud(resolve(sec["model"]))
    band = None
    if sec.get("band"):
        band = np.loadtxt(resolve(sec["band"]), dtype=int, ndmin=2)
    opts = parse_options(cfg["options"]) if cfg.has_section("options") else RegistrationOptions()
    return MipRegistrationProblem(sensor, model_points, band, opts)
