"""Three-stage registration: APE, RN and LDR.

APE solves the Euclidean MIP on a small random sensor subset with an ICP
heuristic. RN restricts correspondences to a band around the APE pose and
solves the Mahalanobis MIP, collecting a pool of distinct incumbents. LDR
refines every pooled pose with Mahalanobis ICP on the full sensor cloud and
keeps the best.

All stages are scored with one function, :func:`pipeline_objective`: the
Mahalanobis L1 objective over the full sensor cloud with the cheapest
assignment among all model points. A stage never hands on a pose that scores
worse than the one it received.
"""
from __future__ import annotations

import configparser
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, DegenerateConfiguration, MipRegError, StageError
from .geom.clouds import PointCloud
from .geom.metrics import metrics, rotation_error_deg
from .geom.transforms import RigidTransform
from .localref import MAHALANOBIS, IcpHeuristic, IcpOptions, icp, subsample
from .milp import SolveOptions
from .regmip import (
    EUCLIDEAN,
    OUTLIER,
    MipRegistrationProblem,
    RegistrationOptions,
    best_assignment,
    restrict_band,
    solve_registration,
)

log = logging.getLogger(__name__)

APE, RN, LDR = "APE", "RN", "LDR"
ALL_STAGES = (APE, RN, LDR)


@dataclass
class PipelineConfig:
    ape_subsample: int = 20
    ape_time_limit_s: float = 300.0
    ape_node_limit: int | None = None
    # Euclidean outlier threshold for APE; None converts phi_max to length units
    # with the median sensor standard deviation so both stages agree
    ape_phi_max: float | None = None
    # extra seeded rotation starts injected into the APE solve (0 disables)
    ape_starts: int = 512
    band_width: int = 20
    rn_subsample: int | None = 50
    rn_time_limit_s: float = 300.0
    rn_node_limit: int | None = None
    candidate_pool: int = 5
    n_partitions: int = 50
    phi_max: float = 1000.0
    big_m: float = 1e4
    heuristic_node_interval: int = 50
    heuristic_sensor: int = 300
    heuristic_model: int = 500
    # sensor covariances are floored at this variance before whitening
    min_sensor_variance: float = 1e-8
    # isotropic model-point variance used by Mahalanobis ICP
    model_variance: float = 1e-6
    ldr_max_iterations: int = 100
    seed: int = 0
    stages: tuple[str, ...] = ALL_STAGES
    init_pose: RigidTransform | None = None
    jobs: int = 1
    ape_options: SolveOptions | None = None
    rn_options: SolveOptions | None = None
    ldr_options: IcpOptions | None = None

    def validate(self) -> None:
        if self.ape_subsample < 4:
            raise ConfigError("ape_subsample must be >= 4", "ape_subsample")
        if self.band_width < 1:
            raise ConfigError("band_width must be >= 1", "band_width")
        if self.candidate_pool < 1:
            raise ConfigError("candidate_pool must be >= 1", "candidate_pool")
        stages = tuple(self.stages)
        if not stages:
            raise ConfigError("at least one stage is required", "stages")
        for s in stages:
            if s not in ALL_STAGES:
                raise ConfigError(f"unknown stage {s!r}", "stages")
        if list(stages) != [s for s in ALL_STAGES if s in stages]:
            raise ConfigError("stages must keep the order APE, RN, LDR", "stages")


@dataclass
class StageReport:
    """``pose``/``objective`` are the stage's own output; ``best_objective`` is
    the running best handed to the next stage."""

    name: str
    pose: RigidTransform
    objective: float
    best_objective: float
    wall_time_s: float
    status: str = ""
    gap: float = math.nan
    node_count: int = 0
    improved: bool = True
    metrics: dict | None = None


@dataclass
class CandidateRow:
    pose_pre: RigidTransform
    objective_pre: float
    pose_post: RigidTransform
    objective_post: float
    source: str
    error: str = ""


@dataclass
class PipelineReport:
    stages: list[StageReport]
    candidates: list[CandidateRow]
    final_pose: RigidTransform
    final_objective: float
    final_stage: str
    initial_objective: float
    outliers: np.ndarray
    wall_time_s: float
    metrics: dict | None = None
    timings: dict = field(default_factory=dict)

    def stage(self, name: str) -> StageReport | None:
        for s in self.stages:
            if s.name == name:
                return s
        return None


# -- objective -------------------------------------------------------------
def sensor_with_floor(sensor: PointCloud, min_variance: float) -> PointCloud:
    """Covariances with eigenvalues floored at ``min_variance`` (isotropic if absent)."""
    if not sensor.has_covariances:
        return sensor.with_covariances(np.broadcast_to(min_variance * np.eye(3), (len(sensor), 3, 3)).copy())
    vals, vecs = np.linalg.eigh(sensor.covariances)
    vals = np.maximum(vals, min_variance)
    return sensor.with_covariances(np.einsum("nab,nb,ncb->nac", vecs, vals, vecs))


def pipeline_objective(pose, sensor: PointCloud, model_points: PointCloud, phi_max: float) -> tuple[float, np.ndarray]:
    """Mahalanobis L1 objective over all sensor points, cheapest assignment."""
    assign, cost = best_assignment(pose, sensor, model_points, MAHALANOBIS, phi_max, True)
    return float(cost.mean()), assign


def _solve_options(base: SolveOptions | None, time_limit, node_limit, interval, seed) -> SolveOptions:
    if base is not None:
        return replace(base)
    return SolveOptions(time_limit_s=time_limit, node_limit=node_limit, heuristic_node_interval=interval, seed=seed)


def _dedupe(poses, max_count, angle_deg=0.1, dist=1e-3):
    out = []
    for pose, obj in poses:
        if any(rotation_error_deg(pose.rotation, p.rotation) < angle_deg
               and np.linalg.norm(pose.translation - p.translation) < dist for p, _ in out):
            continue
        out.append((pose, obj))
        if len(out) >= max_count:
            break
    return out


def rotation_starts(sensor_pts, model_pts, count: int, seed: int) -> list[RigidTransform]:
    """``count`` seeded uniform rotations, each paired with the translation that
    maps the sensor centre onto the model centre.

    Centres are coordinate-wise medians so outlying sensor points do not drag
    every start off the object.
    """
    if count <= 0:
        return []
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((count, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    R = np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=1),
    ], axis=1)
    cs = np.median(sensor_pts, axis=0)
    cm = np.median(model_pts, axis=0)
    return [RigidTransform(r, cm - r @ cs) for r in R]


# -- stages ----------------------------------------------------------------
def ape_threshold(sensor: PointCloud, config: PipelineConfig) -> float:
    if config.ape_phi_max is not None:
        return float(config.ape_phi_max)
    if not sensor.has_covariances:
        return config.phi_max * math.sqrt(config.min_sensor_variance)
    # geometric mean of the eigenvalues as a per-point variance
    var = np.cbrt(np.maximum(np.linalg.det(sensor.covariances), 0.0))
    var = np.maximum(var, config.min_sensor_variance)
    return float(config.phi_max * math.sqrt(np.median(var)))


def run_ape(sensor: PointCloud, model_points: PointCloud, config: PipelineConfig, init: RigidTransform | None = None):
    """Euclidean MIP on a seeded sensor subset. Returns (pose, incumbent log, result)."""
    if len(sensor) < config.ape_subsample:
        raise ConfigError(f"sensor has {len(sensor)} points, fewer than ape_subsample", "ape_subsample")
    sub = subsample(PointCloud(sensor.points), config.ape_subsample, config.seed)
    phi = ape_threshold(sensor, config)
    opts = RegistrationOptions(
        phi_max=phi, big_m=max(config.big_m, phi), metric=EUCLIDEAN,
        n_partitions=config.n_partitions,
    )
    problem = MipRegistrationProblem(sub, PointCloud(model_points.points), None, opts)
    heuristic = IcpHeuristic(
        PointCloud(model_points.points),
        IcpOptions(max_iterations=30, reject_residual=phi),
        sensor=PointCloud(sensor.points),
        n_sensor=config.heuristic_sensor,
        n_model=config.heuristic_model,
        seed=config.seed,
    )
    so = _solve_options(config.ape_options, config.ape_time_limit_s, config.ape_node_limit,
                        config.heuristic_node_interval, config.seed)
    starts = [init] if init is not None else [RigidTransform.identity()]
    starts += rotation_starts(sensor.points, model_points.points, config.ape_starts, config.seed + 3)
    res = solve_registration(problem, so, heuristic, initial_poses=starts)
    return res.best_true_candidate[0], res.candidates, res


def run_rn(sensor: PointCloud, model_points: PointCloud, ape_pose: RigidTransform, config: PipelineConfig,
           extra_starts=()):
    """Band-restricted Mahalanobis MIP around ``ape_pose``. Returns (candidates,
    result); candidates are up to ``candidate_pool`` distinct (pose, relaxed
    objective), best first. ``extra_starts`` are injected as initial points too."""
    sub = subsample(sensor, config.rn_subsample, config.seed + 7)
    band = restrict_band(sub, model_points, ape_pose, min(config.band_width, len(model_points)))
    opts = RegistrationOptions(
        phi_max=config.phi_max, big_m=config.big_m, metric=MAHALANOBIS, n_partitions=config.n_partitions,
    )
    problem = MipRegistrationProblem(sub, PointCloud(model_points.points), band, opts)
    heuristic = IcpHeuristic(
        model_points,
        IcpOptions(max_iterations=30, metric=MAHALANOBIS, reject_residual=config.phi_max),
        sensor=sensor,
        n_sensor=config.heuristic_sensor,
        n_model=config.heuristic_model,
        seed=config.seed,
    )
    so = _solve_options(config.rn_options, config.rn_time_limit_s, config.rn_node_limit,
                        config.heuristic_node_interval, config.seed)
    res = solve_registration(problem, so, heuristic, initial_poses=[ape_pose, *extra_starts])
    ranked = sorted(res.candidates, key=lambda c: c[1])
    pool = _dedupe(ranked, config.candidate_pool)
    best = res.best_true_candidate
    if not any(p is best[0] for p, _ in pool):
        # the relaxed ranking can miss the best exact candidate; it always competes
        pool = _dedupe([best] + pool, config.candidate_pool)
    return pool, res


def _refine(sensor, model_points, pose, config: PipelineConfig):
    opt = config.ldr_options or IcpOptions(
        max_iterations=config.ldr_max_iterations, metric=MAHALANOBIS, reject_residual=config.phi_max,
    )
    return icp(sensor, model_points, pose, opt).pose


def run_ldr(sensor: PointCloud, model_points: PointCloud, candidates, config: PipelineConfig):
    """Refine each (pose, label) candidate on the full cloud; returns (best row, table)."""
    if not candidates:
        raise ValueError("run_ldr needs at least one candidate")

    def one(item):
        pose, source = item
        pre, _ = pipeline_objective(pose, sensor, model_points, config.phi_max)
        try:
            refined = _refine(sensor, model_points, pose, config)
        except (DegenerateConfiguration, np.linalg.LinAlgError) as exc:
            return CandidateRow(pose, pre, pose, pre, source, error=str(exc))
        post, _ = pipeline_objective(refined, sensor, model_points, config.phi_max)
        if not post <= pre:
            # refinement minimises a smooth surrogate; keep the start if it lost ground
            refined, post = pose, pre
        return CandidateRow(pose, pre, refined, post, source)

    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as ex:
            rows = list(ex.map(one, candidates))
    else:
        rows = [one(c) for c in candidates]
    if all(r.error for r in rows):
        raise DegenerateConfiguration("every LDR candidate failed: " + rows[0].error)
    ok = [r for r in rows if not r.error] or rows
    best = min(ok, key=lambda r: r.objective_post)
    return best, rows


def run_pipeline(sensor: PointCloud, model_points: PointCloud, config: PipelineConfig | None = None,
                 ground_truth: RigidTransform | None = None) -> PipelineReport:
    config = config or PipelineConfig()
    config.validate()
    t0 = time.perf_counter()
    sensor = sensor_with_floor(sensor, config.min_sensor_variance)
    if not model_points.has_covariances:
        model_points = model_points.with_covariances(
            np.broadcast_to(config.model_variance * np.eye(3), (len(model_points), 3, 3)).copy()
        )
    stages = tuple(config.stages)
    if APE not in stages and RN in stages and config.init_pose is None:
        log.info("RN without APE or init pose: starting from identity")
    pose = config.init_pose or RigidTransform.identity()
    start_obj, _ = pipeline_objective(pose, sensor, model_points, config.phi_max)
    obj, source = start_obj, "init"
    reports: list[StageReport] = []
    pool = [(pose, source)]
    table: list[CandidateRow] = []
    timings = {}

    def gt_metrics(p):
        return None if ground_truth is None else metrics(p, ground_truth, sensor).as_dict()

    def keep_better(name, cand, t_stage, extra):
        nonlocal pose, obj, source
        val, _ = pipeline_objective(cand, sensor, model_points, config.phi_max)
        improved = val <= obj
        if improved:
            pose, obj, source = cand, val, name
        reports.append(StageReport(name, cand, val, obj, t_stage, improved=improved,
                                   metrics=gt_metrics(cand), **extra))

    stage_pose = pose
    if APE in stages:
        ts = time.perf_counter()
        try:
            stage_pose, _, res = run_ape(sensor, model_points, config, init=pose)
        except MipRegError as exc:
            raise StageError(APE, exc) from exc
        timings[APE] = time.perf_counter() - ts
        keep_better(APE, stage_pose, timings[APE], dict(status=res.status, gap=res.gap, node_count=res.node_count))
        pool = [(pose, source), (stage_pose, APE)]
    if RN in stages:
        ts = time.perf_counter()
        try:
            # the band follows the APE estimate even when the flat objective
            # did not rank it above the start; the best pose is injected too
            cands, res = run_rn(sensor, model_points, stage_pose, config, extra_starts=[pose])
        except MipRegError as exc:
            raise StageError(RN, exc) from exc
        timings[RN] = time.perf_counter() - ts
        keep_better(RN, cands[0][0] if cands else res.pose, timings[RN],
                    dict(status=res.status, gap=res.gap, node_count=res.node_count))
        pool = [(p, RN) for p, _ in cands] + pool
    if LDR in stages:
        ts = time.perf_counter()
        pool = _dedupe([(pose, source)] + pool, config.candidate_pool + 2)
        try:
            best, table = run_ldr(sensor, model_points, pool, config)
        except MipRegError as exc:
            raise StageError(LDR, exc) from exc
        timings[LDR] = time.perf_counter() - ts
        keep_better(LDR, best.pose_post, timings[LDR], {})
    _, assign = pipeline_objective(pose, sensor, model_points, config.phi_max)
    wall = time.perf_counter() - t0
    timings["total"] = wall
    return PipelineReport(
        stages=reports,
        candidates=table,
        final_pose=pose,
        final_objective=obj,
        final_stage=source,
        initial_objective=start_obj,
        outliers=np.flatnonzero(assign == OUTLIER),
        wall_time_s=wall,
        metrics=gt_metrics(pose),
        timings=timings,
    )


# -- config files ----------------------------------------------------------
_SCALARS = {f.name for f in fields(PipelineConfig)} - {"stages", "init_pose", "ape_options", "rn_options", "ldr_options"}
# annotations are strings under postponed evaluation
_INTS = {f.name for f in fields(PipelineConfig) if f.name in _SCALARS and f.type.split("|")[0].strip() == "int"}


def _coerce(name: str, raw: str) -> int | float | None:
    raw = raw.strip()
    if raw.lower() in ("", "none"):
        return None
    try:
        return int(raw) if name in _INTS else float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {name} = {raw!r}", name) from None


def config_from_mapping(values: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    """Build a config from flat ``key -> string`` pairs (unknown keys rejected)."""
    base = base or PipelineConfig()
    kw = {}
    for key, raw in values.items():
        if key == "stages":
            kw["stages"] = tuple(s.strip().upper() for s in str(raw).split(",") if s.strip())
        elif key == "init_pose":
            nums = [float(v) for v in str(raw).replace(",", " ").split()]
            kw["init_pose"] = RigidTransform.from_row(nums) if nums else None
        elif key in _SCALARS:
            kw[key] = _coerce(key, str(raw))
        else:
            raise ConfigError(f"unknown pipeline key {key!r}", key)
    cfg = replace(base, **kw)
    cfg.validate()
    return cfg


def config_from_sections(sections: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    """``{section: {key: value}}`` for ``pipeline``/``ape``/``rn``/``ldr``.

    Keys in stage sections are prefixed with the stage name when they are not
    already (``[ape] time_limit_s`` is ``ape_time_limit_s``).
    """
    flat = {}
    for sec, items in sections.items():
        prefix = "" if sec == "pipeline" else sec.lower() + "_"
        for k, v in items.items():
            key = k if (not prefix or k.startswith(prefix) or k in _SCALARS) else prefix + k
            flat[key] = v
    return config_from_mapping(flat, base)


def load_config(path) -> PipelineConfig:
    """Read ``[pipeline]``, ``[ape]``, ``[rn]`` and ``[ldr]`` sections of key = value pairs."""
    cfg = configparser.ConfigParser()
    if not cfg.read(path, encoding="utf-8"):
        raise FileNotFoundError(path)
    return config_from_sections({sec: dict(cfg[sec]) for sec in cfg.sections()})
