"""Command-line front end: ``synth``, ``register``, ``bench``, ``eval`` and ``dump-model``.

Manifests are INI files. ``[run]`` names the method and input files; the other
sections configure each module:

    [run]         method, sensor, model, ground_truth, init_pose, band, output, seed
    [synth]       mesh, per_face, sensor_count, sigma, outliers, ... (bench only)
    [registration] RegistrationOptions fields plus subsample, band_width
    [solver]      SolveOptions fields plus icp_heuristic
    [icp]         IcpOptions fields plus model_variance, min_sensor_variance
    [pipeline] [ape] [rn] [ldr]  PipelineConfig fields

Relative paths resolve against the manifest's directory. Every key can be
overridden with ``--set section.key=value``.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import configparser
import copy
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import __version__
from .errors import ConfigError, MipRegError
from .geom import (
    PointCloud,
    RigidTransform,
    add_gaussian_noise,
    inject_outliers,
    metrics,
    random_rigid_transform,
    sample_mesh_points,
    sample_mesh_surface,
)
from .geom.io import fmt, read_cloud, read_mesh, read_pose, write_cloud, write_indices, write_pose
from .localref import EUCLIDEAN, MAHALANOBIS, IcpHeuristic, IcpOptions, icp
from .milp import STATUS_GAP, STATUS_OPTIMAL, SolveOptions
from .pipeline import config_from_sections, pipeline_objective, run_pipeline, sensor_with_floor
from .regmip import (
    MipRegistrationProblem,
    build_model,
    parse_options,
    restrict_band,
    solve_registration,
)

log = logging.getLogger("mipreg")

OUTPUT_DIR_ENV = "MIPREG_OUTPUT_DIR"
METHODS = ("icp", "trim-icp", "mahalanobis-icp", "mip-eu", "mip-mah", "pipeline")
ICP_METHODS = ("icp", "trim-icp", "mahalanobis-icp")
MIP_METHODS = ("mip-eu", "mip-mah")
PIPELINE_SECTIONS = ("pipeline", "ape", "rn", "ldr")
KNOWN_SECTIONS = ("run", "synth", "registration", "solver", "icp") + PIPELINE_SECTIONS

EXIT_OK, EXIT_ERROR, EXIT_NOT_OPTIMAL = 0, 1, 2
DEFAULT_TRIM = 0.1

BENCH_KINDS = {
    "band": ("band_width", (5, 20, 30, 50)),
    "noise": ("sigma", (5e-5, 1e-4, 5e-3, 1e-2, 4e-2)),
    "outliers": ("outlier_fraction", (0.1, 0.2, 0.4)),
}
BENCH_COLUMNS = ("parameter", "value", "method", "rotation_error_deg", "translation_error", "tre",
                 "objective", "wall_time_s", "gap", "status")
OUTLIER_COLUMNS = ("outlier_precision", "outlier_recall")


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_DIR_ENV) or "mipreg-out"


# -- rendering -------------------------------------------------------------
def _plain(obj):
    """JSON-ready copy: floats at 12 significant digits, non-finite as null."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, RigidTransform):
        return _plain(obj.as_row())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return float(fmt(x)) if math.isfinite(x) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


def _cell(x) -> str:
    if isinstance(x, float):
        return fmt(x) if math.isfinite(x) else ("nan" if math.isnan(x) else fmt(x))
    return str(x)


# -- manifests -------------------------------------------------------------
@dataclass
class RunManifest:
    method: str = "pipeline"
    sensor: str | None = None
    model: str | None = None
    ground_truth: str | None = None
    init_pose: str | None = None
    band: str | None = None
    output: str | None = None
    seed: int = 0
    sections: dict = field(default_factory=dict)
    base_dir: str = "."

    def section(self, name: str) -> dict:
        return dict(self.sections.get(name, {}))

    def path(self, value: str | None) -> str | None:
        if not value:
            return None
        return value if os.path.isabs(value) else os.path.join(self.base_dir, value)

    def validate(self, need_inputs: bool = True) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"run.method must be one of {', '.join(METHODS)}; got {self.method!r}", "run.method")
        for name in self.sections:
            if name not in KNOWN_SECTIONS:
                raise ConfigError(f"unknown manifest section [{name}]", name)
        required = ("sensor", "model") if need_inputs else ()
        for key in required:
            if not getattr(self, key):
                raise ConfigError(f"run.{key} is required", f"run.{key}")
        for key in ("sensor", "model", "ground_truth", "init_pose", "band"):
            p = self.path(getattr(self, key))
            if p and need_inputs and not os.path.exists(p):
                raise ConfigError(f"run.{key}: file not found: {p}", f"run.{key}")


def parse_overrides(pairs) -> dict:
    out: dict = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        sec, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override must look like section.key=value, got {item!r}", "--set")
        out.setdefault(sec, {})[name.strip()] = value.strip()
    return out


def load_manifest(path, overrides=None) -> RunManifest:
    cfg = configparser.ConfigParser()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse manifest {path}: {exc}", "manifest") from None
    sections = {sec: dict(cfg[sec]) for sec in cfg.sections()}
    for sec, items in (overrides or {}).items():
        sections.setdefault(sec, {}).update(items)
    run = sections.pop("run", {})
    known = {f.name for f in fields(RunManifest)} - {"sections", "base_dir"}
    for key in run:
        if key not in known:
            raise ConfigError(f"unknown key run.{key}", f"run.{key}")
    try:
        seed = int(run.get("seed", 0))
    except ValueError:
        raise ConfigError(f"run.seed must be an integer, got {run['seed']!r}", "run.seed") from None
    base_dir = os.path.dirname(os.path.abspath(path)) if path is not None else os.getcwd()
    kw = {k: (v or None) for k, v in run.items() if k != "seed"}
    if "method" in kw:
        kw["method"] = (kw["method"] or "").strip().lower()
    return RunManifest(seed=seed, sections=sections, base_dir=base_dir, **kw)


def _typed(section: str, key: str, raw, current):
    raw = str(raw).strip()
    try:
        if raw.lower() in ("", "none"):
            return None
        if isinstance(current, bool):
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r}", f"{section}.{key}") from None


def _apply(section: str, obj, items: dict, extra: dict | None = None):
    """Replace dataclass fields of ``obj`` from string ``items``; keys in ``extra``
    (name -> default) are returned separately."""
    types = {f.name: str(f.type) for f in fields(obj)}
    kw, rest = {}, dict(extra or {})
    for key, raw in items.items():
        if key in rest:
            rest[key] = _typed(section, key, raw, rest[key])
        elif key in types:
            cur = getattr(obj, key)
            if cur is None:
                # optional field: take the type from the annotation
                t = types[key]
                cur = "" if t.startswith("str") else 0 if t.startswith("int") else 0.0
            kw[key] = _typed(section, key, raw, cur)
        else:
            raise ConfigError(f"unknown key {section}.{key}", f"{section}.{key}")
    try:
        return replace(obj, **kw), rest
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}", section) from None


_SOLVER_KEYS = ("gap_tolerance", "abs_gap_tolerance", "time_limit_s", "node_limit", "heuristic_node_interval",
                "seed", "lp_backend", "max_cut_rounds", "cap_tol", "node_log_path")


def solver_options(man: RunManifest) -> tuple[SolveOptions, bool]:
    items = man.section("solver")
    for key in items:
        if key not in _SOLVER_KEYS and key != "icp_heuristic":
            raise ConfigError(f"unknown key solver.{key}", f"solver.{key}")
    opts, extra = _apply("solver", SolveOptions(seed=man.seed), items, {"icp_heuristic": True})
    return opts, bool(extra["icp_heuristic"])


def icp_options(man: RunManifest) -> tuple[IcpOptions, dict]:
    base = IcpOptions()
    items = man.section("icp")
    if man.method == "trim-icp" and "trim_fraction" not in items:
        base = replace(base, trim_fraction=DEFAULT_TRIM)
    if man.method == "mahalanobis-icp":
        base = replace(base, metric=MAHALANOBIS)
    return _apply("icp", base, items, {"model_variance": 1e-6, "min_sensor_variance": 1e-8})


def pipeline_config(man: RunManifest, init_pose=None):
    secs = {s: man.section(s) for s in PIPELINE_SECTIONS if s in man.sections}
    secs.setdefault("pipeline", {}).setdefault("seed", str(man.seed))
    try:
        cfg = config_from_sections(secs)
    except ValueError as exc:
        raise ConfigError(str(exc), "pipeline") from None
    if init_pose is not None:
        cfg = replace(cfg, init_pose=init_pose)
    return cfg


def registration_options(man: RunManifest):
    items = man.section("registration")
    extra = {"subsample": 0, "band_width": 0}
    metric = EUCLIDEAN if man.method == "mip-eu" else MAHALANOBIS
    rest = {k: items.pop(k) for k in list(items) if k in extra}
    for k, v in rest.items():
        extra[k] = _typed("registration", k, v, 0) or 0
    if "metric" in items and items["metric"].strip().lower() != metric:
        raise ConfigError(f"registration.metric conflicts with run.method = {man.method}", "registration.metric")
    items["metric"] = metric
    try:
        opts = parse_options(items)
    except ValueError as exc:
        raise ConfigError(f"[registration] {exc}", "registration") from None
    unknown = set(items) - {f.name for f in fields(opts)}
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown key registration.{key}", f"registration.{key}")
    return opts, extra


# -- method runners --------------------------------------------------------
@dataclass
class MethodOutcome:
    pose: RigidTransform
    objective: float
    status: str
    gap: float = math.nan
    outliers: np.ndarray | None = None
    stages: list | None = None
    extra: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        if self.status in (STATUS_OPTIMAL, STATUS_GAP, "Converged", "MaxIterations", "Completed"):
            return EXIT_OK
        return EXIT_NOT_OPTIMAL


def _require_covariances(man: RunManifest, sensor: PointCloud) -> None:
    if man.method in ("mahalanobis-icp", "mip-mah") and not sensor.has_covariances:
        raise ConfigError(
            f"run.sensor: method {man.method} needs sensor covariances (9-column cloud)", "run.sensor"
        )


def _with_model_variance(model: PointCloud, variance: float) -> PointCloud:
    if model.has_covariances:
        return model
    return model.with_covariances(np.broadcast_to(variance * np.eye(3), (len(model), 3, 3)).copy())


def run_icp_method(man, sensor, model, init) -> MethodOutcome:
    opts, extra = icp_options(man)
    src, tgt = sensor, model
    if opts.metric == MAHALANOBIS:
        src = sensor_with_floor(sensor, extra["min_sensor_variance"])
        tgt = _with_model_variance(model, extra["model_variance"])
    t0 = time.perf_counter()
    res = icp(src, tgt, init, opts)
    wall = time.perf_counter() - t0
    return MethodOutcome(
        pose=res.pose,
        objective=res.final_mean_residual,
        status="Converged" if res.converged else "MaxIterations",
        extra={"iterations": res.iterations},
        timings={"icp": wall, "total": wall},
    )


def mip_problem(man, sensor, model, init):
    """Problem for ``mip-eu`` / ``mip-mah`` plus the subsample indices."""
    opts, extra = registration_options(man)
    idx = np.arange(len(sensor))
    if extra["subsample"] and extra["subsample"] < len(sensor):
        # same draw as localref.subsample
        rng = np.random.default_rng(man.seed)
        idx = np.sort(rng.choice(len(sensor), size=extra["subsample"], replace=False))
        sensor = sensor.subset(idx)
    band = None
    if man.band:
        band = np.loadtxt(man.path(man.band), dtype=int, ndmin=2)
        if len(band) != len(sensor):
            raise ConfigError(f"run.band: {len(band)} rows for {len(sensor)} sensor points", "run.band")
    elif extra["band_width"]:
        band = restrict_band(sensor, model, init or RigidTransform.identity(), extra["band_width"])
    problem = MipRegistrationProblem(sensor, model, band, opts)
    try:
        problem.validate()
    except MipRegError as exc:
        raise ConfigError(f"[registration] {exc}", "registration") from None
    return problem, idx


def run_mip_method(man, sensor, model, init) -> MethodOutcome:
    problem, idx = mip_problem(man, sensor, model, init)
    sopts, use_heuristic = solver_options(man)
    heuristic = None
    if use_heuristic:
        metric = problem.options.metric
        target = _with_model_variance(model, 1e-6) if metric == MAHALANOBIS else model
        src = sensor_with_floor(problem.sensor, 1e-8) if metric == MAHALANOBIS else problem.sensor
        heuristic = IcpHeuristic(target, IcpOptions(max_iterations=30, metric=metric), sensor=src, seed=man.seed)
    starts = [init] if init is not None else []
    res = solve_registration(problem, sopts, heuristic=heuristic, initial_poses=starts)
    return MethodOutcome(
        pose=res.pose,
        objective=res.relaxed_objective,
        status=res.status,
        gap=res.gap,
        outliers=idx[res.outliers],
        extra={
            "true_objective_mip": res.objective,
            "lower_bound": res.lower_bound,
            "node_count": res.node_count,
            "raw_rotation_distance": res.raw_rotation_distance,
            "sensor_indices": idx if len(idx) < len(sensor) else None,
        },
        timings={"solve": res.wall_time_s, "total": res.wall_time_s},
    )


def run_pipeline_method(man, sensor, model, init, gt) -> MethodOutcome:
    cfg = pipeline_config(man, init)
    rep = run_pipeline(sensor, model, cfg, ground_truth=gt)
    stages = [
        {
            "name": s.name,
            "pose": s.pose,
            "objective": s.objective,
            "best_objective": s.best_objective,
            "status": s.status,
            "gap": s.gap,
            "node_count": s.node_count,
            "improved": s.improved,
            "wall_time_s": s.wall_time_s,
            "metrics": s.metrics,
        }
        for s in rep.stages
    ]
    gaps = [s.gap for s in rep.stages if not math.isnan(s.gap)]
    return MethodOutcome(
        pose=rep.final_pose,
        objective=rep.final_objective,
        # stages run under budgets by design; their statuses are in the breakdown
        status="Completed",
        gap=max(gaps) if gaps else math.nan,
        outliers=rep.outliers,
        stages=stages,
        extra={"final_stage": rep.final_stage, "initial_objective": rep.initial_objective,
               "candidates": [{"source": c.source, "objective_pre": c.objective_pre,
                               "objective_post": c.objective_post, "pose_post": c.pose_post,
                               "error": c.error} for c in rep.candidates]},
        timings=rep.timings,
    )


def run_method(man: RunManifest, sensor: PointCloud, model: PointCloud, init=None, gt=None,
               phi_max: float | None = None) -> tuple[dict, MethodOutcome]:
    """Run ``man.method`` and build the report dictionary."""
    _require_covariances(man, sensor)
    t0 = time.perf_counter()
    if man.method in ICP_METHODS:
        out = run_icp_method(man, sensor, model, init)
    elif man.method in MIP_METHODS:
        out = run_mip_method(man, sensor, model, init)
    else:
        out = run_pipeline_method(man, sensor, model, init, gt)
    wall = time.perf_counter() - t0
    pcfg = pipeline_config(man)
    if phi_max is None:
        phi_max = pcfg.phi_max
    # common yardstick across methods: Mahalanobis L1 over the whole cloud, with
    # the pipeline's variance floors so the pipeline reports its own objective
    true_obj, assign = pipeline_objective(out.pose, sensor_with_floor(sensor, pcfg.min_sensor_variance),
                                          _with_model_variance(model, pcfg.model_variance), phi_max)
    report = {
        "version": __version__,
        "method": man.method,
        "seed": man.seed,
        "pose": out.pose,
        "objective": out.objective,
        "true_objective": true_obj,
        "status": out.status,
        "timings": {**out.timings, "wall_time_s": wall},
        "flagged_outliers": np.flatnonzero(assign < 0),
    }
    if man.method in MIP_METHODS or man.method == "pipeline":
        report["gap"] = out.gap
        report["outliers"] = out.outliers
    if out.stages is not None:
        report["stages"] = out.stages
    report.update({k: v for k, v in out.extra.items() if v is not None})
    if gt is not None:
        report["metrics"] = metrics(out.pose, gt, sensor, true_obj).as_dict()
    return report, out


# -- synthetic data --------------------------------------------------------
@dataclass
class SynthParams:
    mesh: str | None = None
    per_face: int = 2
    sensor_count: int = 1000
    sigma: float = 0.0
    outliers: float = 0.0
    outlier_bbox_scale: float = 1.5
    outlier_min_distance: float = 0.0
    max_angle: float = 30.0
    max_translation: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if not 1 <= self.per_face <= 10:
            raise ConfigError("synth.per_face must lie in [1, 10]", "synth.per_face")
        if self.sensor_count < 1:
            raise ConfigError("synth.sensor_count must be >= 1", "synth.sensor_count")
        if self.sigma < 0:
            raise ConfigError("synth.sigma must be >= 0", "synth.sigma")
        if not 0.0 <= self.outliers <= 0.9:
            raise ConfigError("synth.outliers must lie in [0, 0.9]", "synth.outliers")
        if not 0.0 <= self.max_angle <= 180.0:
            raise ConfigError("synth.max_angle must lie in [0, 180]", "synth.max_angle")
        if self.max_translation < 0:
            raise ConfigError("synth.max_translation must be >= 0", "synth.max_translation")


def synthesize(mesh, p: SynthParams):
    """Model cloud, sensor cloud, sensor->model ground truth and outlier indices.

    Sensor points are drawn in the model frame (noise, then outliers), then
    moved into the sensor frame by the inverse ground-truth pose.
    """
    model = sample_mesh_points(mesh, p.per_face, p.seed)
    pts = sample_mesh_surface(mesh, p.sensor_count, p.seed + 1)
    if p.sigma > 0:
        pts = add_gaussian_noise(pts, p.sigma, p.seed + 2)
    out_idx = np.zeros(0, dtype=int)
    if p.outliers > 0:
        pts, out_idx = inject_outliers(pts, p.outliers, p.outlier_bbox_scale, p.seed + 3,
                                       avoid=model.points, min_distance=p.outlier_min_distance)
    gt = random_rigid_transform(p.seed + 4, p.max_angle, p.max_translation)
    inv = gt.inverse()
    cov = None
    if pts.covariances is not None:
        r = inv.rotation
        cov = np.einsum("ij,njk,lk->nil", r, pts.covariances, r)
    sensor = PointCloud(inv.apply(pts.points), cov)
    return model, sensor, gt, out_idx


def synth_params(items: dict, seed: int | None = None) -> SynthParams:
    p, _ = _apply("synth", SynthParams(), items)
    if seed is not None:
        p = replace(p, seed=seed)
    p.validate()
    return p


def write_synth(out_dir, model, sensor, gt, out_idx) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "model": os.path.join(out_dir, "model.xyz"),
        "sensor": os.path.join(out_dir, "sensor.xyz"),
        "ground_truth": os.path.join(out_dir, "ground_truth.pose"),
        "outliers": os.path.join(out_dir, "outliers.idx"),
    }
    write_cloud(paths["model"], model)
    write_cloud(paths["sensor"], sensor)
    write_pose(paths["ground_truth"], gt, "sensor -> model")
    write_indices(paths["outliers"], out_idx)
    return paths


# -- bench -----------------------------------------------------------------
def _precision_recall(flagged, truth) -> tuple[float, float]:
    flagged, truth = set(int(i) for i in flagged), set(int(i) for i in truth)
    tp = len(flagged & truth)
    prec = tp / len(flagged) if flagged else 1.0
    rec = tp / len(truth) if truth else 1.0
    return prec, rec


def bench_cell(task) -> tuple[dict, dict]:
    """One (value, method) cell; failures come back as rows with the error status."""
    kind, value, method, sections, base_dir, seed = task
    param = BENCH_KINDS[kind][0]
    row = {"parameter": param, "value": value, "method": method}
    for k in BENCH_COLUMNS[3:]:
        row[k] = math.nan
    if kind == "outliers":
        row.update({k: math.nan for k in OUTLIER_COLUMNS})
    secs = copy.deepcopy(sections)
    synth = secs.pop("synth", {})
    if kind == "noise":
        synth["sigma"] = str(value)
    elif kind == "outliers":
        synth["outliers"] = str(value)
    else:
        secs.setdefault("pipeline", {})["band_width"] = str(value)
        secs.setdefault("registration", {})["band_width"] = str(value)
    if method not in MIP_METHODS:
        secs.pop("registration", None)
    report: dict = {"parameter": param, "value": value, "method": method}
    try:
        man = RunManifest(method=method, seed=seed, sections=secs, base_dir=base_dir)
        man.validate(need_inputs=False)
        p = synth_params(synth, seed)
        if not p.mesh:
            raise ConfigError("synth.mesh is required for bench", "synth.mesh")
        mesh = read_mesh(man.path(p.mesh))
        model, sensor, gt, out_idx = synthesize(mesh, p)
        rep, out = run_method(man, sensor, model, None, gt)
        m = rep["metrics"]
        row.update(rotation_error_deg=m["rotation_error_deg"], translation_error=m["translation_error"],
                   tre=m["tre"], objective=rep["true_objective"], wall_time_s=rep["timings"]["wall_time_s"],
                   gap=rep.get("gap", math.nan), status=out.status)
        if kind == "outliers":
            flagged = rep.get("outliers")
            if flagged is None:
                flagged = rep["flagged_outliers"]
            row["outlier_precision"], row["outlier_recall"] = _precision_recall(flagged, out_idx)
        report.update(rep)
        report["true_outliers"] = out_idx
    except Exception as exc:  # recorded per cell; the sweep goes on
        log.warning("bench cell %s=%s %s failed: %s", param, value, method, exc)
        row["status"] = f"error: {type(exc).__name__}: {exc}"
        report["error"] = row["status"]
    return row, report


def run_bench(kind, sections, base_dir, values, methods, seed, jobs=1):
    tasks = [(kind, v, m, sections, base_dir, seed) for v in values for m in methods]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(bench_cell, tasks))
    else:
        results = [bench_cell(t) for t in tasks]
    return [r for r, _ in results], [rep for _, rep in results]


def bench_header(kind: str) -> tuple[str, ...]:
    return BENCH_COLUMNS + (OUTLIER_COLUMNS if kind == "outliers" else ())


def write_bench_csv(path, kind, rows) -> None:
    header = bench_header(kind)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(r[k]) for k in header])


# -- commands --------------------------------------------------------------
def cmd_synth(args) -> int:
    items = {k: str(v) for k, v in (
        ("mesh", args.mesh), ("per_face", args.per_face), ("sensor_count", args.sensor_count),
        ("sigma", args.sigma), ("outliers", args.outliers), ("outlier_bbox_scale", args.outlier_bbox_scale),
        ("outlier_min_distance", args.outlier_min_distance), ("max_angle", args.max_angle),
        ("max_translation", args.max_translation),
    )}
    p = synth_params(items, args.seed)
    mesh = read_mesh(p.mesh)
    model, sensor, gt, out_idx = synthesize(mesh, p)
    out_dir = args.out or default_output_dir()
    paths = write_synth(out_dir, model, sensor, gt, out_idx)
    print(dumps({"files": paths, "model_points": len(model), "sensor_points": len(sensor),
                 "outliers": len(out_idx), "seed": p.seed}), end="")
    return EXIT_OK


def _read_inputs(man: RunManifest):
    sensor = read_cloud(man.path(man.sensor))
    model = read_cloud(man.path(man.model))
    gt = read_pose(man.path(man.ground_truth)) if man.ground_truth else None
    init = read_pose(man.path(man.init_pose)) if man.init_pose else None
    return sensor, model, gt, init


def _manifest_from_args(args) -> RunManifest:
    overrides = parse_overrides(args.set)
    man = load_manifest(args.manifest, overrides)
    if getattr(args, "method", None):
        man.method = args.method
    if args.seed is not None:
        man.seed = args.seed
    return man


def _emit(text: str, path: str | None) -> None:
    if path:
        d = os.path.dirname(os.path.abspath(path))
        os.makedirs(d, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_register(args) -> int:
    man = _manifest_from_args(args)
    man.validate()
    sensor, model, gt, init = _read_inputs(man)
    report, out = run_method(man, sensor, model, init, gt)
    _emit(dumps(report), args.out or man.path(man.output))
    return out.exit_code


def cmd_bench(args) -> int:
    overrides = parse_overrides(args.set)
    man = load_manifest(args.manifest, overrides)
    if args.seed is not None:
        man.seed = args.seed
    values = args.values if args.values else list(BENCH_KINDS[args.kind][1])
    if not values:
        raise ConfigError("sweep values must be nonempty", "--values")
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r} in --methods", "--methods")
    if args.kind == "band":
        values = [int(v) for v in values]
    rows, reports = run_bench(args.kind, man.sections, man.base_dir, values, methods, man.seed, args.jobs)
    out_csv = args.out or os.path.join(default_output_dir(), f"bench_{args.kind}.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out_csv)), exist_ok=True)
    write_bench_csv(out_csv, args.kind, rows)
    with open(os.path.splitext(out_csv)[0] + ".json", "w", encoding="utf-8") as fh:
        fh.write(dumps({"kind": args.kind, "seed": man.seed, "values": values, "methods": methods, "runs": reports}))
    print(out_csv)
    return EXIT_OK


def cmd_eval(args) -> int:
    est = read_pose(args.estimated)
    gt = read_pose(args.ground_truth)
    sensor = read_cloud(args.sensor)
    _emit(dumps(metrics(est, gt, sensor).as_dict()), args.out)
    return EXIT_OK


def cmd_dump_model(args) -> int:
    man = _manifest_from_args(args)
    man.validate()
    if man.method not in MIP_METHODS:
        raise ConfigError(f"dump-model needs run.method in {MIP_METHODS}, got {man.method!r}", "run.method")
    sensor, model, _, init = _read_inputs(man)
    _require_covariances(man, sensor)
    problem, _ = mip_problem(man, sensor, model, init)
    milp, _, _ = build_model(problem)
    _emit(milp.dumps(), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mipreg", description="Point-cloud registration via mixed-integer programming.")
    ap.add_argument("--version", action="version", version=f"mipreg {__version__}")
    ap.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, manifest=True):
        if manifest:
            p.add_argument("manifest", help="INI manifest")
            p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a manifest key")
        p.add_argument("--seed", type=int, default=None, help="overrides the manifest seed")
        p.add_argument("--out", default=None, help="output path")

    p = sub.add_parser("synth", help="sample model and sensor clouds from a mesh")
    p.add_argument("mesh", help="OBJ or ASCII PLY mesh")
    p.add_argument("--per-face", type=int, default=2, help="model points per face, 1 to 10")
    p.add_argument("--sensor-count", type=int, default=1000)
    p.add_argument("--sigma", type=float, default=0.0, help="isotropic noise standard deviation")
    p.add_argument("--outliers", type=float, default=0.0, help="outlier fraction in [0, 0.9]")
    p.add_argument("--outlier-bbox-scale", type=float, default=1.5)
    p.add_argument("--outlier-min-distance", type=float, default=0.0)
    p.add_argument("--max-angle", type=float, default=30.0, help="degrees")
    p.add_argument("--max-translation", type=float, default=0.1)
    common(p, manifest=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("register", help="run one registration method")
    common(p)
    p.add_argument("--method", choices=METHODS, default=None)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("bench", help="parameter sweep over synthetic instances")
    p.add_argument("kind", choices=sorted(BENCH_KINDS))
    common(p)
    p.add_argument("--values", type=float, nargs="+", default=None, help="sweep values (default: the standard list)")
    p.add_argument("--methods", default="icp,trim-icp,mahalanobis-icp,pipeline", help="comma-separated methods")
    p.add_argument("--jobs", type=int, default=1, help="cells run concurrently")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="metrics of an estimated pose against ground truth")
    p.add_argument("estimated")
    p.add_argument("ground_truth")
    p.add_argument("sensor")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-model", help="write the MILP text dump for a mip-* manifest")
    common(p)
    p.add_argument("--method", choices=MIP_METHODS, default=None)
    p.set_defaults(func=cmd_dump_model)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (MipRegError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
