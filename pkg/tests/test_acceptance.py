"""Acceptance criteria 1-9, each at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL ...`` line (shown even without
``-s``). Run just this file with ``pytest tests/test_acceptance.py``.
"""
import itertools
import math
import time

import numpy as np
import pytest

from mipreg.geom import (
    PointCloud,
    RigidTransform,
    add_gaussian_noise,
    axis_angle_to_matrix,
    cholesky_lower,
    inject_outliers,
    random_rigid_transform,
    rotation_error_deg,
)
from mipreg.localref import kabsch_weighted
from mipreg.milp import STATUS_OPTIMAL, MilpModel, SolveOptions, branch_and_bound, check_solution
from mipreg.pipeline import PipelineConfig, pipeline_objective, run_pipeline, sensor_with_floor
from mipreg.regmip import MipRegistrationProblem, RegistrationOptions, build_model, restrict_band, solve_registration
from mipreg.rotrelax import build_rotation_block, encode_rotation, mccormick_envelope

# every Optimal registration solve made here, for criterion 8
OPTIMAL_SOLVES: list = []


@pytest.fixture
def report(capsys, request):
    def emit(ok: bool, detail: str):
        n = request.node.name.split("_")[1]
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    return emit


def solve_tracked(problem, opts, **kw):
    res = solve_registration(problem, opts, **kw)
    if res.status == STATUS_OPTIMAL:
        OPTIMAL_SOLVES.append((problem, res))
    return res


# -- 1 ---------------------------------------------------------------------
def oracle_instance(seed):
    rng = np.random.default_rng(seed)
    n_s = int(rng.integers(2, 5))
    bw = int(rng.integers(2, 7)) if n_s < 4 else int(rng.integers(2, 4))
    m = rng.uniform(-1, 1, (8, 3))
    gt = random_rigid_transform(seed, 40, 0.3)
    idx = rng.choice(8, n_s, replace=False)
    s = gt.inverse().apply(m[idx]) + rng.normal(0, 0.05, (n_s, 3))
    cov = np.array([np.diag(rng.uniform(0.5, 2, 3)) * 0.01 for _ in range(n_s)])
    sensor = PointCloud(s, cov)
    band = restrict_band(sensor, PointCloud(m), random_rigid_transform(seed + 1, 10, 0.05).compose(gt), bw)
    phi = float(rng.choice([1000.0, 3.0, 8.0]))
    metric = ("euclidean", "mahalanobis")[seed % 2]
    opts = RegistrationOptions(metric=metric, n_partitions=4, phi_max=phi, big_m=1e4)
    return MipRegistrationProblem(sensor, PointCloud(m), band, opts)


def enumeration_oracle(problem):
    """Minimum over every assignment (each point: one band candidate or outlier)
    of the MILP with that assignment fixed."""
    model, _, vm = build_model(problem)
    best = math.inf
    for a in itertools.product(*[list(range(len(c))) + [-1] for c in vm.c_ids]):
        lb = np.array(model.lb, float)
        ub = np.array(model.ub, float)
        for i, ai in enumerate(a):
            lb[vm.c_ids[i]] = ub[vm.c_ids[i]] = 0
            lb[vm.o_ids[i]] = ub[vm.o_ids[i]] = float(ai == -1)
            if ai >= 0:
                lb[vm.c_ids[i][ai]] = ub[vm.c_ids[i][ai]] = 1
        fixed = model.copy()
        fixed.lb, fixed.ub = list(lb), list(ub)
        sol = branch_and_bound(fixed, SolveOptions(gap_tolerance=1e-9, cutoff=best, cap_tol=1e-8))
        if sol.values is not None:
            best = min(best, sol.objective)
    return best


def test_1_milp_oracle_equivalence(report):
    worst, solve_time, bad = 0.0, 0.0, []
    for seed in range(30):
        p = oracle_instance(seed)
        t0 = time.perf_counter()
        res = solve_tracked(p, SolveOptions(gap_tolerance=1e-7, cap_tol=1e-8, time_limit_s=60))
        solve_time += time.perf_counter() - t0
        o = enumeration_oracle(p)
        rel = abs(res.relaxed_objective - o) / max(abs(o), 1e-12) if abs(o) > 1e-12 else abs(res.relaxed_objective)
        worst = max(worst, rel)
        if rel > 1e-5:
            bad.append(seed)
    ok = not bad and solve_time <= 300
    report(ok, f"30 instances, max rel diff {worst:.2e} (tol 1e-5), solve time {solve_time:.1f}s (<= 300s)")
    assert not bad, f"seeds off the oracle: {bad}"
    assert solve_time <= 300


# -- 2 ---------------------------------------------------------------------
def test_2_relaxation_soundness(report):
    model = MilpModel()
    block = build_rotation_block(model, 50)
    worst = 0.0
    for seed in range(1000):
        R = random_rigid_transform(seed, 180.0, 0.0).rotation
        x = encode_rotation(block, R, np.zeros(model.n_vars))
        viol = check_solution(model, x, feas_tol=1e-9, cap_tol=1e-9)
        worst = max(worst, max((abs(v.residual) for v in viol), default=0.0))
        if viol:
            worst = max(worst, 2e-9)
    report(worst <= 1e-9, f"1000 rotations at n=50, max violation {worst:.1e} (tol 1e-9)")
    assert worst <= 1e-9


# -- shared pipeline benchmark instances (criteria 3-6) ---------------------
def unit_box_instance(seed, n_m, n_s, sigma=0.0):
    rng = np.random.default_rng(seed)
    m = PointCloud(rng.uniform(0, 1, (n_m, 3)))
    gt = random_rigid_transform(1000 + seed, 30.0, 0.3)
    idx = np.sort(rng.choice(n_m, n_s, replace=False))
    s = PointCloud(gt.inverse().apply(m.points[idx]))
    if sigma > 0:
        s = add_gaussian_noise(s, sigma, 2000 + seed)
    return s, m, gt


@pytest.fixture(scope="module")
def bench_runs():
    runs = {"exact": [], "noise": [], "outliers": []}
    for seed in range(3):
        s, m, gt = unit_box_instance(seed, 100, 50)
        cfg = PipelineConfig(ape_node_limit=100, rn_node_limit=100, seed=seed)
        t0 = time.perf_counter()
        rep = run_pipeline(s, m, cfg, ground_truth=gt)
        runs["exact"].append((s, m, gt, cfg, rep, time.perf_counter() - t0, None))
    for seed in range(3):
        s, m, gt = unit_box_instance(10 + seed, 100, 20, sigma=1e-2)
        cfg = PipelineConfig(ape_node_limit=100, rn_node_limit=100, seed=seed, min_sensor_variance=1e-6)
        t0 = time.perf_counter()
        rep = run_pipeline(s, m, cfg, ground_truth=gt)
        runs["noise"].append((s, m, gt, cfg, rep, time.perf_counter() - t0, None))
    for seed in range(10):
        s, m, gt = unit_box_instance(20 + seed, 100, 25, sigma=1e-4)
        # the floor puts phi_max = 1000 at 1.0 length units; outliers sit >= 1.5 away
        s, out = inject_outliers(s, 0.2, 3.0, 3000 + seed, avoid=gt.inverse().apply(m.points), min_distance=1.5)
        # unstructured clouds give ICP a narrow basin; 512 starts missed 2 of 10 seeds
        cfg = PipelineConfig(ape_node_limit=100, rn_node_limit=100, seed=seed, min_sensor_variance=1e-6,
                             ape_starts=2048)
        t0 = time.perf_counter()
        rep = run_pipeline(s, m, cfg, ground_truth=gt)
        runs["outliers"].append((s, m, gt, cfg, rep, time.perf_counter() - t0, out))
    return runs


# -- 3 ---------------------------------------------------------------------
def test_3_exact_recovery(bench_runs, report):
    rot = max(r[4].metrics["rotation_error_deg"] for r in bench_runs["exact"])
    tre = max(r[4].metrics["tre"] for r in bench_runs["exact"])
    wall = max(r[5] for r in bench_runs["exact"])
    ok = rot <= 0.5 and tre <= 1e-3 and wall <= 600
    report(ok, f"3 noiseless 50/100 instances, max rotation error {rot:.4f} deg (<= 0.5), "
               f"max TRE {tre:.2e} (<= 1e-3), max runtime {wall:.1f}s (<= 600s)")
    assert ok


# -- 4 ---------------------------------------------------------------------
def test_4_noise_robustness(bench_runs, report):
    rot = max(r[4].metrics["rotation_error_deg"] for r in bench_runs["noise"])
    wall = max(r[5] for r in bench_runs["noise"])
    ok = rot <= 3.0 and wall <= 900
    report(ok, f"3 instances sigma=1e-2 20/100, max rotation error {rot:.3f} deg (<= 3), "
               f"max runtime {wall:.1f}s (<= 900s)")
    assert ok


# -- 5 ---------------------------------------------------------------------
def test_5_outlier_handling(bench_runs, report):
    precs, recs, rots = [], [], []
    for s, m, gt, cfg, rep, _, out in bench_runs["outliers"]:
        sf = sensor_with_floor(s, cfg.min_sensor_variance)
        # planted outliers really are beyond phi_max in Mahalanobis units
        w = 1.0 / math.sqrt(np.linalg.eigvalsh(sf.covariances[out]).min())
        d = np.linalg.norm(gt.apply(s.points[out])[:, None] - m.points[None], axis=2).min()
        assert d * w > cfg.phi_max
        flagged, truth = set(rep.outliers.tolist()), set(out.tolist())
        tp = len(flagged & truth)
        precs.append(tp / len(flagged) if flagged else 1.0)
        recs.append(tp / len(truth))
        rots.append(rep.metrics["rotation_error_deg"])
    ok = min(precs) >= 0.9 and min(recs) >= 0.9 and max(rots) <= 3.0
    report(ok, f"10 instances with 20% outliers, min precision {min(precs):.2f}, min recall {min(recs):.2f} "
               f"(>= 0.9), max rotation error {max(rots):.3f} deg (<= 3)")
    assert ok


# -- 6 ---------------------------------------------------------------------
def test_6_stage_dominance(bench_runs, report):
    worst = -math.inf
    n = 0
    for runs in bench_runs.values():
        for s, m, gt, cfg, rep, _, _ in runs:
            sf = sensor_with_floor(s, cfg.min_sensor_variance)
            mf = m.with_covariances(np.broadcast_to(cfg.model_variance * np.eye(3), (len(m), 3, 3)).copy())

            def obj(pose):
                return pipeline_objective(pose, sf, mf, cfg.phi_max)[0]

            # recomputed from the poses, not taken from the bookkeeping
            none = obj(cfg.init_pose or RigidTransform.identity())
            after_ape = min(none, obj(rep.stage("APE").pose))
            final = obj(rep.final_pose)
            assert final == pytest.approx(rep.final_objective, rel=1e-12, abs=1e-12)
            worst = max(worst, final - after_ape, after_ape - none)
            n += 1
    ok = worst <= 1e-9
    report(ok, f"{n} benchmark instances, worst increase {worst:.2e} (slack 1e-9)")
    assert ok


# -- 7 ---------------------------------------------------------------------
def test_7_band_monotonicity(report):
    rng = np.random.default_rng(7)
    m = PointCloud(rng.uniform(0, 1, (60, 3)))
    gt = random_rigid_transform(7, 20, 0.2)
    idx = np.sort(rng.choice(60, 3, replace=False))
    s = add_gaussian_noise(PointCloud(gt.inverse().apply(m.points[idx])), 0.02, 8)
    approx = random_rigid_transform(9, 5, 0.02).compose(gt)
    objs, gaps = [], []
    for width in (5, 20, 30, 50):
        p = MipRegistrationProblem(s, m, restrict_band(s, m, approx, width),
                                   RegistrationOptions(metric="euclidean", n_partitions=4))
        res = solve_tracked(p, SolveOptions(gap_tolerance=1e-4, cap_tol=1e-8, time_limit_s=600), initial_poses=[gt])
        assert res.status == STATUS_OPTIMAL
        objs.append(res.relaxed_objective)
        gaps.append(res.gap)
    slack = [1e-4 * abs(a) + 1e-9 for a in objs]
    ok = all(b <= a + e for a, b, e in zip(objs, objs[1:], slack))
    report(ok, "objectives at widths 5/20/30/50: " + ", ".join(f"{o:.6g}" for o in objs) + " (nonincreasing)")
    assert ok


# -- 8 ---------------------------------------------------------------------
def test_8_solver_certification(report):
    # a few extra solves so the check does not depend on the other criteria
    for seed in range(5):
        p = oracle_instance(100 + seed)
        solve_tracked(p, SolveOptions(gap_tolerance=1e-4, cap_tol=1e-8))
    solves = OPTIMAL_SOLVES
    worst_gap, violations = 0.0, 0
    for problem, res in solves:
        model, _, _ = build_model(problem)
        worst_gap = max(worst_gap, res.gap)
        violations += len(check_solution(model, res.solution.values))
    ok = bool(solves) and worst_gap <= 1e-4 and violations == 0
    report(ok, f"{len(solves)} Optimal solves, max gap {worst_gap:.1e} (<= 1e-4), {violations} violations")
    assert ok


# -- 9 ---------------------------------------------------------------------
def test_9_unit_numerics(report):
    rng = np.random.default_rng(9)
    chol = 0.0
    for _ in range(1000):
        a = rng.normal(size=(3, 3))
        spd = a @ a.T + 1e-3 * np.eye(3)
        L = cholesky_lower(spd)
        chol = max(chol, np.max(np.abs(L @ L.T - spd)) / max(1.0, np.max(np.abs(spd))))
    kab = 0.0
    for seed in range(100):
        T = random_rigid_transform(seed, 180.0, 1.0)
        src = rng.normal(size=(20, 3))
        est = kabsch_weighted(src, T.apply(src))
        kab = max(kab, np.max(np.abs(est.rotation - T.rotation)), np.max(np.abs(est.translation - T.translation)))
    corner = 0.0
    # at each corner of the unit box the envelope pins v to x*y from both sides
    for x, y in itertools.product((-1.0, 1.0), repeat=2):
        for sense in (1.0, -1.0):
            mdl = MilpModel()
            a, b = mdl.add_variable(-1, 1), mdl.add_variable(-1, 1)
            v = mccormick_envelope(mdl, a, b)
            mdl.set_bounds(a, x, x)
            mdl.set_bounds(b, y, y)
            mdl.set_objective({v: sense})
            corner = max(corner, abs(branch_and_bound(mdl).values[v] - x * y))
    geo = 0.0
    for seed in range(200):
        R = random_rigid_transform(seed, 180.0, 0.0).rotation
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(0, 179.0)
        R2 = axis_angle_to_matrix(axis, math.radians(angle)) @ R
        geo = max(geo, abs(rotation_error_deg(R2, R) - angle))
    ok = chol < 1e-10 and kab < 1e-9 and corner <= 1e-12 and geo <= 1e-9
    report(ok, f"cholesky {chol:.1e} (< 1e-10), kabsch {kab:.1e} (< 1e-9), "
               f"mccormick corners {corner:.1e} (<= 1e-12), geodesic {geo:.1e} (<= 1e-9)")
    assert ok
