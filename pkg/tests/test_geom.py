import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mipreg.errors import EmptyMesh, NotARotation, NotPositiveDefinite, ParseError, Singular
from mipreg.geom import (
    PointCloud,
    RigidTransform,
    TriangleMesh,
    add_gaussian_noise,
    apply_transform,
    axis_angle_to_matrix,
    cholesky_lower,
    convert_prime_pose,
    estimate_local_covariances,
    inject_outliers,
    is_rotation,
    matrix_to_axis_angle,
    metrics,
    nearest_neighbors,
    project_to_so3,
    random_rigid_transform,
    rot_x,
    rot_z,
    rotation_angle_deg,
    rotation_error_deg,
    sample_mesh_points,
    sample_mesh_surface,
    whitening_factor,
)
from mipreg.geom import io

seeds = st.integers(0, 2**31 - 1)


def random_rotation(seed):
    return random_rigid_transform(seed, 180.0, 0.0).rotation


# -- transforms ------------------------------------------------------------
def test_cholesky_identity_and_diagonal():
    assert np.array_equal(cholesky_lower(np.eye(3)), np.eye(3))
    assert np.allclose(cholesky_lower(np.diag([4.0, 9.0, 1.0])), np.diag([2.0, 3.0, 1.0]), atol=0)


@given(seeds)
def test_cholesky_recovers_known_factor(seed):
    rng = np.random.default_rng(seed)
    low = np.tril(rng.uniform(-1, 1, (3, 3)))
    low[np.diag_indices(3)] = rng.uniform(0.5, 2.0, 3)
    b = cholesky_lower(low @ low.T)
    assert np.allclose(b, low, atol=1e-10)
    assert np.allclose(np.triu(b, 1), 0.0)


def test_cholesky_rejects_indefinite_and_asymmetric():
    with pytest.raises(NotPositiveDefinite):
        cholesky_lower(np.diag([1.0, -1.0, 1.0]))
    a = np.eye(3)
    a[0, 1] = 0.5
    with pytest.raises(NotPositiveDefinite):
        cholesky_lower(a)


@given(seeds)
def test_whitening_factor_gives_mahalanobis_norm(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 3))
    sigma = a @ a.T + 0.1 * np.eye(3)
    w = whitening_factor(sigma)
    r = rng.normal(size=3)
    assert math.isclose(np.sum((w @ r) ** 2), r @ np.linalg.solve(sigma, r), rel_tol=1e-9)


def test_apply_transform_examples():
    cloud = PointCloud([[1.0, 0.0, 0.0]], [np.diag([1.0, 2.0, 3.0])])
    same = apply_transform(RigidTransform.identity(), cloud)
    assert np.array_equal(same.points, cloud.points)
    out = apply_transform(RigidTransform(rot_z(math.pi / 2), np.zeros(3)), cloud)
    assert np.allclose(out.points, [[0.0, 1.0, 0.0]], atol=1e-15)
    assert np.allclose(out.covariances[0], np.diag([2.0, 1.0, 3.0]), atol=1e-15)


def test_convert_prime_pose_examples():
    p = convert_prime_pose(np.eye(3), np.zeros(3))
    assert p == RigidTransform.identity()
    p = convert_prime_pose(np.eye(3), [1.0, 2.0, 3.0])
    assert np.allclose(p.translation, [-1.0, -2.0, -3.0])
    p = convert_prime_pose(rot_z(math.pi / 2), [1.0, 0.0, 0.0])
    assert np.allclose(p.rotation, rot_z(-math.pi / 2), atol=1e-15)
    assert np.allclose(p.translation, [0.0, 1.0, 0.0], atol=1e-15)
    with pytest.raises(NotARotation):
        convert_prime_pose(2 * np.eye(3), np.zeros(3))


@given(seeds)
def test_convert_prime_pose_is_involution(seed):
    t = random_rigid_transform(seed, 180, 5)
    once = convert_prime_pose(t.rotation, t.translation)
    back = convert_prime_pose(once.rotation, once.translation)
    assert np.allclose(back.rotation, t.rotation, atol=1e-12)
    assert np.allclose(back.translation, t.translation, atol=1e-12)


@given(seeds)
def test_project_to_so3_fixed_point_and_scale(seed):
    r = random_rotation(seed)
    assert np.allclose(project_to_so3(r), r, atol=1e-12)
    assert np.allclose(project_to_so3(1.1 * r), r, atol=1e-12)
    assert is_rotation(project_to_so3(np.random.default_rng(seed).normal(size=(3, 3))))


def test_project_to_so3_matches_sampled_oracle():
    rng = np.random.default_rng(7)
    r = random_rotation(3)
    m = r + 0.01 * rng.normal(size=(3, 3))
    proj = project_to_so3(m)
    # sampled oracle: dense random rotations around r plus a local polish
    best, best_d = r, np.linalg.norm(m - r)
    for scale in (0.05, 0.01, 0.002, 0.0005):
        for _ in range(4000):
            w = rng.normal(size=3) * scale
            c = axis_angle_to_matrix(w, np.linalg.norm(w)) @ best
            d = np.linalg.norm(m - c)
            if d < best_d:
                best, best_d = c, d
    assert np.linalg.norm(proj - best) < 1e-2
    assert np.linalg.norm(m - proj) <= best_d + 1e-12


def test_project_to_so3_singular():
    with pytest.raises(Singular):
        project_to_so3(np.zeros((3, 3)))


def test_random_rigid_transform_examples():
    assert random_rigid_transform(5, 0.0, 0.0) == RigidTransform.identity()
    assert random_rigid_transform(9, 40, 1) == random_rigid_transform(9, 40, 1)
    axes = []
    for s in range(10000):
        axis, _ = matrix_to_axis_angle(random_rigid_transform(s, 180.0, 0.0).rotation)
        axes.append(axis)
    assert np.linalg.norm(np.mean(axes, axis=0)) < 0.05


@given(seeds, st.floats(0, 180), st.floats(0, 3))
def test_random_rigid_transform_bounds(seed, angle, trans):
    t = random_rigid_transform(seed, angle, trans)
    assert t.is_valid()
    assert rotation_angle_deg(t.rotation) <= angle + 1e-9
    assert np.linalg.norm(t.translation) <= trans + 1e-12


@given(seeds)
def test_compose_and_inverse(seed):
    a = random_rigid_transform(seed, 180, 2)
    b = random_rigid_transform(seed + 1, 180, 2)
    p = np.random.default_rng(seed).normal(size=(5, 3))
    assert np.allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-12)
    assert np.allclose(a.inverse().apply(a.apply(p)), p, atol=1e-12)
    assert np.allclose(RigidTransform.from_row(a.as_row()).as_row(), a.as_row())


@given(seeds, st.floats(0.0, 179.0))
def test_geodesic_error_matches_composed_angle(seed, deg):
    r = random_rotation(seed)
    axis = np.random.default_rng(seed).normal(size=3)
    d = axis_angle_to_matrix(axis / np.linalg.norm(axis), math.radians(deg))
    assert abs(rotation_error_deg(d @ r, r) - deg) < 1e-9
    assert abs(rotation_error_deg(r @ d, r) - deg) < 1e-9


@given(seeds)
def test_axis_angle_round_trip(seed):
    r = random_rotation(seed)
    axis, ang = matrix_to_axis_angle(r)
    assert np.allclose(axis_angle_to_matrix(axis, ang), r, atol=1e-9)


def test_axis_angle_near_pi():
    r = rot_x(math.pi)
    axis, ang = matrix_to_axis_angle(r)
    assert math.isclose(ang, math.pi)
    assert np.allclose(np.abs(axis), [1, 0, 0])


# -- clouds and meshes -----------------------------------------------------
def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), np.zeros((3, 3, 3)))
    bad = PointCloud(np.zeros((1, 3)), [np.diag([1.0, 0.0, 1.0])])
    with pytest.raises(ValueError):
        bad.validate()
    PointCloud(np.zeros((1, 3)), [np.eye(3)]).validate()
    assert len(PointCloud([])) == 0


def test_mesh_drops_degenerate_faces():
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]]
    mesh = TriangleMesh.from_arrays(v, [[0, 1, 2], [0, 0, 1], [0, 1, 3]])
    assert mesh.n_faces == 1
    assert mesh.dropped_faces == 2
    with pytest.raises(ValueError):
        TriangleMesh.from_arrays(v, [[0, 1, 9]])


TRI = TriangleMesh.from_arrays([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])


@given(seeds)
def test_sample_single_triangle_inside(seed):
    p = sample_mesh_points(TRI, 1, seed).points[0]
    assert p[0] >= 0 and p[1] >= 0 and p[0] + p[1] <= 1 + 1e-12 and p[2] == 0


def test_sample_counts_and_centroid():
    pts = sample_mesh_points(TRI, 10000 // 100, 0)
    assert len(pts) == 100
    big = np.vstack([sample_mesh_points(TRI, 100, s).points for s in range(100)])
    assert np.linalg.norm(big.mean(axis=0) - [1 / 3, 1 / 3, 0]) < 0.02
    two = TriangleMesh.from_arrays([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], [[0, 1, 2], [1, 3, 2]])
    assert len(sample_mesh_points(two, 3, 1)) == 6
    with pytest.raises(EmptyMesh):
        sample_mesh_points(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))), 1, 0)
    with pytest.raises(EmptyMesh):
        sample_mesh_surface(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))), 5, 0)


def test_sample_surface_is_area_weighted():
    # big triangle has 4x the area of the small one
    v = [[0, 0, 0], [2, 0, 0], [0, 2, 0], [5, 0, 0], [6, 0, 0], [5, 1, 0]]
    mesh = TriangleMesh.from_arrays(v, [[0, 1, 2], [3, 4, 5]])
    pts = sample_mesh_surface(mesh, 20000, 3).points
    frac = np.mean(pts[:, 0] >= 5)
    assert abs(frac - 0.2) < 0.01


def test_gaussian_noise_examples():
    cloud = PointCloud(np.zeros((10000, 3)))
    same = add_gaussian_noise(cloud, 0.0, 1)
    assert np.array_equal(same.points, cloud.points)
    assert np.allclose(same.covariances[0], 1e-24 * np.eye(3))
    noisy = add_gaussian_noise(cloud, 1e-2, 1)
    assert abs(noisy.points.std() - 1e-2) < 1e-3
    assert np.array_equal(noisy.points, add_gaussian_noise(cloud, 1e-2, 1).points)
    assert np.allclose(noisy.covariances[5], 1e-4 * np.eye(3))


def test_inject_outliers_examples():
    cloud = PointCloud(np.random.default_rng(0).uniform(size=(100, 3)))
    same, idx = inject_outliers(cloud, 0.0, 2.0, 0)
    assert np.array_equal(same.points, cloud.points) and len(idx) == 0
    _, idx = inject_outliers(cloud, 0.2, 2.0, 0)
    assert len(idx) == 20 and np.all(np.diff(idx) > 0)
    out, idx = inject_outliers(cloud, 0.4, 1.0, 1)
    lo, hi = cloud.points.min(axis=0), cloud.points.max(axis=0)
    assert np.all(out.points[idx] >= lo - 1e-12) and np.all(out.points[idx] <= hi + 1e-12)
    keep = np.setdiff1d(np.arange(100), idx)
    assert np.array_equal(out.points[keep], cloud.points[keep])


def test_inject_outliers_min_distance():
    cloud = PointCloud(np.random.default_rng(0).uniform(size=(50, 3)))
    out, idx = inject_outliers(cloud, 0.2, 4.0, 3, avoid=cloud.points, min_distance=0.5)
    _, d = nearest_neighbors(out.points[idx], cloud.points)
    assert np.all(d > 0.5)


@given(seeds, st.integers(1, 4))
def test_nearest_neighbors_matches_brute_force(seed, k):
    rng = np.random.default_rng(seed)
    q, r = rng.normal(size=(7, 3)), rng.normal(size=(9, 3))
    idx, dist = nearest_neighbors(q, r, k)
    full = np.linalg.norm(q[:, None] - r[None], axis=2)
    assert np.allclose(dist, np.sort(full, axis=1)[:, :k])
    assert np.allclose(np.take_along_axis(full, idx, axis=1), dist)


def test_local_covariances_plane_and_isotropic():
    g = np.stack(np.meshgrid(np.linspace(0, 1, 10), np.linspace(0, 1, 10)), -1).reshape(-1, 2)
    plane = PointCloud(np.column_stack([g, np.zeros(len(g))]))
    out = estimate_local_covariances(plane, 8, 1e-4, 1e-2)
    assert np.allclose(out.covariances[55], np.diag([1e-2, 1e-2, 1e-4]), atol=1e-12)
    iso = estimate_local_covariances(plane, 8, 3e-3, 3e-3)
    assert np.allclose(iso.covariances, 3e-3 * np.eye(3), atol=1e-15)


def test_local_covariances_sphere_normals():
    rng = np.random.default_rng(2)
    p = rng.normal(size=(800, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    out = estimate_local_covariances(PointCloud(p), 8, 1e-4, 1e-2)
    normals = np.array([np.linalg.eigh(c)[1][:, 0] for c in out.covariances])
    ang = np.degrees(np.arccos(np.clip(np.abs(np.sum(normals * p, axis=1)), 0, 1)))
    assert np.mean(ang <= 15.0) >= 0.95


def test_local_covariances_degenerate_report():
    line = PointCloud(np.column_stack([np.linspace(0, 1, 10), np.zeros(10), np.zeros(10)]))
    out, bad = estimate_local_covariances(line, 4, 1e-4, 1e-2, return_report=True)
    assert len(bad) == 10
    assert np.allclose(out.covariances[0], 1e-2 * np.eye(3))


# -- metrics ---------------------------------------------------------------
def test_metrics_examples():
    sensor = PointCloud(np.random.default_rng(0).normal(size=(20, 3)))
    gt = random_rigid_transform(4, 50, 1)
    m = metrics(gt, gt, sensor)
    assert m.rotation_error_deg == 0 and m.translation_error == 0 and m.tre == 0
    est = RigidTransform(rot_z(math.radians(1.0)) @ gt.rotation, gt.translation)
    assert abs(metrics(est, gt, sensor).rotation_error_deg - 1.0) < 1e-9
    shifted = RigidTransform(gt.rotation, gt.translation + [0.1, 0, 0])
    m = metrics(shifted, gt, sensor)
    assert math.isclose(m.translation_error, 0.1) and math.isclose(m.tre, 0.1)


@given(seeds)
def test_metrics_nonnegative_and_bounded(seed):
    sensor = PointCloud(np.random.default_rng(seed).normal(size=(5, 3)))
    m = metrics(random_rigid_transform(seed, 180, 1), random_rigid_transform(seed + 1, 180, 1), sensor, -2.0)
    d = m.as_dict()
    assert all(v >= 0 for v in d.values())
    assert m.rotation_error_deg <= 180.0


# -- io --------------------------------------------------------------------
def test_cloud_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 3, 3))
    cloud = PointCloud(rng.normal(size=(4, 3)), a @ a.transpose(0, 2, 1))
    io.write_cloud(tmp_path / "c.xyz", cloud)
    back = io.read_cloud(tmp_path / "c.xyz")
    assert np.allclose(back.points, cloud.points, rtol=1e-11)
    assert np.allclose(back.covariances, cloud.covariances, rtol=1e-11)
    io.write_cloud(tmp_path / "p.xyz", PointCloud(cloud.points))
    assert io.read_cloud(tmp_path / "p.xyz").covariances is None


def test_pose_and_index_round_trip(tmp_path):
    t = random_rigid_transform(3, 90, 1)
    io.write_pose(tmp_path / "p.pose", t, "note")
    back = io.read_pose(tmp_path / "p.pose")
    assert np.allclose(back.as_row(), t.as_row(), rtol=1e-11)
    io.write_indices(tmp_path / "i.idx", [3, 1, 4])
    assert list(io.read_indices(tmp_path / "i.idx")) == [3, 1, 4]


def test_mesh_round_trip(tmp_path, bracket_path):
    mesh = io.read_mesh(bracket_path)
    assert mesh.n_faces == 320
    io.write_ply(tmp_path / "m.ply", mesh)
    io.write_obj(tmp_path / "m.obj", mesh)
    for name in ("m.ply", "m.obj"):
        back = io.read_mesh(tmp_path / name)
        assert np.allclose(back.vertices, mesh.vertices) and np.array_equal(back.faces, mesh.faces)


def test_parse_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("# header\n1 2 3\n1 2\n")
    with pytest.raises(ParseError) as e:
        io.read_cloud(p)
    assert e.value.line == 3
    p.write_text("1 2 x\n")
    with pytest.raises(ParseError) as e:
        io.read_cloud(p)
    assert e.value.line == 1
    p = tmp_path / "bad.pose"
    p.write_text("# c\n1 0 0 0 1 0 0 0 1 0 0\n")
    with pytest.raises(ParseError) as e:
        io.read_pose(p)
    assert e.value.line == 2
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0\n")
    with pytest.raises(ParseError) as e:
        io.read_obj(p)
    assert e.value.line == 2
    with pytest.raises(ParseError):
        io.read_mesh(tmp_path / "mesh.stl")


def test_fmt_twelve_significant_digits():
    assert io.fmt(1 / 3) == "0.333333333333"
    assert io.fmt(123456789.123456) == "123456789.123"
