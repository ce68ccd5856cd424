"""Geometry core: clouds, meshes, poses, covariances, synthetic data and metrics."""
from .clouds import (
    PointCloud,
    TriangleMesh,
    add_gaussian_noise,
    apply_transform,
    estimate_local_covariances,
    face_areas,
    inject_outliers,
    nearest_neighbors,
    sample_mesh_points,
    sample_mesh_surface,
)
from .metrics import RegistrationMetrics, metrics, rotation_error_deg
from .transforms import (
    RigidTransform,
    axis_angle_to_matrix,
    cholesky_lower,
    convert_prime_pose,
    is_rotation,
    matrix_to_axis_angle,
    project_to_so3,
    random_rigid_transform,
    rot_x,
    rot_y,
    rot_z,
    rotation_angle,
    rotation_angle_deg,
    whitening_factor,
)

__all__ = [
    "PointCloud",
    "RegistrationMetrics",
    "RigidTransform",
    "TriangleMesh",
    "add_gaussian_noise",
    "apply_transform",
    "axis_angle_to_matrix",
    "cholesky_lower",
    "convert_prime_pose",
    "estimate_local_covariances",
    "face_areas",
    "inject_outliers",
    "is_rotation",
    "matrix_to_axis_angle",
    "metrics",
    "nearest_neighbors",
    "project_to_so3",
    "random_rigid_transform",
    "rot_x",
    "rot_y",
    "rot_z",
    "rotation_angle",
    "rotation_angle_deg",
    "rotation_error_deg",
    "sample_mesh_points",
    "sample_mesh_surface",
    "whitening_factor",
]
