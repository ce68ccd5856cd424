from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .clouds import PointCloud
from .transforms import RigidTransform, rotation_angle_deg


@dataclass(frozen=True)
class RegistrationMetrics:
    rotation_error_deg: float
    translation_error: float
    tre: float
    objective: float

    def as_dict(self) -> dict:
        return asdict(self)


def rotation_error_deg(r_est, r_gt) -> float:
    """Geodesic angle between two rotations, in degrees."""
    return rotation_angle_deg(np.asarray(r_est, dtype=float).T @ np.asarray(r_gt, dtype=float))


def metrics(
    estimated: RigidTransform,
    ground_truth: RigidTransform,
    sensor: PointCloud,
    objective: float = 0.0,
) -> RegistrationMetrics:
    """Rotation/translation error and TRE (mean displacement of the sensor points
    between the two registrations)."""
    rot = rotation_error_deg(estimated.rotation, ground_truth.rotation)
    trans = float(np.linalg.norm(estimated.translation - ground_truth.translation))
    if len(sensor):
        diff = estimated.apply(sensor.points) - ground_truth.apply(sensor.points)
        tre = float(np.linalg.norm(diff, axis=1).mean())
    else:
        tre = 0.0
    return RegistrationMetrics(rot, trans, tre, float(abs(objective)))
