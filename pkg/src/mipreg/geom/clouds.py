"""Point clouds, triangle meshes and synthetic-data generators."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import EmptyMesh
from .transforms import RigidTransform

log = logging.getLogger(__name__)

MIN_NOISE_SIGMA = 1e-12


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered 3D points with optional per-point 3x3 covariances."""

    points: np.ndarray
    covariances: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, copy=True)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.covariances is not None:
            cov = np.array(self.covariances, dtype=float, copy=True)
            if cov.shape != (len(pts), 3, 3):
                raise ValueError(f"covariances must have shape ({len(pts)}, 3, 3), got {cov.shape}")
            cov.setflags(write=False)
            object.__setattr__(self, "covariances", cov)

    def __len__(self):
        return len(self.points)

    @property
    def has_covariances(self) -> bool:
        return self.covariances is not None

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=int)
        cov = None if self.covariances is None else self.covariances[idx]
        return PointCloud(self.points[idx], cov)

    def with_covariances(self, covariances) -> "PointCloud":
        return PointCloud(self.points, covariances)

    def validate(self) -> None:
        """Raise ``ValueError`` if a covariance is asymmetric or not positive definite."""
        if self.covariances is None:
            return
        for i, c in enumerate(self.covariances):
            scale = max(1.0, float(np.abs(c).max()))
            if np.abs(c - c.T).max() > 1e-12 * scale:
                raise ValueError(f"covariance {i} is not symmetric")
            if np.linalg.eigvalsh(c)[0] <= 0.0:
                raise ValueError(f"covariance {i} is not positive definite")


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    dropped_faces: int = field(default=0)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float, copy=True).reshape(-1, 3)
        f = np.array(self.faces, dtype=int, copy=True).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @classmethod
    def from_arrays(cls, vertices, faces, area_tol: float = 1e-14) -> "TriangleMesh":
        """Build a mesh, dropping faces with repeated indices or zero area."""
        v = np.asarray(vertices, dtype=float).reshape(-1, 3)
        f = np.asarray(faces, dtype=int).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        distinct = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
        areas = face_areas(v, f)
        keep = distinct & (areas > area_tol)
        dropped = int(len(f) - keep.sum())
        if dropped:
            log.warning("dropped %d degenerate face(s)", dropped)
        return cls(v, f[keep], dropped)

    @property
    def n_faces(self) -> int:
        return len(self.faces)


def face_areas(vertices, faces) -> np.ndarray:
    if len(faces) == 0:
        return np.zeros(0)
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def apply_transform(pose: RigidTransform, cloud: PointCloud) -> PointCloud:
    """Map every point through ``pose``; covariances become ``R Σ R^T``."""
    pts = pose.apply(cloud.points)
    cov = None
    if cloud.covariances is not None:
        r = pose.rotation
        cov = np.einsum("ij,njk,lk->nil", r, cloud.covariances, r)
    return PointCloud(pts, cov)


def sample_mesh_points(mesh: TriangleMesh, per_face: int, seed: int) -> PointCloud:
    """``per_face`` uniform samples on every triangle, face-major order."""
    if mesh.n_faces == 0:
        raise EmptyMesh("mesh has no faces")
    if not 1 <= per_face <= 100:
        raise ValueError("per_face must lie in [1, 100]")
    rng = np.random.default_rng(seed)
    uv = rng.uniform(size=(mesh.n_faces, per_face, 2))
    flip = uv.sum(axis=2) > 1.0
    uv[flip] = 1.0 - uv[flip]
    a, b, c = (mesh.vertices[mesh.faces[:, k]][:, None, :] for k in range(3))
    pts = a + uv[..., :1] * (b - a) + uv[..., 1:] * (c - a)
    return PointCloud(pts.reshape(-1, 3))


def sample_mesh_surface(mesh: TriangleMesh, count: int, seed: int) -> PointCloud:
    """``count`` area-weighted uniform samples over the whole surface."""
    if mesh.n_faces == 0:
        raise EmptyMesh("mesh has no faces")
    rng = np.random.default_rng(seed)
    areas = face_areas(mesh.vertices, mesh.faces)
    face = rng.choice(mesh.n_faces, size=count, p=areas / areas.sum())
    uv = rng.uniform(size=(count, 2))
    flip = uv.sum(axis=1) > 1.0
    uv[flip] = 1.0 - uv[flip]
    a, b, c = (mesh.vertices[mesh.faces[face, k]] for k in range(3))
    return PointCloud(a + uv[:, :1] * (b - a) + uv[:, 1:] * (c - a))


def add_gaussian_noise(cloud: PointCloud, sigma: float, seed: int) -> PointCloud:
    """Isotropic N(0, sigma^2) per coordinate; records ``sigma^2 I`` covariances."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = np.random.default_rng(seed)
    pts = cloud.points + sigma * rng.standard_normal(cloud.points.shape)
    s = max(sigma, MIN_NOISE_SIGMA)
    cov = np.broadcast_to(s * s * np.eye(3), (len(cloud), 3, 3))
    return PointCloud(pts, cov)


def inject_outliers(
    cloud: PointCloud,
    fraction: float,
    bbox_scale: float,
    seed: int,
    avoid=None,
    min_distance: float = 0.0,
    max_tries: int = 1000,
) -> tuple[PointCloud, np.ndarray]:
    """Replace ``ceil(fraction * n)`` points by uniform draws in the scaled bounding box.

    When ``avoid`` (an (m, 3) array) and ``min_distance`` are given, draws closer
    than ``min_distance`` to any row of ``avoid`` are rejected and redrawn.
    Returns the new cloud and the sorted outlier indices.
    """
    if not 0.0 <= fraction <= 0.9:
        raise ValueError("fraction must lie in [0, 0.9]")
    n = len(cloud)
    count = math.ceil(round(fraction * n, 9))
    if count == 0:
        return cloud, np.zeros(0, dtype=int)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=count, replace=False))
    lo, hi = cloud.points.min(axis=0), cloud.points.max(axis=0)
    center, half = (lo + hi) / 2.0, (hi - lo) / 2.0 * bbox_scale
    pts = np.array(cloud.points)
    ref = None if avoid is None else np.asarray(avoid, dtype=float)
    for i in idx:
        for _ in range(max_tries):
            p = center + half * rng.uniform(-1.0, 1.0, size=3)
            if ref is None or min_distance <= 0 or np.min(np.linalg.norm(ref - p, axis=1)) > min_distance:
                break
        else:
            raise ValueError("could not place outlier away from the reference points")
        pts[i] = p
    return PointCloud(pts, cloud.covariances), idx


def nearest_neighbors(query, reference, k: int = 1, chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Exact brute-force k-NN. Returns (indices, distances), both (n_query, k).

    Ties are broken by the lower reference index.
    """
    q = np.asarray(query, dtype=float).reshape(-1, 3)
    r = np.asarray(reference, dtype=float).reshape(-1, 3)
    k = min(k, len(r))
    idx = np.empty((len(q), k), dtype=int)
    dist = np.empty((len(q), k))
    r2 = np.einsum("ij,ij->i", r, r)
    for start in range(0, len(q), chunk):
        qq = q[start:start + chunk]
        d2 = np.einsum("ij,ij->i", qq, qq)[:, None] - 2.0 * qq @ r.T + r2[None, :]
        np.maximum(d2, 0.0, out=d2)
        if k == 1:
            sel = np.argmin(d2, axis=1)[:, None]
        elif k < len(r):
            part = np.argpartition(d2, k - 1, axis=1)[:, :k]
            # rows can have ties at the partition boundary; resolve on full rows
            kth = np.take_along_axis(d2, part, axis=1).max(axis=1)
            cand_mask = d2 <= kth[:, None]
            order = []
            for row in range(len(qq)):
                cand = np.flatnonzero(cand_mask[row])
                o = cand[np.lexsort((cand, d2[row, cand]))][:k]
                order.append(o)
            sel = np.array(order)
        else:
            sel = np.argsort(d2, axis=1, kind="stable")
        idx[start:start + chunk] = sel
        dist[start:start + chunk] = np.sqrt(np.take_along_axis(d2, sel, axis=1))
    return idx, dist


def estimate_local_covariances(
    cloud: PointCloud,
    k_neighbors: int = 8,
    normal_variance: float = 1e-4,
    tangent_variance: float = 1e-2,
    return_report: bool = False,
):
    """Surface-aligned covariances from PCA of each point's k-neighbourhood.

    Assigns ``normal_variance * n n^T + tangent_variance * (I - n n^T)`` where ``n``
    is the least-variance principal direction. Neighbourhoods of rank < 2 fall back
    to ``tangent_variance * I``; with ``return_report`` their indices are returned
    alongside the cloud.
    """
    if k_neighbors < 3:
        raise ValueError("k_neighbors must be >= 3")
    if len(cloud) < k_neighbors:
        raise ValueError("cloud has fewer points than k_neighbors")
    if normal_variance > tangent_variance:
        raise ValueError("normal_variance must not exceed tangent_variance")
    if normal_variance <= 0:
        raise ValueError("normal_variance must be > 0")
    pts = cloud.points
    nbr, _ = nearest_neighbors(pts, pts, k_neighbors)
    cov = np.empty((len(pts), 3, 3))
    degenerate = []
    for i, row in enumerate(nbr):
        local = pts[row] - pts[row].mean(axis=0)
        evals, evecs = np.linalg.eigh(local.T @ local / len(row))
        scale = max(evals[-1], 1e-300)
        if evals[1] <= 1e-12 * scale or evals[-1] <= 0:
            degenerate.append(i)
            cov[i] = tangent_variance * np.eye(3)
            continue
        n = evecs[:, 0]
        nn = np.outer(n, n)
        cov[i] = normal_variance * nn + tangent_variance * (np.eye(3) - nn)
        cov[i] = 0.5 * (cov[i] + cov[i].T)
    if degenerate:
        log.warning("%d degenerate neighbourhood(s) fell back to isotropic covariance", len(degenerate))
    out = PointCloud(pts, cov)
    if return_report:
        return out, degenerate
    return out
