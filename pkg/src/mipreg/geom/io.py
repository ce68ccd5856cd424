"""ASCII readers/writers: OBJ and PLY meshes, text point clouds, pose files."""
from __future__ import annotations

import os

import numpy as np

from ..errors import ParseError
from .clouds import PointCloud, TriangleMesh
from .transforms import RigidTransform

_UPPER = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


def fmt(x: float) -> str:
    """Render a float at 12 significant digits (the golden-file precision)."""
    return f"{float(x):.12g}"


def _data_lines(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def read_obj(path) -> TriangleMesh:
    vertices, faces = [], []
    for lineno, line in _data_lines(path):
        parts = line.split()
        tag = parts[0]
        try:
            if tag == "v":
                vertices.append([float(x) for x in parts[1:4]])
                if len(parts) < 4:
                    raise ValueError("vertex needs 3 coordinates")
            elif tag == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) < 3:
                    raise ValueError("face needs at least 3 vertices")
                idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
                # fan-triangulate polygons
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
    try:
        return TriangleMesh.from_arrays(np.array(vertices).reshape(-1, 3), np.array(faces, dtype=int).reshape(-1, 3))
    except ValueError as exc:
        raise ParseError(str(exc), path) from None


def write_obj(path, mesh: TriangleMesh) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write("v " + " ".join(fmt(x) for x in v) + "\n")
        for f in mesh.faces:
            fh.write("f " + " ".join(str(i + 1) for i in f) + "\n")


def read_ply(path) -> TriangleMesh:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", path, 1)
    n_vert = n_face = 0
    vert_props: list[str] = []
    current = None
    body = None
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1] != "ascii":
                raise ParseError("only ASCII PLY is supported", path, i)
        elif parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vert = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            vert_props.append(parts[-1])
        elif parts[0] == "end_header":
            body = i
            break
    if body is None:
        raise ParseError("missing end_header", path)
    try:
        ix = [vert_props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise ParseError("vertex element lacks x/y/z", path) from None
    rows = [(lineno, line.split()) for lineno, line in enumerate(lines[body:], start=body + 1) if line.strip()]
    if len(rows) < n_vert + n_face:
        raise ParseError("file ends before all elements were read", path, len(lines))
    vertices, faces = [], []
    for lineno, parts in rows[:n_vert]:
        try:
            vertices.append([float(parts[k]) for k in ix])
        except (ValueError, IndexError):
            raise ParseError("bad vertex record", path, lineno) from None
    for lineno, parts in rows[n_vert:n_vert + n_face]:
        try:
            cnt = int(parts[0])
            idx = [int(p) for p in parts[1:1 + cnt]]
        except (ValueError, IndexError):
            raise ParseError("bad face record", path, lineno) from None
        if len(idx) != cnt or cnt < 3:
            raise ParseError("bad face record", path, lineno)
        for k in range(1, cnt - 1):
            faces.append([idx[0], idx[k], idx[k + 1]])
    try:
        return TriangleMesh.from_arrays(np.array(vertices).reshape(-1, 3), np.array(faces, dtype=int).reshape(-1, 3))
    except ValueError as exc:
        raise ParseError(str(exc), path) from None


def write_ply(path, mesh: TriangleMesh) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(mesh.vertices)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {len(mesh.faces)}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for v in mesh.vertices:
            fh.write(" ".join(fmt(x) for x in v) + "\n")
        for f in mesh.faces:
            fh.write("3 " + " ".join(str(int(i)) for i in f) + "\n")


def read_mesh(path) -> TriangleMesh:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        return read_obj(path)
    if ext == ".ply":
        return read_ply(path)
    raise ParseError(f"unknown mesh extension {ext!r}", path)


def read_cloud(path) -> PointCloud:
    """Whitespace-separated rows of 3 (xyz) or 9 (xyz + upper-triangular covariance) numbers."""
    rows, ncol = [], None
    for lineno, line in _data_lines(path):
        parts = line.split()
        if ncol is None:
            ncol = len(parts)
            if ncol not in (3, 9):
                raise ParseError(f"expected 3 or 9 columns, got {ncol}", path, lineno)
        elif len(parts) != ncol:
            raise ParseError(f"expected {ncol} columns, got {len(parts)}", path, lineno)
        try:
            rows.append([float(x) for x in parts])
        except ValueError:
            raise ParseError("non-numeric value", path, lineno) from None
    data = np.array(rows, dtype=float).reshape(-1, ncol or 3)
    cov = None
    if ncol == 9:
        cov = np.empty((len(data), 3, 3))
        for c, (i, j) in enumerate(_UPPER):
            cov[:, i, j] = data[:, 3 + c]
            cov[:, j, i] = data[:, 3 + c]
    return PointCloud(data[:, :3], cov)


def write_cloud(path, cloud: PointCloud) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, p in enumerate(cloud.points):
            vals = list(p)
            if cloud.covariances is not None:
                c = cloud.covariances[i]
                vals += [c[a, b] for a, b in _UPPER]
            fh.write(" ".join(fmt(x) for x in vals) + "\n")


def read_pose(path) -> RigidTransform:
    """First non-comment line: 12 numbers, row-major rotation then translation."""
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) != 12:
            raise ParseError(f"pose needs 12 numbers, got {len(parts)}", path, lineno)
        try:
            return RigidTransform.from_row([float(x) for x in parts])
        except ValueError:
            raise ParseError("non-numeric value", path, lineno) from None
    raise ParseError("no pose found", path)


def write_pose(path, pose: RigidTransform, comment: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz\n")
        if comment:
            fh.write(f"# {comment}\n")
        fh.write(" ".join(fmt(x) for x in pose.as_row()) + "\n")


def read_indices(path) -> np.ndarray:
    vals = []
    for lineno, line in _data_lines(path):
        try:
            vals.extend(int(x) for x in line.split())
        except ValueError:
            raise ParseError("non-integer index", path, lineno) from None
    return np.array(vals, dtype=int)


def write_indices(path, indices) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in indices:
            fh.write(f"{int(i)}\n")
