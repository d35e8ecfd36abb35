"""Mesh and point-cloud ingestion, surface sampling, and primitive moments.

A *primitive* summarizes one geometric element (triangle, point, or
measurement rectangle) by its mean, covariance, and size. Those three
moments are all the fitting machinery ever looks at, so everything in this
module boils down to producing them correctly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

__all__ = [
    "TriangleMesh",
    "PointCloud",
    "Primitive",
    "load_mesh",
    "load_points",
    "save_mesh",
    "save_points",
    "triangle_moments",
    "mesh_to_primitives",
    "points_to_primitives",
    "rect_primitive",
    "pack_primitives",
    "sample_surface",
    "bbox_diagonal",
]


def _freeze(obj, name, arr):
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    object.__setattr__(obj, name, arr)


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle surface: float vertices ``(V, 3)`` and faces ``(F, 3)``."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if f.size == 0:
            f = f.reshape(0, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValidationError(f"vertices must have shape (V, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValidationError(f"faces must have shape (F, 3), got {f.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("vertices contain non-finite values")
        if f.size and ((f < 0).any() or (f >= len(v)).any()):
            bad = f[(f < 0) | (f >= len(v))][0]
            raise ValidationError(
                f"face index {int(bad)} out of range for {len(v)} vertices"
            )
        _freeze(self, "vertices", v)
        _freeze(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        """Per-face corner positions, shape ``(F, 3, 3)``."""
        return self.vertices[self.faces]


@dataclass(frozen=True)
class PointCloud:
    """Unordered 3D points, shape ``(N, 3)``."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.size == 0:
            p = p.reshape(0, 3)
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValidationError(f"points must have shape (N, 3), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValidationError("points contain non-finite values")
        _freeze(self, "points", p)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Primitive:
    """Moment summary (mean, covariance, size) of one geometric element.

    ``cov`` is the second central moment of the element's uniform measure and
    must be symmetric PSD up to roundoff; ``size`` is the element's measure
    (triangle area, or 1 for a point/measurement).
    """

    mean: np.ndarray
    cov: np.ndarray
    size: float

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        cov = np.asarray(self.cov, dtype=np.float64).reshape(3, 3)
        size = float(self.size)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov)) and np.isfinite(size)):
            raise ValidationError("primitive moments contain non-finite values")
        if size < 0:
            raise ValidationError(f"primitive size must be >= 0, got {size}")
        scale = max(1.0, float(np.abs(cov).max()))
        if np.abs(cov - cov.T).max() > 1e-12 * scale:
            raise ValidationError("primitive covariance is not symmetric")
        if cov.any() and np.linalg.eigvalsh(cov).min() < -1e-12 * scale:
            raise ValidationError("primitive covariance is not positive semdefinite")
        _freeze(self, "mean", mean)
        _freeze(self, "cov", cov)
        object.__setattr__(self, "size", size)


def triangle_moments(a, b, c) -> Primitive:
    """Exact moments of the uniform distribution over triangle ``(a, b, c)``.

    mean is the centroid, size the area, and cov the second central moment
    ``(1/12) * sum_v (v - mean)(v - mean)^T`` over the three corners, which
    equals the integral form for a flat triangle. Degenerate triangles are
    fine: they get size 0 and a rank-deficient covariance.
    """
    corners = np.array([a, b, c], dtype=np.float64)
    if corners.shape != (3, 3):
        raise ValidationError(f"triangle corners must be three 3D points, got {corners.shape}")
    mean = corners.mean(axis=0)
    # Centered form: algebraically identical to (AA^T+BB^T+CC^T-3 mu mu^T)/12
    # but immune to cancellation for triangles far from the origin.
    d = corners - mean
    cov = d.T @ d / 12.0
    size = 0.5 * float(np.linalg.norm(np.cross(corners[1] - corners[0], corners[2] - corners[0])))
    return Primitive(mean=mean, cov=cov, size=size)


def mesh_to_primitives(mesh: TriangleMesh) -> list[Primitive]:
    """One moment primitive per face, in face order."""
    if mesh.n_faces < 1:
        raise ValidationError("mesh has no faces")
    tri = mesh.triangles()
    mean = tri.mean(axis=1)
    d = tri - mean[:, None, :]
    cov = np.einsum("fva,fvb->fab", d, d) / 12.0
    size = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
    )
    return [
        Primitive(mean=mean[j], cov=cov[j], size=float(size[j]))
        for j in range(mesh.n_faces)
    ]


def points_to_primitives(cloud: PointCloud, cov=None) -> list[Primitive]:
    """Unit-size point primitives, optionally carrying per-point covariances."""
    pts = cloud.points
    if cov is None:
        zero = np.zeros((3, 3))
        return [Primitive(mean=p, cov=zero, size=1.0) for p in pts]
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (len(pts), 3, 3):
        raise ValidationError(
            f"covariance list shape {cov.shape} does not match {len(pts)} points"
        )
    return [Primitive(mean=p, cov=c, size=1.0) for p, c in zip(pts, cov)]


def rect_primitive(center, width: float, height: float) -> Primitive:
    """Primitive for an axis-aligned measurement rectangle.

    A uniform distribution on an interval of length L has variance L^2/12,
    so the rectangle contributes diag(width^2, height^2, 0)/12. Size is 1:
    one measurement, weighted like any other point.
    """
    if width < 0 or height < 0:
        raise ValidationError(f"rectangle dimensions must be >= 0, got {width} x {height}")
    cov = np.diag([width**2 / 12.0, height**2 / 12.0, 0.0])
    return Primitive(mean=np.asarray(center, dtype=np.float64), cov=cov, size=1.0)


def pack_primitives(primitives) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack a primitive list into ``(means (M,3), covs (M,3,3), sizes (M,))``."""
    if not primitives:
        raise ValidationError("empty primitive list")
    means = np.stack([p.mean for p in primitives])
    covs = np.stack([p.cov for p in primitives])
    sizes = np.array([p.size for p in primitives], dtype=np.float64)
    return means, covs, sizes


def sample_surface(mesh: TriangleMesh, n: int, seed, return_faces: bool = False):
    """Uniform area-weighted surface samples, deterministic per seed.

    Faces are drawn with probability proportional to area, positions
    uniformly in barycentric coordinates (reflection trick). With
    ``return_faces`` the parent face index of each sample is returned too.
    """
    if n < 1:
        raise ValidationError(f"sample count must be >= 1, got {n}")
    tri = mesh.triangles()
    if tri.shape[0] == 0:
        raise ValidationError("mesh has no faces")
    area = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
    )
    total = area.sum()
    if total <= 0:
        raise ValidationError("mesh has zero total surface area")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(area), size=n, p=area / total)
    uv = rng.random((n, 2))
    outside = uv.sum(axis=1) > 1.0
    uv[outside] = 1.0 - uv[outside]
    t = tri[chosen]
    pts = t[:, 0] + uv[:, :1] * (t[:, 1] - t[:, 0]) + uv[:, 1:] * (t[:, 2] - t[:, 0])
    cloud = PointCloud(points=pts)
    return (cloud, chosen) if return_faces else cloud


def bbox_diagonal(obj) -> float:
    """Length of the axis-aligned bounding-box diagonal of a mesh or cloud."""
    if isinstance(obj, TriangleMesh):
        pts = obj.vertices
    elif isinstance(obj, PointCloud):
        pts = obj.points
    else:
        pts = np.asarray(obj, dtype=np.float64)
    if pts.size == 0:
        raise ValidationError("cannot take bounding box of empty input")
    pts = pts.reshape(-1, 3)
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


# ---------------------------------------------------------------------------
# File formats: PLY (ascii, binary little-endian) and OBJ. Positions and
# faces only; normals, colors, and texture data are skipped.
# ---------------------------------------------------------------------------

_PLY_DTYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

_STRUCT_CODES = {
    "i1": "b", "u1": "B", "i2": "h", "u2": "H",
    "i4": "i", "u4": "I", "f4": "f", "f8": "d",
}


def load_mesh(path) -> TriangleMesh:
    """Load a PLY or OBJ file into an indexed triangle mesh.

    Vertex order is preserved. Polygons with more than three corners are
    fan-triangulated. Files are sniffed by magic bytes: anything starting
    with ``ply`` is parsed as PLY, everything else as OBJ.
    """
    path = Path(path)
    data = path.read_bytes()
    if data[:3] == b"ply":
        vertices, faces = _parse_ply(data, str(path))
    else:
        vertices, faces = _parse_obj(data, str(path))
    return TriangleMesh(vertices=vertices, faces=faces)


def load_points(path) -> PointCloud:
    """Load the vertex positions of a PLY/OBJ file as a point cloud."""
    path = Path(path)
    data = path.read_bytes()
    if data[:3] == b"ply":
        vertices, _ = _parse_ply(data, str(path))
    else:
        vertices, _ = _parse_obj(data, str(path))
    return PointCloud(points=vertices)


def _parse_ply_header(data: bytes, path: str):
    end = data.find(b"end_header")
    if end < 0:
        raise FormatError(f"{path}: no end_header line in PLY header")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise FormatError(f"{path}: header is not newline-terminated")
    body_start = nl + 1
    header_lines = data[:end].decode("ascii", errors="replace").splitlines()

    fmt = None
    elements = []  # (name, count, [("scalar", name, code) | ("list", count_code, item_code, name)])
    for ln, raw in enumerate(header_lines, 1):
        tokens = raw.strip().split()
        if not tokens or tokens[0] in ("ply", "comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] not in ("ascii", "binary_little_endian"):
                raise FormatError(f"{path}: line {ln}: unsupported PLY format {raw.strip()!r}")
            fmt = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise FormatError(f"{path}: line {ln}: malformed element declaration")
            try:
                count = int(tokens[2])
            except ValueError:
                raise FormatError(f"{path}: line {ln}: bad element count {tokens[2]!r}") from None
            elements.append((tokens[1], count, []))
        elif tokens[0] == "property":
            if not elements:
                raise FormatError(f"{path}: line {ln}: property before any element")
            props = elements[-1][2]
            if tokens[1] == "list":
                if len(tokens) != 5 or tokens[2] not in _PLY_DTYPES or tokens[3] not in _PLY_DTYPES:
                    raise FormatError(f"{path}: line {ln}: malformed list property")
                props.append(("list", _PLY_DTYPES[tokens[2]], _PLY_DTYPES[tokens[3]], tokens[4]))
            else:
                if len(tokens) != 3 or tokens[1] not in _PLY_DTYPES:
                    raise FormatError(f"{path}: line {ln}: unsupported property type {tokens[1]!r}")
                props.append(("scalar", tokens[2], _PLY_DTYPES[tokens[1]]))
        else:
            raise FormatError(f"{path}: line {ln}: unknown header keyword {tokens[0]!r}")
    if fmt is None:
        raise FormatError(f"{path}: PLY header has no format line")
    # header_lines excludes the end_header line; the body starts after it.
    return fmt, elements, body_start, len(header_lines) + 2


def _vertex_columns(props, path: str):
    names = [p[1] for p in props if p[0] == "scalar"]
    try:
        return names.index("x"), names.index("y"), names.index("z")
    except ValueError:
        raise FormatError(f"{path}: vertex element lacks x/y/z properties") from None


def _parse_ply(data: bytes, path: str):
    fmt, elements, body_start, body_line = _parse_ply_header(data, path)
    if fmt == "ascii":
        return _parse_ply_ascii(data, path, elements, body_start, body_line)
    return _parse_ply_binary(data, path, elements, body_start)


def _parse_ply_ascii(data, path, elements, body_start, body_line):
    lines = data[body_start:].decode("ascii", errors="replace").splitlines()
    vertices, faces = [], []
    cursor = 0
    for name, count, props in elements:
        if name == "vertex":
            cols = _vertex_columns(props, path)
        for row in range(count):
            ln = body_line + cursor
            if cursor >= len(lines):
                raise FormatError(f"{path}: line {ln}: unexpected end of file in element {name!r}")
            tokens = lines[cursor].split()
            cursor += 1
            try:
                values = _consume_ascii_row(tokens, props)
            except (ValueError, IndexError):
                raise FormatError(f"{path}: line {ln}: malformed {name!r} row") from None
            if name == "vertex":
                vertices.append([values[c] for c in cols])
            elif name == "face":
                _append_face(values, props, faces, path, f"line {ln}")
    return _finish_mesh(vertices, faces)


def _consume_ascii_row(tokens, props):
    values, pos = [], 0
    for prop in props:
        if prop[0] == "scalar":
            tok = tokens[pos]
            pos += 1
            values.append(float(tok) if prop[2] in ("f4", "f8") else int(tok))
        else:
            n = int(tokens[pos])
            pos += 1
            items = [int(t) if prop[2] not in ("f4", "f8") else float(t) for t in tokens[pos:pos + n]]
            if len(items) != n:
                raise ValueError("short list")
            pos += n
            values.append(items)
    if pos != len(tokens):
        raise ValueError("trailing tokens")
    return values


def _append_face(values, props, faces, path, where):
    idx = None
    for prop, value in zip(props, values):
        if prop[0] == "list":
            idx = value
            break
    if idx is None:
        raise FormatError(f"{path}: {where}: face element has no list property")
    if len(idx) < 3:
        raise FormatError(f"{path}: {where}: face with {len(idx)} indices")
    for k in range(1, len(idx) - 1):
        faces.append([idx[0], idx[k], idx[k + 1]])


def _parse_ply_binary(data, path, elements, body_start):
    vertices, faces = [], []
    offset = body_start
    for name, count, props in elements:
        all_scalar = all(p[0] == "scalar" for p in props)
        if all_scalar:
            dtype = np.dtype([(f"f{i}", "<" + p[2]) for i, p in enumerate(props)])
            if offset + dtype.itemsize * count > len(data):
                raise FormatError(f"{path}: byte {offset}: element {name!r} truncated")
            rows = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
            offset += dtype.itemsize * count
            if name == "vertex":
                cols = _vertex_columns(props, path)
                vertices = np.stack(
                    [rows[f"f{c}"].astype(np.float64) for c in cols], axis=1
                )
        elif name == "face":
            offset = _parse_binary_faces(data, path, offset, count, props, faces)
        else:
            raise FormatError(
                f"{path}: byte {offset}: cannot skip element {name!r} with list properties"
            )
    return _finish_mesh(vertices, faces)


def _parse_binary_faces(data, path, offset, count, props, faces):
    # Fast path: a lone list property with a uniform count of 3.
    if len(props) == 1 and props[0][0] == "list":
        _, count_code, item_code, _ = props[0]
        csize = np.dtype(count_code).itemsize
        isize = np.dtype(item_code).itemsize
        stride = csize + 3 * isize
        if count and offset + stride <= len(data):
            first = int(np.frombuffer(data, "<" + count_code, 1, offset)[0])
            if first == 3 and offset + stride * count <= len(data):
                dtype = np.dtype([("n", "<" + count_code), ("idx", "<" + item_code, (3,))])
                rows = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
                if np.all(rows["n"] == 3):
                    faces.extend(rows["idx"].astype(np.int64).tolist())
                    return offset + stride * count
    # General path: walk row by row.
    for _ in range(count):
        values = []
        for prop in props:
            try:
                if prop[0] == "scalar":
                    code = _STRUCT_CODES[prop[2]]
                    (v,) = struct.unpack_from("<" + code, data, offset)
                    offset += struct.calcsize(code)
                    values.append(v)
                else:
                    ccode = _STRUCT_CODES[prop[1]]
                    (n,) = struct.unpack_from("<" + ccode, data, offset)
                    offset += struct.calcsize(ccode)
                    icode = _STRUCT_CODES[prop[2]]
                    items = struct.unpack_from("<" + str(n) + icode, data, offset)
                    offset += struct.calcsize(icode) * n
                    values.append(list(items))
            except struct.error:
                raise FormatError(f"{path}: byte {offset}: face data truncated") from None
        _append_face(values, props, faces, path, f"byte {offset}")
    return offset


def _finish_mesh(vertices, faces):
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    return vertices, faces


def _parse_obj(data: bytes, path: str):
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: byte {exc.start}: not valid OBJ text") from None
    vertices, faces = [], []
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if tokens[0] == "v":
            if len(tokens) < 4:
                raise FormatError(f"{path}: line {ln}: vertex with fewer than 3 coordinates")
            try:
                vertices.append([float(t) for t in tokens[1:4]])
            except ValueError:
                raise FormatError(f"{path}: line {ln}: bad vertex coordinate") from None
        elif tokens[0] == "f":
            idx = []
            for tok in tokens[1:]:
                head = tok.split("/")[0]
                try:
                    i = int(head)
                except ValueError:
                    raise FormatError(f"{path}: line {ln}: bad face index {tok!r}") from None
                if i == 0:
                    raise FormatError(f"{path}: line {ln}: OBJ indices are 1-based, got 0")
                j = i - 1 if i > 0 else len(vertices) + i
                if not 0 <= j < len(vertices):
                    raise ValidationError(
                        f"{path}: line {ln}: face index {i} out of range for {len(vertices)} vertices"
                    )
                idx.append(j)
            if len(idx) < 3:
                raise FormatError(f"{path}: line {ln}: face with {len(idx)} indices")
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
        # Everything else (vn, vt, usemtl, o, g, s, mtllib, ...) is ignored.
    return _finish_mesh(vertices, faces)


def save_mesh(mesh: TriangleMesh, path) -> None:
    """Write an ascii PLY file with vertex positions and triangle faces."""
    _write_ply(path, mesh.vertices, mesh.faces)


def save_points(cloud: PointCloud, path) -> None:
    """Write an ascii PLY file holding only vertex positions."""
    _write_ply(path, cloud.points, None)


def _write_ply(path, vertices, faces) -> None:
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(vertices)}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if faces is not None:
        lines += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    for v in vertices:
        lines.append(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    if faces is not None:
        for f in faces:
            lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    Path(path).write_text("\n".join(lines) + "\n")
