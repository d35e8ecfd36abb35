"""Shared fixtures: deterministic synthetic geometry for the whole suite.

The acceptance protocol needs a closed, curved, asymmetric surface with a
few hundred vertices and ~1000 faces. ``bumpy_mesh`` builds one analytically
(a lumpy ellipsoid) so the suite has no data-file dependencies; scale 0.1
puts it at the size of a desk-scale scanned model. If a real scanned mesh
is provided at ``tests/data/bunny_res4.ply`` the tests tagged with the
``scan_mesh`` fixture pick it up instead.
"""

from pathlib import Path

import numpy as np
import pytest

from meshgmm import TriangleMesh

DATA_DIR = Path(__file__).parent / "data"


def bumpy_mesh(n_theta: int = 21, n_phi: int = 22, scale: float = 1.0) -> TriangleMesh:
    """Closed lumpy ellipsoid: ``n_theta * n_phi + 2`` vertices, ``2 * n_phi * n_theta`` faces."""
    thetas = np.linspace(0.0, np.pi, n_theta + 2)[1:-1]
    phis = np.linspace(0.0, 2.0 * np.pi, n_phi, endpoint=False)

    def radius(theta, phi):
        return (
            1.0
            + 0.18 * np.sin(3 * theta) * np.cos(2 * phi)
            + 0.11 * np.sin(2 * theta) * np.sin(5 * phi + 1.0)
            + 0.07 * np.cos(4 * theta + 0.5)
        )

    verts = [np.array([0.0, 0.0, radius(0.0, 0.0)])]
    for th in thetas:
        for ph in phis:
            r = radius(th, ph)
            verts.append(
                r * np.array([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])
            )
    verts.append(np.array([0.0, 0.0, -radius(np.pi, 0.0)]))
    verts = np.array(verts) * np.array([1.0, 0.82, 0.63]) * scale

    faces = []

    def ring(i, j):
        return 1 + i * n_phi + (j % n_phi)

    for j in range(n_phi):
        faces.append([0, ring(0, j), ring(0, j + 1)])
    for i in range(n_theta - 1):
        for j in range(n_phi):
            faces.append([ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)])
            faces.append([ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)])
    last = len(verts) - 1
    for j in range(n_phi):
        faces.append([last, ring(n_theta - 1, j + 1), ring(n_theta - 1, j)])
    return TriangleMesh(vertices=verts, faces=np.array(faces))


@pytest.fixture(scope="session")
def surface_mesh() -> TriangleMesh:
    """The standard evaluation surface: 464 vertices, 924 faces, diag ~0.31."""
    return bumpy_mesh(scale=0.1)


@pytest.fixture(scope="session")
def scan_mesh(surface_mesh) -> TriangleMesh:
    """A real scanned mesh when available, the synthetic surface otherwise."""
    path = DATA_DIR / "bunny_res4.ply"
    if path.exists():
        from meshgmm import load_mesh

        return load_mesh(path)
    return surface_mesh


@pytest.fixture(scope="session")
def surface_mesh_path(surface_mesh, tmp_path_factory) -> Path:
    from meshgmm import save_mesh

    path = tmp_path_factory.mktemp("meshes") / "surface.ply"
    save_mesh(surface_mesh, path)
    return path


def corrugated_depth(intr, shape=(24, 32), shift=(0.0, 0.0, 0.0)):
    """Depth image of a corrugated sheet near z=1, world-shifted by ``shift``.

    A flat plane would leave in-plane translation unobservable, so the sheet
    carries low-amplitude waves in both image axes.
    """
    h, w = shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = (u - intr.cx) / intr.fx
    dy = (v - intr.cy) / intr.fy
    tx, ty, tz = shift

    def zfun(x, y):
        return 1.0 + 0.06 * np.sin(9.0 * x) + 0.05 * np.cos(7.0 * y) + 0.04 * np.sin(5.0 * (x + y))

    z = np.full(shape, 1.0)
    for _ in range(60):
        z = zfun(dx * z - tx, dy * z - ty) + tz
    return z


def uniform_triangle_samples(rng, corners, n):
    """Uniform samples on one triangle via the barycentric reflection trick."""
    corners = np.asarray(corners, dtype=np.float64)
    uv = rng.random((n, 2))
    outside = uv.sum(axis=1) > 1.0
    uv[outside] = 1.0 - uv[outside]
    return corners[0] + uv[:, :1] * (corners[1] - corners[0]) + uv[:, 1:] * (corners[2] - corners[0])
