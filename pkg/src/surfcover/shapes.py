"""Procedural test meshes (spheres, grids, knots, occlusion scenes)."""

from __future__ import annotations

import numpy as np

from .mesh import TriangleMesh

_PHI = (1.0 + 5.0 ** 0.5) / 2.0

ICOSAHEDRON_VERTICES = np.array(
    [
        [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
        [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
        [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
    ],
    dtype=float,
)
ICOSAHEDRON_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
)


def icosahedron(radius: float = 1.0) -> TriangleMesh:
    v = ICOSAHEDRON_VERTICES / np.linalg.norm(ICOSAHEDRON_VERTICES, axis=1, keepdims=True)
    return TriangleMesh(v * radius, ICOSAHEDRON_FACES, name="icosahedron")


def icosphere(frequency: int, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Geodesic sphere with ``20 * frequency**2`` faces.

    Each icosahedron face is split into a triangular grid of the given
    frequency and the grid points are pushed out to the sphere.
    """
    n = int(frequency)
    if n < 1:
        raise ValueError("frequency must be >= 1")
    base = ICOSAHEDRON_VERTICES / np.linalg.norm(ICOSAHEDRON_VERTICES, axis=1, keepdims=True)
    # barycentric lattice of one face
    ij = [(i, j) for i in range(n + 1) for j in range(n + 1 - i)]
    local = {p: k for k, p in enumerate(ij)}
    tris = []
    for i in range(n):
        for j in range(n - i):
            tris.append((local[i, j], local[i + 1, j], local[i, j + 1]))
            if j < n - i - 1:
                tris.append((local[i + 1, j], local[i + 1, j + 1], local[i, j + 1]))
    bary = np.array([[n - i - j, i, j] for i, j in ij], dtype=float) / n
    tris = np.array(tris)

    pts, faces = [], []
    for fi, (a, b, c) in enumerate(ICOSAHEDRON_FACES):
        p = bary @ base[[a, b, c]]
        pts.append(p / np.linalg.norm(p, axis=1, keepdims=True))
        faces.append(tris + fi * len(ij))
    pts = np.concatenate(pts)
    faces = np.concatenate(faces)
    key = np.round(pts * 1e9).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    v = pts[first] * radius + np.asarray(center, dtype=float)
    return TriangleMesh(v, inverse.reshape(-1)[faces], name=f"icosphere{n}")


def grid(nx: int, ny: int, width: float = 1.0, height: float = 1.0, origin=(0.0, 0.0), z: float = 0.0) -> TriangleMesh:
    """Flat rectangle in the z-plane split into ``2 * nx * ny`` right triangles."""
    xs = np.linspace(origin[0], origin[0] + width, nx + 1)
    ys = np.linspace(origin[1], origin[1] + height, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    v = np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, z)])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    f = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return TriangleMesh(v, f, name=f"grid{nx}x{ny}")


def cube(size: float = 1.0) -> TriangleMesh:
    v = np.array(
        [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]],
        dtype=float,
    ) * size
    f = [
        [0, 2, 1], [0, 3, 2],  # bottom, -z
        [4, 5, 6], [4, 6, 7],  # top, +z
        [0, 1, 5], [0, 5, 4],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [1, 2, 6], [1, 6, 5],  # +x
        [0, 4, 7], [0, 7, 3],  # -x
    ]
    return TriangleMesh(v, f, name="cube")


def torus_knot(
    p: int = 2,
    q: int = 3,
    segments: int = 250,
    sides: int = 20,
    major: float = 1.0,
    minor: float = 0.4,
    tube: float = 0.18,
) -> TriangleMesh:
    """Closed tube around a (p, q) torus knot; ``2 * segments * sides`` faces.

    A strongly curved, self-occluding test surface.
    """
    t = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)

    def curve(t):
        r = major + minor * np.cos(q * t)
        return np.column_stack([r * np.cos(p * t), r * np.sin(p * t), minor * np.sin(q * t)])

    h = 1e-4
    c = curve(t)
    d1 = (curve(t + h) - curve(t - h)) / (2 * h)
    d2 = (curve(t + h) - 2 * c + curve(t - h)) / h**2
    T = d1 / np.linalg.norm(d1, axis=1, keepdims=True)
    B = np.cross(d1, d2)
    B /= np.linalg.norm(B, axis=1, keepdims=True)
    N = np.cross(B, T)
    s = np.linspace(0.0, 2 * np.pi, sides, endpoint=False)
    ring = np.cos(s)[None, :, None] * N[:, None, :] + np.sin(s)[None, :, None] * B[:, None, :]
    v = (c[:, None, :] + tube * ring).reshape(-1, 3)

    i = np.arange(segments)[:, None]
    j = np.arange(sides)[None, :]
    a = i * sides + j
    b = ((i + 1) % segments) * sides + j
    cc = ((i + 1) % segments) * sides + (j + 1) % sides
    d = i * sides + (j + 1) % sides
    f = np.concatenate([np.stack([a, b, cc], -1).reshape(-1, 3), np.stack([a, cc, d], -1).reshape(-1, 3)])
    mesh = TriangleMesh(v, f, name=f"torusknot{p}{q}")
    # orient outward: normals should point away from the tube axis
    axis_pt = c[np.repeat(np.arange(segments), sides)]
    out = mesh.face_centroids - axis_pt[mesh.faces[:, 0]]
    if np.einsum("ij,ij->i", out, mesh.face_normals).mean() < 0:
        mesh = TriangleMesh(v, f[:, ::-1], name=mesh.name)
    return mesh


def combine(*meshes: TriangleMesh, name: str = "scene") -> TriangleMesh:
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += m.n_vertices
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces), name=name)


def overhang_scene(half_width: float = 0.01, height: float = 0.03, floor: float = 0.2, n: int = 20) -> TriangleMesh:
    """Flat floor with a small horizontal plate hovering above the origin.

    A ray straight up from the origin is blocked by the plate while rays
    tilted by more than ``atan(half_width / height)`` clear it.
    """
    base = grid(n, n, floor, floor, origin=(-floor / 2, -floor / 2))
    plate = grid(2, 2, 2 * half_width, 2 * half_width, origin=(-half_width, -half_width), z=height)
    return combine(base, plate, name="overhang")


# scale factors that put the procedural meshes at part size (a few cm)
SPHERE_RADIUS = 0.035
KNOT_SCALE = 0.02

BUILTINS = {
    "sphere": lambda arg: icosphere(int(arg or 23), SPHERE_RADIUS),
    "unitsphere": lambda arg: icosphere(int(arg or 32)),
    "knot": lambda arg: torus_knot().scaled(float(arg or KNOT_SCALE)),
    "grid": lambda arg: grid(int(arg or 40), int(arg or 40), 0.1, 0.1),
    "overhang": lambda arg: overhang_scene(),
    "cube": lambda arg: cube(float(arg or 0.05)),
}


def builtin(spec: str) -> TriangleMesh:
    """Mesh from a ``name[:arg]`` spec, e.g. ``sphere:23`` or ``knot:0.03``."""
    name, _, arg = spec.partition(":")
    if name not in BUILTINS:
        raise KeyError(f"unknown builtin mesh {name!r}; choose from {sorted(BUILTINS)}")
    mesh = BUILTINS[name](arg)
    mesh.name = spec
    return mesh
