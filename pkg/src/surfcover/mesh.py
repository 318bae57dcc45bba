"""Indexed triangle meshes: loading, validation, derived geometry and ray queries."""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12


class MeshError(Exception):
    pass


class ParseError(MeshError):
    pass


class EmptyMesh(MeshError):
    pass


class NonManifoldWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float).reshape(3)
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if not n > 0:
            raise ValueError("ray direction must be non-zero")
        if abs(n - 1.0) > 1e-9:
            d = d / n
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass
class LoadReport:
    dropped_faces: list[int] = field(default_factory=list)
    unreferenced_vertices: int = 0
    non_manifold_edges: int = 0
    warnings: list[str] = field(default_factory=list)


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


class TriangleMesh:
    """Validated, immutable triangle mesh with per-face geometry and adjacency.

    ``faces`` winding defines the normal orientation. Faces with area at or
    below 1e-12 are dropped on construction and listed in ``report``.
    """

    def __init__(self, vertices, faces, *, name: str = ""):
        v = np.asarray(vertices, dtype=float)
        f = np.asarray(faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (n, 3), got {v.shape}")
        if f.size == 0:
            raise EmptyMesh("mesh has no faces")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must be (n, 3), got {f.shape}")
        if f.min() < 0 or f.max() >= len(v):
            raise MeshError("face references a vertex index out of range")

        report = LoadReport()
        a = v[f[:, 1]] - v[f[:, 0]]
        b = v[f[:, 2]] - v[f[:, 0]]
        cross = np.cross(a, b)
        area = 0.5 * np.linalg.norm(cross, axis=1)
        repeated = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        keep = (area > DEGENERATE_AREA) & ~repeated
        if not keep.all():
            report.dropped_faces = np.flatnonzero(~keep).tolist()
            logger.info("dropped %d degenerate faces", len(report.dropped_faces))
        f, cross, area = f[keep], cross[keep], area[keep]
        if len(f) == 0:
            raise EmptyMesh("no faces left after removing degenerate faces")

        used = np.zeros(len(v), dtype=bool)
        used[f.ravel()] = True
        if not used.all():
            report.unreferenced_vertices = int((~used).sum())
            remap = np.cumsum(used) - 1
            v = v[used]
            f = remap[f]

        self.name = name
        self.vertices = _readonly(v)
        self.faces = _readonly(f)
        self.face_areas = _readonly(area)
        self.face_centroids = _readonly(v[f].mean(axis=1))
        self.face_normals = _readonly(cross / (2.0 * area)[:, None])
        self.report = report
        self._build_topology()

    def _build_topology(self):
        f = self.faces
        nf = len(f)
        # side s of face i joins corners s and (s+1) % 3
        half = np.stack([f, np.roll(f, -1, axis=1)], axis=2).reshape(-1, 2)
        key = np.sort(half, axis=1)
        edges, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        self.edges = _readonly(edges)
        self.face_edges = _readonly(inverse.reshape(nf, 3))

        order = np.argsort(inverse, kind="stable")
        self._edge_face_ptr = _readonly(np.concatenate([[0], np.cumsum(counts)]))
        self._edge_face_idx = _readonly(order // 3)

        nm = int((counts > 2).sum())
        self.report.non_manifold_edges = nm
        self.is_manifold = nm == 0
        self.is_closed = bool(nm == 0 and (counts == 2).all())
        if nm:
            msg = f"{nm} edges are shared by more than two faces; closed-mesh checks disabled"
            self.report.warnings.append(msg)
            warnings.warn(msg, NonManifoldWarning, stacklevel=3)

        # face adjacency through shared edges (all pairs on an edge)
        rows, cols = [], []
        ptr, idx = self._edge_face_ptr, self._edge_face_idx
        multi = np.flatnonzero(counts >= 2)
        pair = multi[counts[multi] == 2]
        rows.append(idx[ptr[pair]])
        cols.append(idx[ptr[pair] + 1])
        for e in multi[counts[multi] > 2]:
            fs = idx[ptr[e]:ptr[e + 1]]
            for i in range(len(fs)):
                for j in range(i + 1, len(fs)):
                    rows.append(np.array([fs[i]]))
                    cols.append(np.array([fs[j]]))
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        adj = sparse.coo_matrix(
            (np.ones(2 * len(r), dtype=np.int8), (np.concatenate([r, c]), np.concatenate([c, r]))),
            shape=(nf, nf),
        ).tocsr()
        adj.sum_duplicates()
        adj.data[:] = 1
        adj.sort_indices()
        self.adjacency_matrix = adj

    # -- basic accessors -------------------------------------------------

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def total_area(self) -> float:
        return float(self.face_areas.sum())

    def neighbors(self, face: int) -> np.ndarray:
        a = self.adjacency_matrix
        return a.indices[a.indptr[face]:a.indptr[face + 1]]

    @cached_property
    def adjacency(self) -> list[np.ndarray]:
        return [self.neighbors(i) for i in range(self.n_faces)]

    def edge_faces(self, edge: int) -> np.ndarray:
        return self._edge_face_idx[self._edge_face_ptr[edge]:self._edge_face_ptr[edge + 1]]

    @property
    def edge_face_counts(self) -> np.ndarray:
        return np.diff(self._edge_face_ptr)

    def bbox_diagonal(self) -> float:
        return bbox_diagonal(self)

    def scaled(self, factor: float) -> "TriangleMesh":
        return TriangleMesh(self.vertices * factor, self.faces, name=self.name)

    def transformed(self, rotation=None, translation=None) -> "TriangleMesh":
        v = np.array(self.vertices)
        if rotation is not None:
            v = v @ np.asarray(rotation, dtype=float).T
        if translation is not None:
            v = v + np.asarray(translation, dtype=float)
        return TriangleMesh(v, self.faces, name=self.name)

    # -- ray queries -----------------------------------------------------

    @cached_property
    def bvh(self) -> "BVH":
        return BVH(self)

    def ray_intersect(self, ray: Ray, ignore=None, max_distance: float = np.inf):
        return ray_intersect(self, ray, ignore=ignore, max_distance=max_distance)

    def __repr__(self):
        return f"TriangleMesh({self.name!r}, faces={self.n_faces}, vertices={self.n_vertices})"


def bbox_diagonal(mesh: TriangleMesh) -> float:
    """Length of the axis-aligned bounding box diagonal."""
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    return float(np.linalg.norm(hi - lo))


# --------------------------------------------------------------------------
# ray / triangle intersection


def intersect_triangles(origin, direction, p0, p1, p2, eps=1e-12):
    """Moller-Trumbore against a batch of triangles.

    Returns the hit distance per triangle, ``inf`` where there is no hit in
    front of the origin. Edges and vertices count as hits.
    """
    e1 = p1 - p0
    e2 = p2 - p0
    pvec = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > eps
    inv = np.zeros_like(det)
    inv[ok] = 1.0 / det[ok]
    tvec = origin - p0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = (qvec @ direction) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    tol = 1e-12
    hit = ok & (u >= -tol) & (v >= -tol) & (u + v <= 1.0 + tol) & (t > 0.0)
    return np.where(hit, t, np.inf)


def _nearest(mesh, ray, candidates, ignore, max_distance):
    if ignore:
        candidates = candidates[~np.isin(candidates, np.fromiter(ignore, dtype=np.int64))]
    if len(candidates) == 0:
        return None
    candidates = np.sort(candidates)
    tri = mesh.vertices[mesh.faces[candidates]]
    t = intersect_triangles(ray.origin, ray.direction, tri[:, 0], tri[:, 1], tri[:, 2])
    k = int(np.argmin(t))
    if not np.isfinite(t[k]) or t[k] > max_distance:
        return None
    return int(candidates[k]), float(t[k])


def ray_intersect_exhaustive(mesh: TriangleMesh, ray: Ray, ignore=None, max_distance=np.inf):
    """Nearest hit by testing every face; reference path for :func:`ray_intersect`."""
    return _nearest(mesh, ray, np.arange(mesh.n_faces), ignore, max_distance)


def ray_intersect(mesh: TriangleMesh, ray: Ray, ignore=None, max_distance=np.inf):
    """Nearest ``(face, distance)`` hit of ``ray`` on ``mesh`` or ``None``.

    Faces in ``ignore`` are skipped. The BVH only prunes candidates; the
    surviving faces go through the same kernel as the exhaustive test, with
    ties resolved to the lowest face index.
    """
    cand = mesh.bvh.candidates(ray.origin, ray.direction, max_distance)
    return _nearest(mesh, ray, cand, ignore, max_distance)


def segment_blocked(mesh: TriangleMesh, start, end, ignore=None) -> bool:
    """True if the open segment start->end crosses any face not in ``ignore``."""
    start = np.asarray(start, dtype=float)
    d = np.asarray(end, dtype=float) - start
    length = float(np.linalg.norm(d))
    if length == 0.0:
        return False
    hit = ray_intersect(mesh, Ray(start, d / length), ignore=ignore, max_distance=length)
    return hit is not None and hit[1] < length


class BVH:
    """Median-split bounding volume hierarchy over face bounding boxes."""

    LEAF_SIZE = 8

    def __init__(self, mesh: TriangleMesh):
        tri = mesh.vertices[mesh.faces]
        fmin = tri.min(axis=1)
        fmax = tri.max(axis=1)
        pad = 1e-9 * max(1.0, float(np.abs(tri).max()))
        fmin = fmin - pad
        fmax = fmax + pad
        cent = 0.5 * (fmin + fmax)
        order = np.arange(len(tri))

        lo, hi, left, right, start, count = [], [], [], [], [], []

        def new_node(idx, s):
            lo.append(fmin[idx].min(axis=0))
            hi.append(fmax[idx].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(s)
            count.append(len(idx))
            return len(lo) - 1

        root = new_node(order, 0)
        stack = [(root, 0, len(order))]
        while stack:
            node, s, e = stack.pop()
            if e - s <= self.LEAF_SIZE:
                continue
            idx = order[s:e]
            c = cent[idx]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            part = np.argsort(c[:, axis], kind="stable")
            order[s:e] = idx[part]
            mid = s + (e - s) // 2
            ln = new_node(order[s:mid], s)
            rn = new_node(order[mid:e], mid)
            left[node], right[node] = ln, rn
            count[node] = 0
            stack.append((ln, s, mid))
            stack.append((rn, mid, e))

        self.lo = np.array(lo)
        self.hi = np.array(hi)
        self.left = np.array(left)
        self.right = np.array(right)
        self.start = np.array(start)
        self.count = np.array(count)
        self.order = order

    def _slab(self, nodes, origin, inv_dir, tmax):
        with np.errstate(invalid="ignore"):
            t0 = (self.lo[nodes] - origin) * inv_dir
            t1 = (self.hi[nodes] - origin) * inv_dir
        tn = np.minimum(t0, t1)
        tf = np.maximum(t0, t1)
        # 0 * inf: axis-parallel ray lying exactly on a slab plane; keep it
        tn = np.where(np.isnan(tn), -np.inf, tn)
        tf = np.where(np.isnan(tf), np.inf, tf)
        near = tn.max(axis=1)
        far = tf.min(axis=1)
        return (near <= far) & (far >= 0.0) & (near <= tmax)

    def candidates(self, origin, direction, max_distance=np.inf) -> np.ndarray:
        with np.errstate(divide="ignore"):
            inv_dir = 1.0 / direction
        out = []
        frontier = np.array([0])
        # breadth-first, one vectorised slab test per level
        while len(frontier):
            frontier = frontier[self._slab(frontier, origin, inv_dir, max_distance)]
            leaf = self.left[frontier] < 0
            for n in frontier[leaf]:
                s = self.start[n]
                out.append(self.order[s:s + self.count[n]])
            inner = frontier[~leaf]
            frontier = np.concatenate([self.left[inner], self.right[inner]])
        if not out:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(out)


# --------------------------------------------------------------------------
# file formats


def load_mesh(path, format: str | None = None) -> TriangleMesh:
    """Load an OBJ, STL (ASCII or binary) or ASCII PLY file.

    Units are taken to be meters.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if fmt == "obj":
        v, f = _parse_obj(data)
    elif fmt == "stl":
        v, f = _parse_stl(data)
    elif fmt == "ply":
        v, f = _parse_ply(data)
    else:
        raise ParseError(f"unsupported mesh format {fmt!r}")
    if len(f) == 0:
        raise EmptyMesh(f"{path} contains no faces")
    return TriangleMesh(v, f, name=path.stem)


def _parse_obj(data: bytes):
    verts, faces = [], []
    try:
        text = data.decode("utf-8", errors="replace")
        for lineno, line in enumerate(text.splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ParseError(f"line {lineno}: vertex needs three coordinates")
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise ParseError(f"line {lineno}: face with fewer than 3 vertices")
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    except (ValueError, IndexError) as exc:
        raise ParseError(f"malformed OBJ: {exc}") from exc
    v = np.array(verts, dtype=float).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(f) and (f.min() < 0 or f.max() >= len(v)):
        raise ParseError("OBJ face references a missing vertex")
    return v, f


def _weld(tri: np.ndarray):
    pts = tri.reshape(-1, 3)
    v, inverse = np.unique(pts, axis=0, return_inverse=True)
    return v, inverse.reshape(-1, 3)


def _parse_stl(data: bytes):
    if len(data) >= 84:
        (n,) = struct.unpack("<I", data[80:84])
        if len(data) == 84 + 50 * n:
            rec = np.dtype([("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
            arr = np.frombuffer(data, dtype=rec, count=n, offset=84)
            return _weld(arr["v"].astype(float))
    text = data.decode("ascii", errors="replace")
    if not text.lstrip().lower().startswith("solid"):
        raise ParseError("not a valid ASCII or binary STL")
    pts = []
    try:
        for line in text.splitlines():
            parts = line.split()
            if parts and parts[0].lower() == "vertex":
                pts.append([float(x) for x in parts[1:4]])
    except ValueError as exc:
        raise ParseError(f"malformed STL vertex: {exc}") from exc
    if len(pts) % 3:
        raise ParseError("STL vertex count is not a multiple of 3")
    return _weld(np.array(pts, dtype=float).reshape(-1, 3, 3))


def _parse_ply(data: bytes):
    text = data.decode("ascii", errors="replace")
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic")
    elements = []
    i = 1
    try:
        while True:
            parts = lines[i].split()
            i += 1
            if not parts:
                continue
            if parts[0] == "format" and parts[1] != "ascii":
                raise ParseError("only ASCII PLY is supported")
            if parts[0] == "element":
                elements.append((parts[1], int(parts[2]), []))
            elif parts[0] == "property":
                elements[-1][2].append(parts[1:])
            elif parts[0] == "end_header":
                break
        verts, faces = None, []
        for name, count, props in elements:
            rows = lines[i:i + count]
            i += count
            if len(rows) < count:
                raise ParseError(f"PLY element {name} truncated")
            if name == "vertex":
                names = [p[-1] for p in props]
                cols = [names.index(c) for c in ("x", "y", "z")]
                verts = np.array([[float(r.split()[c]) for c in cols] for r in rows], dtype=float)
            elif name == "face":
                for r in rows:
                    tok = r.split()
                    k = int(tok[0])
                    idx = [int(x) for x in tok[1:1 + k]]
                    for j in range(1, k - 1):
                        faces.append([idx[0], idx[j], idx[j + 1]])
    except (IndexError, ValueError) as exc:
        raise ParseError(f"malformed PLY: {exc}") from exc
    if verts is None:
        raise ParseError("PLY has no vertex element")
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(f) and (f.min() < 0 or f.max() >= len(verts)):
        raise ParseError("PLY face references a missing vertex")
    return verts, f


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        for p in mesh.vertices:
            fh.write(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        for a, b, c in mesh.faces + 1:
            fh.write(f"f {a} {b} {c}\n")


def save_stl(mesh: TriangleMesh, path, binary: bool = True) -> None:
    tri = mesh.vertices[mesh.faces]
    if binary:
        rec = np.zeros(mesh.n_faces, dtype=[("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
        rec["n"] = mesh.face_normals
        rec["v"] = tri
        with open(path, "wb") as fh:
            fh.write(b"\0" * 80)
            fh.write(struct.pack("<I", mesh.n_faces))
            fh.write(rec.tobytes())
        return
    with open(path, "w") as fh:
        fh.write("solid mesh\n")
        for n, t in zip(mesh.face_normals, tri):
            fh.write(f"facet normal {n[0]:.17g} {n[1]:.17g} {n[2]:.17g}\n outer loop\n")
            for p in t:
                fh.write(f"  vertex {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
            fh.write(" endloop\nendfacet\n")
        fh.write("endsolid mesh\n")


def save_ply(mesh: TriangleMesh, path, face_colors=None) -> None:
    """ASCII PLY; ``face_colors`` is an optional (n_faces, 3) uint8 array."""
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {mesh.n_vertices}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {mesh.n_faces}\n")
        fh.write("property list uchar int vertex_indices\n")
        if face_colors is not None:
            fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for p in mesh.vertices:
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        for i, (a, b, c) in enumerate(mesh.faces):
            if face_colors is None:
                fh.write(f"3 {a} {b} {c}\n")
            else:
                r, g, bl = (int(x) for x in face_colors[i])
                fh.write(f"3 {a} {b} {c} {r} {g} {bl}\n")
