"""Surface shortest paths between cluster generators.

Distances come from a Steiner graph: every mesh edge carries ``k`` evenly
spaced extra nodes, and all boundary nodes of a face that do not lie on a
common side are joined by straight segments across the face. Generators are
on-face points wired to the boundary nodes of their face. An optional exact
backend runs window propagation (``pygeodesic``) on the same domains.

Generator-to-generator distances are computed only for adjacent clusters, each
on the submesh made of the source cluster and its neighbours; the remaining
pairs are filled in by shortest paths over the resulting generator graph.
"""

from __future__ import annotations

import heapq
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .ccvt import Tessellation
from .mesh import TriangleMesh

logger = logging.getLogger(__name__)


class GeodesicError(Exception):
    pass


class Disconnected(GeodesicError):
    pass


class DisconnectedGraph(GeodesicError):
    pass


class DisconnectedWarning(UserWarning):
    pass


def polyline_length(points) -> float:
    p = np.asarray(points, dtype=float)
    if len(p) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


# --------------------------------------------------------------------------
# Steiner graph


class SteinerGraph:
    """Static Steiner-point graph of a whole mesh; subgraphs select faces."""

    def __init__(self, mesh: TriangleMesh, k: int = 3):
        if k < 0:
            raise ValueError("k must be >= 0")
        self.mesh = mesh
        self.k = k
        nv, ne = mesh.n_vertices, mesh.n_edges
        e = mesh.edges
        t = np.arange(1, k + 1) / (k + 1)
        steiner = (mesh.vertices[e[:, 0], None, :] * (1 - t)[None, :, None]
                   + mesh.vertices[e[:, 1], None, :] * t[None, :, None]).reshape(-1, 3)
        self.positions = np.concatenate([mesh.vertices, steiner])
        self.n_nodes = len(self.positions)

        # boundary nodes of every face: 3 corners then k nodes per side
        fe = mesh.face_edges
        ids = nv + fe[:, :, None] * k + np.arange(k)[None, None, :]
        self.face_nodes = np.concatenate([mesh.faces, ids.reshape(len(fe), -1)], axis=1)

        sides = [{0, 2}, {1, 0}, {2, 1}] + [{s} for s in range(3) for _ in range(k)]
        n_local = len(sides)
        la, lb = zip(*[(a, b) for a in range(n_local) for b in range(a + 1, n_local) if not sides[a] & sides[b]])
        self._fa = self.face_nodes[:, list(la)]
        self._fb = self.face_nodes[:, list(lb)]
        self._fw = np.linalg.norm(self.positions[self._fa] - self.positions[self._fb], axis=2)

        order = np.argsort(mesh.faces.ravel(), kind="stable")
        self._vf_ptr = np.concatenate([[0], np.cumsum(np.bincount(mesh.faces.ravel(), minlength=nv))])
        self._vf_idx = order // 3

        chain = np.concatenate([e[:, :1], nv + np.arange(ne)[:, None] * k + np.arange(k)[None, :], e[:, 1:]], axis=1)
        self._ca = chain[:, :-1]
        self._cb = chain[:, 1:]
        self._cw = np.linalg.norm(self.positions[self._ca] - self.positions[self._cb], axis=2)

    @property
    def n_edges(self) -> int:
        return self._fa.size + self._ca.size

    def vertex_faces(self, v: int) -> np.ndarray:
        return self._vf_idx[self._vf_ptr[v]:self._vf_ptr[v + 1]]

    def node_faces(self, node: int, points) -> set:
        """Faces whose closure contains a graph node."""
        nv = self.mesh.n_vertices
        if node < nv:
            return set(self.vertex_faces(node).tolist())
        if node < self.n_nodes:
            return set(self.mesh.edge_faces((node - nv) // self.k).tolist())
        return {int(points[node - self.n_nodes][0])}

    def build(self, faces=None, points=()):
        """Sparse adjacency restricted to ``faces`` plus extra on-face points.

        ``points`` is a sequence of ``(face, xyz)``; point ``i`` gets node id
        ``n_nodes + i``. Returns ``(csr, positions)``.
        """
        if faces is None:
            fa, fb, fw = self._fa.ravel(), self._fb.ravel(), self._fw.ravel()
            ca, cb, cw = self._ca.ravel(), self._cb.ravel(), self._cw.ravel()
        else:
            faces = np.asarray(faces, dtype=np.int64)
            fa, fb, fw = self._fa[faces].ravel(), self._fb[faces].ravel(), self._fw[faces].ravel()
            edges = np.unique(self.mesh.face_edges[faces])
            ca, cb, cw = self._ca[edges].ravel(), self._cb[edges].ravel(), self._cw[edges].ravel()
        us, vs, ws = [fa, ca], [fb, cb], [fw, cw]
        extra = []
        by_face: dict[int, list[int]] = {}
        for i, (f, p) in enumerate(points):
            p = np.asarray(p, dtype=float)
            extra.append(p)
            nid = self.n_nodes + i
            bn = self.face_nodes[f]
            us.append(np.full(len(bn), nid))
            vs.append(bn)
            ws.append(np.linalg.norm(self.positions[bn] - p, axis=1))
            for j in by_face.get(int(f), []):
                us.append(np.array([nid]))
                vs.append(np.array([self.n_nodes + j]))
                ws.append(np.array([np.linalg.norm(extra[j] - p)]))
            by_face.setdefault(int(f), []).append(i)
        n = self.n_nodes + len(extra)
        u = np.concatenate(us)
        v = np.concatenate(vs)
        w = np.concatenate(ws)
        # coincident points would give zero weights, which csgraph drops
        w = np.maximum(w, 1e-300)
        g = sparse.csr_matrix((w, (u, v)), shape=(n, n))
        pos = self.positions if not extra else np.concatenate([self.positions, np.array(extra)])
        return g, pos


def _trace(pred, target, source):
    path = [target]
    while path[-1] != source:
        p = pred[path[-1]]
        if p < 0:
            raise Disconnected("no path")
        path.append(p)
    return path[::-1]


@dataclass
class SteinerBackend:
    """Approximate geodesics on a Steiner-augmented edge graph (``k`` nodes per edge)."""

    k: int = 3
    refine: bool = True
    _cache: dict = field(default_factory=dict, repr=False)

    name = "steiner"

    def graph(self, mesh: TriangleMesh) -> SteinerGraph:
        key = id(mesh)
        hit = self._cache.get(key)
        if hit is None or hit[0] is not mesh:
            hit = (mesh, SteinerGraph(mesh, self.k))
            self._cache[key] = hit
        return hit[1]

    def paths(self, mesh: TriangleMesh, source, targets, faces=None):
        """Shortest ``(cost, polyline)`` from ``source`` to each target.

        Points are ``(face, xyz)`` pairs. Unreachable targets yield ``None``.
        """
        sg = self.graph(mesh)
        points = [source, *targets]
        g, pos = sg.build(faces, points)
        src = sg.n_nodes
        dist, pred = csgraph.dijkstra(g, directed=False, indices=src, return_predecessors=True)
        allowed = None if faces is None else set(np.asarray(faces).tolist())
        out = []
        for i in range(len(targets)):
            t = sg.n_nodes + 1 + i
            if not np.isfinite(dist[t]):
                out.append(None)
                continue
            nodes = _trace(pred, t, src)
            best = (float(dist[t]), pos[nodes].copy())
            if self.refine and len(nodes) > 2:
                poly = straighten(sg, nodes, points, allowed)
                if poly is not None:
                    c = polyline_length(poly)
                    if c < best[0]:
                        best = (c, poly)
            out.append(best)
        return out

    def prepare(self, mesh: TriangleMesh) -> None:
        self.graph(mesh)

    def costs(self, mesh: TriangleMesh, source, targets, faces=None) -> np.ndarray:
        return np.array([np.inf if r is None else r[0] for r in self.paths(mesh, source, targets, faces)])

    def face_distances(self, mesh: TriangleMesh, source, faces=None) -> np.ndarray:
        """Distance from ``source`` to every face centroid (``inf`` outside ``faces``)."""
        sg = self.graph(mesh)
        g, pos = sg.build(faces, [source])
        dist = csgraph.dijkstra(g, directed=False, indices=sg.n_nodes)
        sel = np.arange(mesh.n_faces) if faces is None else np.asarray(faces, dtype=np.int64)
        bn = sg.face_nodes[sel]
        via = dist[bn] + np.linalg.norm(pos[bn] - mesh.face_centroids[sel, None, :], axis=2)
        out = np.full(mesh.n_faces, np.inf)
        out[sel] = via.min(axis=1)
        f0 = int(source[0])
        if f0 in set(sel.tolist()):
            out[f0] = min(out[f0], float(np.linalg.norm(mesh.face_centroids[f0] - np.asarray(source[1]))))
        return out


# --------------------------------------------------------------------------
# corridor straightening


def _cross(a, b) -> float:
    return a[0] * b[1] - a[1] * b[0]


def _corner_angle(mesh, f, v) -> float:
    tri = mesh.faces[f]
    k = int(np.flatnonzero(tri == v)[0])
    p = mesh.vertices[tri[k]]
    a = mesh.vertices[tri[(k + 1) % 3]] - p
    b = mesh.vertices[tri[(k + 2) % 3]] - p
    c = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def _angle(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.arccos(np.clip(a @ b / (na * nb), -1.0, 1.0)))


def _other(mesh, f, g, v) -> int:
    """Vertex of the edge shared by faces f and g that is not ``v``."""
    common = set(mesh.faces[f].tolist()) & set(mesh.faces[g].tolist())
    common.discard(v)
    return common.pop()


def _fan(sg: SteinerGraph, v: int, fa: int, fb: int, allowed, p_in, p_out):
    """Faces strictly between ``fa`` and ``fb`` around vertex ``v``.

    Both rotational directions are walked and the side on which the path
    angle at ``v`` (from ``p_in`` round to ``p_out``) is smaller wins: that is
    where a straight line can cut the corner. Returns None when no side stays
    inside ``allowed``.
    """
    mesh = sg.mesh
    V = mesh.vertices
    ring = set(sg.vertex_faces(v).tolist())
    best = None
    for first in mesh.neighbors(fa):
        first = int(first)
        if first not in ring:
            continue
        walk, prev, cur = [], fa, first
        ok = True
        while cur != fb:
            if (allowed is not None and cur not in allowed) or len(walk) > len(ring):
                ok = False
                break
            walk.append(cur)
            nxt = [int(x) for x in mesh.neighbors(cur) if int(x) in ring and int(x) != prev]
            if len(nxt) != 1:
                ok = False
                break
            prev, cur = cur, nxt[0]
        if not ok:
            continue
        seq = [fa, *walk, fb]
        w_in = _other(mesh, seq[0], seq[1], v)
        w_out = _other(mesh, seq[-2], seq[-1], v)
        angle = _angle(p_in - V[v], V[w_in] - V[v]) + _angle(V[w_out] - V[v], p_out - V[v])
        angle += sum(_corner_angle(mesh, f, v) for f in walk)
        if best is None or angle < best[0]:
            best = (angle, walk)
    return None if best is None else best[1]


def _shared_edge(mesh, f, g):
    common = set(mesh.faces[f].tolist()) & set(mesh.faces[g].tolist())
    return tuple(sorted(common)) if len(common) == 2 else None


def _unfold(mesh, strip):
    """2D coordinates of every strip face, laid out edge to edge."""
    V = mesh.vertices
    a, b, c = (int(x) for x in mesh.faces[strip[0]])
    ex = V[b] - V[a]
    ex /= np.linalg.norm(ex)
    ey = np.cross(mesh.face_normals[strip[0]], ex)
    lay = [{a: np.zeros(2), b: np.array([(V[b] - V[a]) @ ex, 0.0]), c: np.array([(V[c] - V[a]) @ ex, (V[c] - V[a]) @ ey])}]
    for f, g in zip(strip[:-1], strip[1:]):
        p, q = _shared_edge(mesh, f, g)
        prev = lay[-1]
        opp = next(int(x) for x in mesh.faces[f] if x != p and x != q)
        r = next(int(x) for x in mesh.faces[g] if x != p and x != q)
        P, Q = prev[p], prev[q]
        L = np.linalg.norm(Q - P)
        u = (Q - P) / L
        w = np.array([-u[1], u[0]])
        dp = np.linalg.norm(V[r] - V[p])
        dq = np.linalg.norm(V[r] - V[q])
        x = (dp * dp - dq * dq + L * L) / (2 * L)
        h = np.sqrt(max(dp * dp - x * x, 0.0))
        side = _cross(u, prev[opp] - P)
        R = P + x * u + (-h if side > 0 else h) * w
        lay.append({p: P, q: Q, r: R})
    return lay


def _to_plane(mesh, f, lay, point):
    tri = [int(x) for x in mesh.faces[f]]
    V = mesh.vertices
    A = np.column_stack([V[tri[1]] - V[tri[0]], V[tri[2]] - V[tri[0]]])
    st, *_ = np.linalg.lstsq(A, np.asarray(point) - V[tri[0]], rcond=None)
    return lay[tri[0]] + st[0] * (lay[tri[1]] - lay[tri[0]]) + st[1] * (lay[tri[2]] - lay[tri[0]])


def _funnel(portals):
    """Shortest polyline through a sequence of 2D portals (left, right).

    Returns ``(portal index, side)`` for every portal endpoint the path bends
    around. First and last portals are the degenerate start and end points.
    """
    def same(a, b):
        return np.allclose(a, b, rtol=0.0, atol=1e-15)

    apex = portals[0][0]
    left, right = portals[0]
    apex_i = left_i = right_i = 0
    corners = []
    i = 1
    n = len(portals)
    while i < n:
        pl, pr = portals[i]
        if _cross(right - apex, pr - apex) >= 0.0:
            if same(apex, right) or _cross(pr - apex, left - apex) > 0.0:
                right, right_i = pr, i
            else:
                corners.append((left_i, 0))
                apex, apex_i = left, left_i
                left, right, left_i, right_i = apex, apex, apex_i, apex_i
                i = apex_i + 1
                continue
        if _cross(pl - apex, left - apex) >= 0.0:
            if same(apex, left) or _cross(right - apex, pl - apex) > 0.0:
                left, left_i = pl, i
            else:
                corners.append((right_i, 1))
                apex, apex_i = right, right_i
                left, right, left_i, right_i = apex, apex, apex_i, apex_i
                i = apex_i + 1
                continue
        i += 1
    return corners


@dataclass
class _PathPoint:
    pos: np.ndarray
    faces: frozenset
    vertex: int = -1


def _straighten_strip(mesh, strip, start: _PathPoint, end: _PathPoint):
    """Shortest path from ``start`` to ``end`` inside a strip of faces."""
    V = mesh.vertices
    if len(strip) == 1:
        return [start, end]
    lay = _unfold(mesh, strip)
    s2 = _to_plane(mesh, strip[0], lay[0], start.pos)
    e2 = _to_plane(mesh, strip[-1], lay[-1], end.pos)
    portals2, portals3 = [(s2, s2)], [None]
    for k, (f, g) in enumerate(zip(strip[:-1], strip[1:])):
        p, q = _shared_edge(mesh, f, g)
        opp = next(int(x) for x in mesh.faces[f] if x != p and x != q)
        c = lay[k][opp]
        P, Q = lay[k + 1][p], lay[k + 1][q]
        # the left endpoint is counter-clockwise of the right one, seen from behind the portal
        if _cross(Q - c, P - c) > 0.0:
            portals2.append((P, Q))
            portals3.append((p, q, f, g))
        else:
            portals2.append((Q, P))
            portals3.append((q, p, f, g))
    portals2.append((e2, e2))
    portals3.append(None)
    last = len(portals2) - 1

    bends = [(0, s2)] + [(i, portals2[i][side]) for i, side in _funnel(portals2)] + [(last, e2)]
    out = [start]
    for (ia, a2), (ib, b2) in zip(bends[:-1], bends[1:]):
        d = b2 - a2
        for j in range(ia + 1, min(ib, last - 1) + 1):
            l2, r2 = portals2[j]
            lv, rv, f, g = portals3[j]
            if j == ib:
                t = 0.0 if np.allclose(b2, l2, rtol=0.0, atol=1e-15) else 1.0
            else:
                denom = _cross(d, r2 - l2)
                t = 0.0 if denom == 0.0 else min(max(_cross(d, a2 - l2) / denom, 0.0), 1.0)
            if t == 0.0 or t == 1.0:
                v = lv if t == 0.0 else rv
                out.append(_PathPoint(V[v].copy(), frozenset(), v))
            else:
                out.append(_PathPoint(V[lv] + t * (V[rv] - V[lv]), frozenset((f, g))))
    out.append(end)
    return out


def _straighten_once(sg: SteinerGraph, path, allowed):
    mesh = sg.mesh
    seg_faces = []
    prev = None
    for a, b in zip(path[:-1], path[1:]):
        cand = a.faces & b.faces
        if allowed is not None:
            cand = cand & allowed
        if not cand:
            return None
        f = prev if prev in cand else min(cand)
        seg_faces.append(f)
        prev = f

    out = []
    strip, start = [seg_faces[0]], path[0]
    for j in range(1, len(seg_faces)):
        f, g = strip[-1], seg_faces[j]
        node = path[j]
        if node.vertex < 0:
            if f != g:
                strip.append(g)
            continue
        fan = _fan(sg, node.vertex, f, g, allowed, path[j - 1].pos, path[j + 1].pos) if f != g else []
        if f == g:
            continue
        if fan is not None:
            strip.extend(fan)
            strip.append(g)
        else:
            # no admissible way round this vertex: keep it as a fixed corner
            part = _straighten_strip(mesh, strip, start, node)
            out.extend(part if not out else part[1:])
            strip, start = [g], node
    part = _straighten_strip(mesh, strip, start, path[-1])
    out.extend(part if not out else part[1:])

    clean = [out[0]]
    seen = {}
    for p in out[1:]:
        if p.vertex >= 0 and p.vertex in seen:
            # the path came back through a vertex it already visited: drop the loop
            del clean[seen[p.vertex] + 1:]
            seen = {c.vertex: k for k, c in enumerate(clean) if c.vertex >= 0}
            continue
        if np.linalg.norm(p.pos - clean[-1].pos) > 0.0:
            clean.append(p)
        elif p.vertex >= 0:
            clean[-1] = p
        else:
            continue
        if p.vertex >= 0:
            seen[p.vertex] = len(clean) - 1
    if len(clean) == 1:
        clean.append(out[-1])
    for p in clean:
        if p.vertex >= 0 and not p.faces:
            p.faces = frozenset(sg.vertex_faces(p.vertex).tolist())
    return clean


def straighten(sg: SteinerGraph, nodes, points, allowed=None, rounds: int = 64):
    """Shorten a graph path inside the strip of faces it crosses.

    The strip is rebuilt from the shortened path and the process repeats
    while the length keeps dropping. Vertices that cannot be walked around
    inside ``allowed`` stay fixed. Returns a polyline, or None on failure.
    """
    path = []
    for n in nodes:
        if n < sg.mesh.n_vertices:
            path.append(_PathPoint(sg.positions[n], frozenset(sg.vertex_faces(n).tolist()), int(n)))
        elif n < sg.n_nodes:
            path.append(_PathPoint(sg.positions[n], frozenset(sg.node_faces(n, points))))
        else:
            f, xyz = points[n - sg.n_nodes]
            path.append(_PathPoint(np.asarray(xyz, float), frozenset([int(f)])))
    best, best_len = None, np.inf
    try:
        for _ in range(rounds):
            new = _straighten_once(sg, path, allowed)
            if new is None:
                break
            poly = np.array([p.pos for p in new])
            length = polyline_length(poly)
            if length >= best_len * (1.0 - 1e-12):
                break
            best, best_len, path = poly, length, new
            if all(p.vertex < 0 for p in new[1:-1]):
                break  # straight within its strip: nothing left to flip
    except (ValueError, ZeroDivisionError, StopIteration, TypeError, KeyError, np.linalg.LinAlgError):
        logger.debug("straightening failed; keeping the best path so far")
    return best


# --------------------------------------------------------------------------
# exact backend


def split_domain(mesh: TriangleMesh, faces, points):
    """Triangles of ``faces`` with every on-face point inserted as a vertex.

    Faces holding one point are split into three, faces holding several are
    re-triangulated in barycentric coordinates. The surface itself is
    unchanged, so geodesic distances on the result equal those on the domain.
    Returns ``(vertices, triangles, point_vertex_ids)``.
    """
    from scipy.spatial import Delaunay

    faces = np.arange(mesh.n_faces) if faces is None else np.asarray(faces, dtype=np.int64)
    row = {int(f): r for r, f in enumerate(faces)}
    used, inv = np.unique(mesh.faces[faces].ravel(), return_inverse=True)
    tris = inv.reshape(-1, 3)
    verts = [mesh.vertices[used]]
    ids = np.empty(len(points), dtype=np.int64)
    by_face: dict[int, list[int]] = {}
    for i, (f, _) in enumerate(points):
        if int(f) not in row:
            raise ValueError(f"point face {f} is outside the domain")
        by_face.setdefault(int(f), []).append(i)
    n = len(used)
    keep = np.ones(len(tris), dtype=bool)
    extra = []
    for f, idx in by_face.items():
        a, b, c = tris[row[f]]
        keep[row[f]] = False
        local, seen = [a, b, c], {}
        for i in idx:
            key = tuple(np.asarray(points[i][1], dtype=float).tolist())
            if key not in seen:
                seen[key] = n
                verts.append(np.array([key]))
                local.append(n)
                n += 1
            ids[i] = seen[key]
        if len(local) == 4:
            p = local[3]
            extra += [(a, b, p), (b, c, p), (c, a, p)]
            continue
        # barycentric layout keeps the orientation of (a, b, c)
        A, B, C = (mesh.vertices[used[x]] for x in (a, b, c))
        M = np.column_stack([B - A, C - A])
        uv = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]
        for q in local[3:]:
            uv.append(tuple(np.linalg.lstsq(M, verts[q - len(used) + 1][0] - A, rcond=None)[0]))
        uv = np.array(uv)
        for t in Delaunay(uv).simplices:
            u0, u1, u2 = uv[t]
            if _cross(u1 - u0, u2 - u0) < 0:
                t = t[[0, 2, 1]]
            extra.append(tuple(local[x] for x in t))
    tri = np.concatenate([tris[keep], np.array(extra, dtype=np.int64).reshape(-1, 3)])
    return np.concatenate(verts), tri, ids


@dataclass
class ExactBackend:
    """Exact polyhedral geodesics by window propagation (needs ``pygeodesic``)."""

    name = "exact"

    def __post_init__(self):
        try:
            from pygeodesic import geodesic
        except ImportError as e:  # pragma: no cover - optional dependency
            raise ImportError("the exact backend needs the optional 'pygeodesic' package") from e
        self._algorithm = geodesic.PyGeodesicAlgorithmExact

    def prepare(self, mesh: TriangleMesh) -> None:
        pass

    def _solver(self, mesh, faces, points):
        V, F, ids = split_domain(mesh, faces, points)
        # window propagation does not pass through vertices where faces only
        # touch, so reachability follows shared edges; the solver cannot report
        # unreachable targets, so they are filtered out up front
        e = np.sort(np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]]), axis=1)
        _, key = np.unique(e, axis=0, return_inverse=True)
        key = key.ravel()
        face = np.tile(np.arange(len(F)), 3)
        g = sparse.coo_matrix((np.ones(len(e)), (face, key + len(F))), shape=(len(F) + key.max() + 1,) * 2)
        _, comp = csgraph.connected_components(g, directed=False)
        vcomp = np.empty(len(V), dtype=np.int64)
        vcomp[F.ravel()] = np.repeat(comp[: len(F)], 3)
        reach = vcomp[ids[1:]] == vcomp[ids[0]]
        alg = self._algorithm(np.ascontiguousarray(V, dtype=float), np.ascontiguousarray(F, dtype=np.int32))
        return alg, ids, reach

    def _distances(self, alg, ids, reach):
        out = np.full(len(ids) - 1, np.inf)
        if reach.any():
            d, _ = alg.geodesicDistances(np.array([ids[0]], dtype=np.int32), ids[1:][reach].astype(np.int32))
            out[reach] = d
        return out

    def paths(self, mesh: TriangleMesh, source, targets, faces=None):
        alg, ids, reach = self._solver(mesh, faces, [source, *targets])
        # costs come from the same one-to-many query as costs(), so a pair solved
        # on two domains that share its geodesic gets bit-identical values
        dist = self._distances(alg, ids, reach)
        out = []
        for t, d in zip(ids[1:], dist):
            if not np.isfinite(d):
                out.append(None)
                continue
            p = np.asarray(source[1], dtype=float)
            if t == ids[0]:
                out.append((0.0, np.array([p, p])))
                continue
            _, poly = alg.geodesicDistance(int(ids[0]), int(t))
            poly = np.asarray(poly, dtype=float)
            if np.linalg.norm(poly[0] - p) > np.linalg.norm(poly[-1] - p):
                poly = poly[::-1].copy()
            out.append((float(d), poly))
        return out

    def costs(self, mesh: TriangleMesh, source, targets, faces=None) -> np.ndarray:
        return self._distances(*self._solver(mesh, faces, [source, *targets]))

    def face_distances(self, mesh: TriangleMesh, source, faces=None) -> np.ndarray:
        sel = np.arange(mesh.n_faces) if faces is None else np.asarray(faces, dtype=np.int64)
        pts = [source] + [(int(f), mesh.face_centroids[f]) for f in sel]
        out = np.full(mesh.n_faces, np.inf)
        out[sel] = self.costs(mesh, pts[0], pts[1:], faces=sel)
        return out


def make_backend(name: str = "steiner", k: int = 3):
    if name == "steiner":
        return SteinerBackend(k=k)
    if name == "exact":
        return ExactBackend()
    raise ValueError(f"unknown geodesic backend {name!r} (available: steiner, exact)")


# --------------------------------------------------------------------------
# submeshes


@dataclass
class Submesh:
    """A set of parent-mesh faces (a cluster and its neighbours)."""

    parent: TriangleMesh
    faces: np.ndarray
    clusters: np.ndarray

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def to_mesh(self) -> tuple[TriangleMesh, np.ndarray, np.ndarray]:
        """Standalone mesh plus parent face and vertex index maps."""
        f = self.parent.faces[self.faces]
        verts, inverse = np.unique(f.ravel(), return_inverse=True)
        sub = TriangleMesh(self.parent.vertices[verts], inverse.reshape(-1, 3), name=f"{self.parent.name}-sub")
        return sub, self.faces.copy(), verts

    def edges(self) -> np.ndarray:
        return np.unique(self.parent.face_edges[self.faces])


def cluster_adjacency(mesh: TriangleMesh, labels) -> list[np.ndarray]:
    """Sorted neighbour cluster ids for each cluster (edge-sharing faces)."""
    labels = np.asarray(labels)
    m = int(labels.max()) + 1
    adj = mesh.adjacency_matrix.tocoo()
    a, b = labels[adj.row], labels[adj.col]
    diff = a != b
    pairs = np.unique(np.column_stack([a[diff], b[diff]]), axis=0)
    out = [[] for _ in range(m)]
    for i, j in pairs:
        out[i].append(j)
    return [np.array(x, dtype=np.int64) for x in out]


def cluster_submesh(mesh: TriangleMesh, tess: Tessellation, index: int, neighbors=None) -> Submesh:
    """Faces of cluster ``index`` together with all edge-adjacent clusters."""
    if neighbors is None:
        neighbors = cluster_adjacency(mesh, tess.face_to_cluster)
    members = np.concatenate([[index], neighbors[index]]).astype(np.int64)
    faces = np.flatnonzero(np.isin(tess.face_to_cluster, members))
    return Submesh(parent=mesh, faces=faces, clusters=members)


def geodesic_between(submesh: Submesh | TriangleMesh, source, target, backend=None):
    """Shortest surface path between two on-face points of a (sub)mesh.

    ``source`` and ``target`` are ``(face, xyz)`` with parent face indices.
    Raises Disconnected when no path exists inside the submesh.
    """
    backend = backend or SteinerBackend()
    if isinstance(submesh, Submesh):
        mesh, faces = submesh.parent, submesh.faces
    else:
        mesh, faces = submesh, None
    (res,) = backend.paths(mesh, source, [target], faces=faces)
    if res is None:
        raise Disconnected("source and target are not connected on the submesh")
    return res


def full_mesh_geodesic_oracle(mesh: TriangleMesh, source, target, backend=None) -> float:
    """Geodesic cost computed on the whole mesh, one pair at a time."""
    return geodesic_between(mesh, source, target, backend)[0]


def full_mesh_generator_costs(mesh: TriangleMesh, tess: Tessellation, backend=None) -> np.ndarray:
    """All generator pair costs on the whole mesh (one search per source)."""
    backend = backend or SteinerBackend()
    pts = [(int(f), g) for f, g in zip(tess.generator_faces, tess.generators)]
    m = len(pts)
    out = np.zeros((m, m))
    for i in range(m - 1):
        out[i, i + 1:] = out[i + 1:, i] = backend.costs(mesh, pts[i], pts[i + 1:])
    return out


# --------------------------------------------------------------------------
# generator graph


@dataclass
class GeneratorGraph:
    nodes: np.ndarray
    node_faces: np.ndarray
    edges: dict = field(default_factory=dict)
    avg_neighbors: float = 0.0

    @property
    def m(self) -> int:
        return len(self.nodes)

    @staticmethod
    def key(i: int, j: int) -> tuple[int, int]:
        return (i, j) if i < j else (j, i)

    def add(self, i: int, j: int, cost: float, path) -> None:
        path = np.asarray(path, dtype=float)
        if i > j:
            i, j, path = j, i, path[::-1]
        self.edges[(i, j)] = (float(cost), path)

    def has(self, i: int, j: int) -> bool:
        return self.key(i, j) in self.edges

    def cost(self, i: int, j: int) -> float:
        if i == j:
            return 0.0
        return self.edges[self.key(i, j)][0]

    def path(self, i: int, j: int) -> np.ndarray:
        """Polyline from generator ``i`` to generator ``j``."""
        p = self.edges[self.key(i, j)][1]
        return p if i < j else p[::-1]

    def is_complete(self) -> bool:
        return len(self.edges) == self.m * (self.m - 1) // 2

    def cost_matrix(self) -> np.ndarray:
        c = np.full((self.m, self.m), np.inf)
        np.fill_diagonal(c, 0.0)
        for (i, j), (w, _) in self.edges.items():
            c[i, j] = c[j, i] = w
        return c

    def copy(self) -> "GeneratorGraph":
        return GeneratorGraph(self.nodes.copy(), self.node_faces.copy(), dict(self.edges), self.avg_neighbors)

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {"index": i, "face": int(f), "point": [float(x) for x in p]}
                for i, (f, p) in enumerate(zip(self.node_faces, self.nodes))
            ],
            "edges": [
                {"i": i, "j": j, "cost": c, "path": [[float(x) for x in q] for q in p]}
                for (i, j), (c, p) in sorted(self.edges.items())
            ],
            "avgNeighbors": float(self.avg_neighbors),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorGraph":
        g = cls(
            nodes=np.array([n["point"] for n in d["nodes"]], dtype=float).reshape(-1, 3),
            node_faces=np.array([n["face"] for n in d["nodes"]], dtype=np.int64),
            avg_neighbors=float(d.get("avgNeighbors", 0.0)),
        )
        for e in d["edges"]:
            g.add(int(e["i"]), int(e["j"]), float(e["cost"]), np.array(e["path"], dtype=float).reshape(-1, 3))
        return g

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")


def adjacent_generator_distances(mesh: TriangleMesh, tess: Tessellation, backend=None, threads: int = 1) -> GeneratorGraph:
    """Geodesics between generators of adjacent clusters.

    Each unordered pair is solved once, from the lower-index cluster, on that
    cluster's submesh. Pairs with no path inside the submesh are skipped with
    a warning.
    """
    backend = backend or SteinerBackend()
    neighbors = cluster_adjacency(mesh, tess.face_to_cluster)
    gens, gfaces = tess.generators, tess.generator_faces
    graph = GeneratorGraph(nodes=gens.copy(), node_faces=gfaces.copy())
    graph.avg_neighbors = float(np.mean([len(n) for n in neighbors])) if neighbors else 0.0

    def work(i):
        targets = [int(a) for a in neighbors[i] if a > i]
        if not targets:
            return i, targets, []
        sub = cluster_submesh(mesh, tess, i, neighbors)
        res = backend.paths(mesh, (int(gfaces[i]), gens[i]), [(int(gfaces[a]), gens[a]) for a in targets], faces=sub.faces)
        return i, targets, res

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, range(tess.m)))
    else:
        results = [work(i) for i in range(tess.m)]
    for i, targets, res in results:
        for a, r in zip(targets, res):
            if r is None:
                warnings.warn(f"generators {i} and {a} are disconnected on their submesh", DisconnectedWarning)
                continue
            graph.add(i, a, r[0], r[1])
    return graph


def _dijkstra(adj, source, m):
    dist = [np.inf] * m
    pred = [-1] * m
    dist[source] = 0.0
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, w in adj[u]:
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = u
                heapq.heappush(heap, (nd, v))
    return dist, pred


def complete_generator_graph(partial: GeneratorGraph) -> GeneratorGraph:
    """Fill every missing pair with its shortest path over the existing edges.

    New edges carry the concatenation of the polylines along that path;
    existing edges are left untouched.
    """
    m = partial.m
    adj = [[] for _ in range(m)]
    for (i, j), (c, _) in sorted(partial.edges.items()):
        adj[i].append((j, c))
        adj[j].append((i, c))
    out = partial.copy()
    for i in range(m):
        missing = [j for j in range(i + 1, m) if not partial.has(i, j)]
        if not missing:
            continue
        dist, pred = _dijkstra(adj, i, m)
        for j in missing:
            if not np.isfinite(dist[j]):
                raise DisconnectedGraph(f"generators {i} and {j} are not connected")
            hops = [j]
            while hops[-1] != i:
                hops.append(pred[hops[-1]])
            hops.reverse()
            pieces = [partial.path(a, b) for a, b in zip(hops[:-1], hops[1:])]
            path = np.concatenate([pieces[0]] + [p[1:] for p in pieces[1:]])
            out.add(i, j, dist[j], path)
    return out


def generator_graph(mesh: TriangleMesh, tess: Tessellation, backend=None, threads: int = 1) -> GeneratorGraph:
    """Complete generator graph via the adjacent-cluster decomposition."""
    if tess.m == 1:
        return GeneratorGraph(nodes=tess.generators.copy(), node_faces=tess.generator_faces.copy())
    return complete_generator_graph(adjacent_generator_distances(mesh, tess, backend, threads))
