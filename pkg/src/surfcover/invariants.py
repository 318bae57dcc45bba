"""Inline invariant checks shared by the CLI ``--check`` flag and the tests.

Each function returns a list of human-readable problems; empty means clean.
"""

from __future__ import annotations

import math

import numpy as np

from .ccvt import Tessellation, cluster_components
from .geodesic import GeneratorGraph, polyline_length
from .mesh import TriangleMesh
from .metrics import MetricsReport
from .tour import CoveragePath
from .viewpoint import ViewpointPlan, occluded, roll_angles


class InvariantViolation(Exception):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


def raise_if(problems: list[str]) -> None:
    if problems:
        raise InvariantViolation(problems)


def check_segmentation(mesh: TriangleMesh, tess: Tessellation, connected: bool = True) -> list[str]:
    out = []
    ftc = np.asarray(tess.face_to_cluster)
    if len(ftc) != mesh.n_faces:
        return [f"faceToCluster has {len(ftc)} entries for {mesh.n_faces} faces"]
    seen = np.zeros(mesh.n_faces, dtype=np.int64)
    for k, c in enumerate(tess.clusters):
        if len(c.face_indices) == 0:
            out.append(f"cluster {k} is empty")
            continue
        seen[c.face_indices] += 1
        if np.any(ftc[c.face_indices] != k):
            out.append(f"cluster {k} disagrees with faceToCluster")
        if c.generator_face not in set(c.face_indices.tolist()):
            out.append(f"generator of cluster {k} lies outside the cluster")
        elif np.linalg.norm(mesh.face_centroids[c.generator_face] - c.generator) > 1e-12:
            out.append(f"generator of cluster {k} is not its face centroid")
        if abs(np.linalg.norm(c.proxy_normal) - 1.0) > 1e-9:
            out.append(f"proxy normal of cluster {k} is not unit length")
        if abs(mesh.face_areas[c.face_indices].sum() - c.area) > 1e-9 * max(c.area, 1e-300):
            out.append(f"area of cluster {k} does not match its faces")
    if np.any(seen != 1):
        out.append(f"{int((seen != 1).sum())} faces are unassigned or assigned twice")
    if connected and not out:
        n, comp = cluster_components(mesh, ftc)
        if n != tess.m:
            out.append(f"{n - tess.m} extra cluster components (clusters not connected)")
    return out


def check_graph(graph: GeneratorGraph, complete: bool = True, tol: float = 1e-9) -> list[str]:
    out = []
    for (i, j), (c, p) in graph.edges.items():
        if not c >= 0.0:
            out.append(f"edge {i}-{j} has negative cost")
        if np.linalg.norm(p[0] - graph.nodes[i]) > tol or np.linalg.norm(p[-1] - graph.nodes[j]) > tol:
            out.append(f"path of edge {i}-{j} does not join its generators")
        length = polyline_length(p)
        if abs(length - c) > 1e-6 * max(c, 1e-300):
            out.append(f"path length of edge {i}-{j} differs from its cost")
    if complete and not graph.is_complete():
        out.append("generator graph is not complete")
    return out


def check_path(path: CoveragePath, graph: GeneratorGraph | None = None) -> list[str]:
    out = []
    m = len(path.order)
    if sorted(int(i) for i in path.order) != list(range(m)):
        out.append("tour order is not a permutation")
    if graph is not None and not out:
        hops = list(zip(path.order[:-1], path.order[1:]))
        if path.closed and m > 1:
            hops.append((path.order[-1], path.order[0]))
        total = sum(graph.cost(int(a), int(b)) for a, b in hops)
        if abs(total - path.total_cost) > 1e-9 * max(total, 1.0):
            out.append("tour cost differs from the sum of its edges")
    length = polyline_length(path.polyline)
    if abs(length - path.total_cost) > 1e-6 * max(path.total_cost, 1e-300):
        out.append("polyline length differs from tour cost")
    return out


def check_viewpoints(plan: ViewpointPlan, mesh: TriangleMesh, I: int, faces=None, env=(), theta_r: float | None = None) -> list[str]:
    out = []
    r_s = plan.cset.params.r_s
    eps = 1e-6 * mesh.bbox_diagonal()
    rolls = set(np.round(roll_angles(I), 12).tolist())
    for k, (status, ray) in enumerate(zip(plan.configs.status, plan.configs.rays_final)):
        if status == "unrecoverable":
            if ray is not None or plan.configs.candidates[k]:
                out.append(f"unrecoverable waypoint {k} still has candidates")
            continue
        waypoint = plan.configs.rays_original[k].at(r_s)
        if np.linalg.norm(ray.at(r_s) - waypoint) > 1e-9:
            out.append(f"final ray of waypoint {k} misses its waypoint")
        face = None if faces is None else int(faces[k])
        if occluded(mesh, waypoint, ray.origin, face, eps, env):
            out.append(f"final ray of waypoint {k} is occluded")
        if theta_r is not None and math.acos(max(-1.0, min(1.0, -ray.direction[2]))) > theta_r + 1e-12:
            out.append(f"final ray of waypoint {k} is too steep")
        got = {round(p.roll, 12) for p in plan.configs.candidates[k]}
        if got != rolls:
            out.append(f"waypoint {k} roll candidates are not the {I} uniform angles")
    return out


def check_metrics(report: MetricsReport) -> list[str]:
    out = []
    for name in ("coverage_pct", "overlap_pct", "unreach_pct", "unreach_area_pct"):
        v = getattr(report, name)
        if not 0.0 <= v <= 100.0:
            out.append(f"{name} = {v} is outside [0, 100]")
    if report.overlap_pct > report.coverage_pct:
        out.append("overlap exceeds coverage")
    if report.rsd_pct < 0.0:
        out.append("negative RSD")
    return out
