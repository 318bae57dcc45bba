"""Viewpoint rays, candidate-ray packing, occlusion correction and pose selection."""

from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.optimize import minimize

from .ccvt import DEFAULT_RC
from .mesh import Ray, TriangleMesh, segment_blocked

logger = logging.getLogger(__name__)

DEFAULT_RS = 0.05
DEFAULT_THETA_R = math.pi / 3
DEFAULT_PHI = math.pi / 3
PACK_ITERATIONS = 10_000


class ViewpointError(Exception):
    pass


class InfeasiblePacking(ViewpointError):
    def __init__(self, msg: str, max_feasible: int):
        super().__init__(msg)
        self.max_feasible = max_feasible


class EmptyLayer(ViewpointError):
    pass


# --------------------------------------------------------------------------
# candidate ray set


def separation(r_s: float, r_c: float) -> float:
    """Minimum distance between neighbouring candidate centres."""
    return 2.0 * r_c * math.cos(math.atan(r_c / r_s))


def cap_area(r_s: float, phi: float) -> float:
    return 2.0 * math.pi * r_s * r_s * (1.0 - math.cos(phi))


@dataclass(frozen=True)
class CandidateRayParams:
    r_s: float = DEFAULT_RS
    r_c: float = DEFAULT_RC
    phi: float = DEFAULT_PHI
    n_c: int | str = "auto"

    def __post_init__(self):
        if not self.r_s > 0 or not self.r_c > 0:
            raise ValueError("r_s and r_c must be positive")
        if not 0.0 < self.phi <= math.pi / 2:
            raise ValueError("phi must lie in (0, pi/2]")
        if self.n_c != "auto" and (not isinstance(self.n_c, (int, np.integer)) or self.n_c < 1):
            raise ValueError("n_c must be a positive integer or 'auto'")

    @property
    def l(self) -> float:
        return separation(self.r_s, self.r_c)

    @property
    def disk_area(self) -> float:
        return math.pi * (self.l / 2.0) ** 2

    @property
    def count(self) -> int:
        if self.n_c == "auto":
            return max(1, int(math.floor(0.5 * cap_area(self.r_s, self.phi) / self.disk_area)))
        return int(self.n_c)

    def to_dict(self) -> dict:
        return {"r_s": self.r_s, "r_c": self.r_c, "phi": self.phi, "N_c": self.count, "l": self.l}


@dataclass
class CandidateRaySet:
    centers: np.ndarray
    params: CandidateRayParams

    def __len__(self) -> int:
        return len(self.centers)

    def objective(self) -> float:
        return packing_objective(self.centers)

    def violations(self, tol: float = 1e-6) -> list[str]:
        return check_candidate_set(self.centers, self.params, tol)

    def to_dict(self) -> dict:
        return {"params": self.params.to_dict(), "centers": self.centers.tolist()}


def packing_objective(centers) -> float:
    c = np.asarray(centers)
    return float((c[1:, 0] ** 2 + c[1:, 1] ** 2).sum())


def check_candidate_set(centers, params: CandidateRayParams, tol: float = 1e-6, origin=None) -> list[str]:
    """Constraint violations of a centre set (empty list when valid).

    ``origin`` is the sphere centre; the local frame uses the origin with the
    pole on +z. Pass an aligned set together with its waypoint and pole
    direction through :func:`check_aligned_set` instead.
    """
    c = np.asarray(centers, dtype=float)
    o = np.zeros(3) if origin is None else np.asarray(origin, float)
    r_s, l = params.r_s, params.l
    out = []
    if len(c) == 0:
        return ["empty set"]
    if np.linalg.norm(c[0] - (o + [0.0, 0.0, r_s])) > tol:
        out.append("first centre is not at the pole")
    rad = np.linalg.norm(c - o, axis=1)
    if np.any(np.abs(rad - r_s) > tol):
        out.append("centre off the sphere")
    if np.any(c[:, 2] - o[2] < r_s * math.cos(params.phi) - tol):
        out.append("centre outside the cap")
    out.extend(_pair_and_order_violations(c, l, tol))
    return out


def _pair_and_order_violations(c, l, tol):
    out = []
    if len(c) > 1:
        d = np.linalg.norm(c[:, None] - c[None], axis=2)
        d[np.diag_indices(len(c))] = np.inf
        if d.min() < l - tol:
            out.append(f"centres closer than l ({d.min():.3g} < {l:.3g})")
    dist = np.linalg.norm(c - c[0], axis=1)
    if np.any(np.diff(dist) < -tol):
        out.append("centres not sorted by distance to the first")
    return out


def check_aligned_set(points, params: CandidateRayParams, waypoint, outward, tol: float = 1e-6) -> list[str]:
    """Same invariants for a set already moved onto a waypoint."""
    p = np.asarray(points, float)
    z = np.asarray(waypoint, float)
    n = np.asarray(outward, float) / np.linalg.norm(outward)
    out = []
    if np.linalg.norm(p[0] - (z + params.r_s * n)) > tol:
        out.append("first centre is not on the nominal ray")
    rel = p - z
    if np.any(np.abs(np.linalg.norm(rel, axis=1) - params.r_s) > tol):
        out.append("centre off the sphere")
    if np.any(rel @ n < params.r_s * math.cos(params.phi) - tol):
        out.append("centre outside the cap")
    out.extend(_pair_and_order_violations(p, params.l, tol))
    return out


def _lift(xy, r_s):
    xy = np.asarray(xy, float).reshape(-1, 2)
    z = np.sqrt(np.maximum(r_s * r_s - (xy ** 2).sum(axis=1), 0.0))
    return np.column_stack([xy, z])


def _ring_start(n: int, r_s: float, phi: float, l: float):
    """Pole plus concentric rings spaced a little wider than ``l``; None if
    the rings run past the cap before ``n`` points are placed."""
    margin = 1.02
    step = 2.0 * math.asin(min(1.0, l * margin / (2.0 * r_s)))
    pts = [np.array([0.0, 0.0, r_s])]
    ring = 0
    while len(pts) < n:
        ring += 1
        theta = ring * step
        if theta > phi + 1e-12:
            return None
        rho = r_s * math.sin(theta)
        s = l * margin / (2.0 * rho)
        k = int(math.floor(math.pi / math.asin(s))) if s < 1.0 else 1
        k = max(1, min(k, n - len(pts)))
        offset = 0.5 * ring  # stagger consecutive rings
        for a in range(k):
            ang = 2.0 * math.pi * (a + offset) / k
            pts.append(np.array([rho * math.cos(ang) * 1.0, rho * math.sin(ang), r_s * math.cos(theta)]))
    return np.array(pts)


def _repel(n: int, r_s: float, phi: float, l: float, iterations: int):
    """Project-and-repel from a golden-angle spiral over the cap."""
    k = np.arange(n, dtype=float)
    cos_t = 1.0 - (1.0 - math.cos(phi)) * k / max(n - 1, 1)
    sin_t = np.sqrt(1.0 - cos_t ** 2)
    ang = k * math.pi * (3.0 - math.sqrt(5.0))
    c = r_s * np.column_stack([sin_t * np.cos(ang), sin_t * np.sin(ang), cos_t])
    zmin = r_s * math.cos(phi)
    target = l * (1.0 + 1e-6)
    for it in range(iterations):
        diff = c[:, None] - c[None]
        d = np.linalg.norm(diff, axis=2)
        np.fill_diagonal(d, np.inf)
        if d.min() >= target:
            return c
        short = np.clip(target - d, 0.0, None)
        push = (diff / d[..., None] * (0.5 * short)[..., None]).sum(axis=1)
        c = c + push
        c *= r_s / np.linalg.norm(c, axis=1, keepdims=True)
        low = c[:, 2] < zmin
        if low.any():
            rho = math.sqrt(r_s * r_s - zmin * zmin)
            xy = c[low, :2]
            xy *= rho / np.maximum(np.linalg.norm(xy, axis=1, keepdims=True), 1e-300)
            c[low] = np.column_stack([xy, np.full(low.sum(), zmin)])
        c[0] = [0.0, 0.0, r_s]
    return None


def _descend(c0, r_s: float, phi: float, l: float, rounds: int = 5):
    """Local descent on sum(x^2 + y^2) under the separation and cap constraints.

    Works in polar/azimuth angles so every point stays on the sphere; the cap
    and the separation from the fixed pole become bounds on the polar angle.
    Only pairs that start out close are constrained; pairs that end up too
    close are added and the solve repeated.
    """
    n = len(c0)
    if n < 2:
        return c0
    half = l * (1.0 + 1e-7) / (2.0 * r_s)
    if half >= 1.0:
        return c0
    theta_min = 2.0 * math.asin(half)
    limit = 1.0 - 2.0 * half * half  # cos of the smallest allowed central angle
    rest = c0[1:]
    th0 = np.arccos(np.clip(rest[:, 2] / r_s, -1.0, 1.0))
    ps0 = np.arctan2(rest[:, 1], rest[:, 0])
    m = n - 1

    def points(v):
        th, ps = v[:m], v[m:]
        return np.column_stack([np.sin(th) * np.cos(ps), np.sin(th) * np.sin(ps), np.cos(th)]) * r_s

    def obj(v):
        return float((np.sin(v[:m]) ** 2).sum())

    def obj_grad(v):
        return np.concatenate([np.sin(2.0 * v[:m]), np.zeros(m)])

    d0 = np.linalg.norm(rest[:, None] - rest[None], axis=2)
    iu, ju = np.nonzero(np.triu(d0 < 3.0 * l, 1))
    x = np.concatenate([th0, ps0])
    bounds = [(theta_min, phi)] * m + [(None, None)] * m
    for _ in range(rounds):
        pi_, pj = iu.copy(), ju.copy()
        rows = np.arange(len(pi_))

        def cons(v):
            th, ps = v[:m], v[m:]
            cg = np.cos(th[pi_]) * np.cos(th[pj]) + np.sin(th[pi_]) * np.sin(th[pj]) * np.cos(ps[pi_] - ps[pj])
            return limit - cg

        def cons_jac(v):
            th, ps = v[:m], v[m:]
            si, sj, ci, cj = np.sin(th[pi_]), np.sin(th[pj]), np.cos(th[pi_]), np.cos(th[pj])
            dps = ps[pi_] - ps[pj]
            jac = np.zeros((len(pi_), 2 * m))
            jac[rows, pi_] = -(-si * cj + ci * sj * np.cos(dps))
            jac[rows, pj] = -(-sj * ci + cj * si * np.cos(dps))
            jac[rows, m + pi_] = si * sj * np.sin(dps)
            jac[rows, m + pj] = -si * sj * np.sin(dps)
            return jac

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # SLSQP clips steps to the bounds
            res = minimize(
                obj, x, jac=obj_grad, method="SLSQP", bounds=bounds,
                constraints=[{"type": "ineq", "fun": cons, "jac": cons_jac}] if len(pi_) else [],
                options={"maxiter": 200, "ftol": 1e-15},
            )
        cand = points(res.x)
        d = np.linalg.norm(cand[:, None] - cand[None], axis=2)
        close = np.triu(d < l * (1.0 + 1e-8), 1)
        close[iu, ju] = False
        if not close.any():
            return np.vstack([[0.0, 0.0, r_s], cand])
        ni, nj = np.nonzero(close)
        iu, ju = np.concatenate([iu, ni]), np.concatenate([ju, nj])
    return c0


def candidate_ray_set(params: CandidateRayParams) -> CandidateRaySet:
    """Pack ``N_c`` candidate centres on the cap around the pole.

    Start from concentric rings (or a repelled spiral when the rings do not
    fit), then run a constrained descent that pulls the centres towards the
    pole. The descent result is kept only if it still satisfies every
    constraint and lowers the objective.
    """
    n, r_s, phi, l = params.count, params.r_s, params.phi, params.l
    area = cap_area(r_s, phi)
    max_n = int(math.floor(1.1 * area / params.disk_area))
    if n * params.disk_area > 1.1 * area:
        raise InfeasiblePacking(f"{n} candidate circles cannot fit in the cap (at most about {max_n})", max_n)
    if n == 1:
        return CandidateRaySet(np.array([[0.0, 0.0, r_s]]), params)

    start = _ring_start(n, r_s, phi, l)
    if start is None:
        start = _repel(n, r_s, phi, l, PACK_ITERATIONS)
    if start is None:
        raise InfeasiblePacking(f"could not place {n} candidate circles in the cap", max_n)
    best = start
    try:
        cand = _descend(start, r_s, phi, l)
        if not check_candidate_set(_sorted(cand), params, tol=1e-12) and packing_objective(cand) < packing_objective(start):
            best = cand
    except (ValueError, np.linalg.LinAlgError):
        logger.debug("candidate descent failed; keeping the ring layout")
    return CandidateRaySet(_sorted(best), params)


def _sorted(c):
    d = np.linalg.norm(c - c[0], axis=1)
    order = np.argsort(d, kind="stable")
    return c[order]


# --------------------------------------------------------------------------
# rays and alignment


def make_viewpoint(generator, proxy_normal, r_s: float = DEFAULT_RS) -> Ray:
    """Standoff ray aimed at ``generator`` along ``-proxy_normal``."""
    n = np.asarray(proxy_normal, float)
    n = n / np.linalg.norm(n)
    return Ray(np.asarray(generator, float) + r_s * n, -n)


def align_transform(waypoint, outward) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation taking the local +z pole onto ``outward`` at ``waypoint``."""
    n = np.asarray(outward, float)
    n = n / np.linalg.norm(n) + 0.0  # -0.0 -> +0.0 so atan2 gives 0 at the pole
    phi_y = math.acos(max(-1.0, min(1.0, float(n[2]))))
    phi_z = math.atan2(float(n[1]), float(n[0]))
    cz, sz = math.cos(phi_z), math.sin(phi_z)
    cy, sy = math.cos(phi_y), math.sin(phi_y)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    return rz @ ry, np.asarray(waypoint, float)


def align_candidates(ray: Ray, cset: CandidateRaySet, r_s: float | None = None) -> np.ndarray:
    """Candidate centres moved so the sphere centre sits on the ray's
    waypoint and the first centre lies on the ray's standoff side."""
    r_s = cset.params.r_s if r_s is None else r_s
    waypoint = ray.at(r_s)
    rot, t = align_transform(waypoint, -ray.direction)
    return cset.centers @ rot.T + t


# --------------------------------------------------------------------------
# validity


class ValidityOracle(Protocol):
    def is_valid(self, ray: Ray, theta_r: float) -> bool: ...


@dataclass
class PermissiveOracle:
    def is_valid(self, ray: Ray, theta_r: float) -> bool:
        return True


@dataclass
class RejectAllOracle:
    def is_valid(self, ray: Ray, theta_r: float) -> bool:
        return False


def elevation(ray: Ray) -> float:
    """Angle between the approach side of the ray and the world +z axis."""
    return math.acos(max(-1.0, min(1.0, float(-ray.direction[2]))))


@dataclass
class DefaultValidityOracle:
    """Elevation bound plus a clear line from the standoff point to the waypoint.

    The segment stops ``eps`` short of the waypoint so the face holding the
    waypoint never counts as an obstruction.
    """

    part: TriangleMesh | None = None
    env: Sequence[TriangleMesh] = ()
    r_s: float = DEFAULT_RS
    eps: float = 0.0

    def __post_init__(self):
        if self.eps == 0.0 and self.part is not None:
            self.eps = 1e-6 * self.part.bbox_diagonal()
        for m in self.meshes:
            m.bvh  # build now; the oracle may be called from worker threads

    @property
    def meshes(self) -> list[TriangleMesh]:
        return ([self.part] if self.part is not None else []) + list(self.env)

    def is_valid(self, ray: Ray, theta_r: float) -> bool:
        if elevation(ray) > theta_r + 1e-12:
            return False
        end = ray.at(self.r_s - self.eps)
        return not any(segment_blocked(m, ray.origin, end) for m in self.meshes)


def occluded(mesh: TriangleMesh, waypoint, standoff, face: int | None, eps: float, env: Sequence[TriangleMesh] = ()) -> bool:
    """Does anything cross the segment from the waypoint (offset by ``eps``) to the standoff point?"""
    waypoint = np.asarray(waypoint, float)
    d = np.asarray(standoff, float) - waypoint
    d /= np.linalg.norm(d)
    start = waypoint + eps * d
    ignore = None if face is None else [int(face)]
    if segment_blocked(mesh, start, standoff, ignore=ignore):
        return True
    return any(segment_blocked(m, start, standoff) for m in env)


def get_free_ray(
    ray: Ray,
    cset: CandidateRaySet,
    mesh: TriangleMesh,
    env: Sequence[TriangleMesh] = (),
    oracle: ValidityOracle | None = None,
    theta_r: float = DEFAULT_THETA_R,
    face: int | None = None,
    eps: float | None = None,
) -> Ray | None:
    """First aligned candidate direction that is unobstructed and valid."""
    oracle = oracle or DefaultValidityOracle(mesh, env, cset.params.r_s)
    eps = 1e-6 * mesh.bbox_diagonal() if eps is None else eps
    waypoint = ray.at(cset.params.r_s)
    for o in align_candidates(ray, cset):
        cand = Ray(o, waypoint - o)
        if occluded(mesh, waypoint, o, face, eps, env):
            continue
        if oracle.is_valid(cand, theta_r):
            return cand
    return None


# --------------------------------------------------------------------------
# planning


@dataclass(frozen=True)
class PoseCandidate:
    ray: Ray
    roll: float
    waypoint_index: int


def roll_angles(I: int) -> np.ndarray:
    return 2.0 * np.pi * np.arange(I) / I


@dataclass
class ValidConfigs:
    candidates: list[list[PoseCandidate]]
    status: list[str]
    rays_original: list[Ray]
    rays_final: list[Ray | None]

    def report(self) -> dict:
        return {s: self.status.count(s) for s in ("accepted", "corrected", "unrecoverable")}

    @property
    def unrecoverable(self) -> list[int]:
        return [i for i, s in enumerate(self.status) if s == "unrecoverable"]


def plan_valid_configs(
    rays: Sequence[Ray],
    cset: CandidateRaySet,
    mesh: TriangleMesh,
    env: Sequence[TriangleMesh] = (),
    oracle: ValidityOracle | None = None,
    theta_r: float = DEFAULT_THETA_R,
    I: int = 4,
    faces: Sequence[int] | None = None,
    threads: int = 1,
) -> ValidConfigs:
    """Keep each waypoint's ray when it is clear and valid, otherwise try the
    candidate set; accepted rays expand into ``I`` roll candidates.

    Unrecoverable waypoints get an empty candidate list.
    """
    oracle = oracle or DefaultValidityOracle(mesh, env, cset.params.r_s)
    mesh.bvh
    for m in env:
        m.bvh
    eps = 1e-6 * mesh.bbox_diagonal()
    rolls = roll_angles(I)
    r_s = cset.params.r_s

    def one(i):
        ray = rays[i]
        face = None if faces is None else int(faces[i])
        waypoint = ray.at(r_s)
        if not occluded(mesh, waypoint, ray.origin, face, eps, env) and oracle.is_valid(ray, theta_r):
            return "accepted", ray
        new = get_free_ray(ray, cset, mesh, env, oracle, theta_r, face, eps)
        return ("unrecoverable", None) if new is None else ("corrected", new)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(one, range(len(rays))))
    else:
        results = [one(i) for i in range(len(rays))]
    cands, status, final = [], [], []
    for i, (s, r) in enumerate(results):
        status.append(s)
        final.append(r)
        cands.append([] if r is None else [PoseCandidate(r, float(a), i) for a in rolls])
    out = ValidConfigs(cands, status, list(rays), final)
    logger.info("viewpoints: %s", out.report())
    return out


def config_metric(a: PoseCandidate, b: PoseCandidate, w: float = 0.05, w_r: float = 0.01) -> float:
    """Robot-free distance between poses: origin gap, ray angle and roll gap."""
    d = float(np.linalg.norm(a.ray.origin - b.ray.origin))
    ang = math.acos(max(-1.0, min(1.0, float(a.ray.direction @ b.ray.direction))))
    dr = abs(a.roll - b.roll) % (2.0 * math.pi)
    dr = min(dr, 2.0 * math.pi - dr)
    return d + w * ang + w_r * dr


def optimal_config_tour(
    layers: Sequence[Sequence],
    metric: Callable = config_metric,
) -> tuple[list[int], float]:
    """Cheapest one-per-layer selection for a fixed layer order.

    Returns the chosen index within each layer and the summed metric along
    the chain. Equivalent to a shortest path from a virtual source through
    every layer to a virtual sink.
    """
    if not layers:
        return [], 0.0
    for k, layer in enumerate(layers):
        if len(layer) == 0:
            raise EmptyLayer(f"layer {k} has no candidates")
    cost = np.zeros(len(layers[0]))
    back = []
    for prev, cur in zip(layers[:-1], layers[1:]):
        w = np.array([[metric(a, b) for b in cur] for a in prev], dtype=float)
        total = cost[:, None] + w
        arg = np.argmin(total, axis=0)
        back.append(arg)
        cost = total[arg, np.arange(len(cur))]
    pick = [int(np.argmin(cost))]
    best = float(cost[pick[0]])
    for arg in reversed(back):
        pick.append(int(arg[pick[-1]]))
    pick.reverse()
    return pick, best


@dataclass
class ViewpointPlan:
    configs: ValidConfigs
    cset: CandidateRaySet
    selection: list[PoseCandidate] = field(default_factory=list)
    cost: float = 0.0

    def to_dict(self) -> dict:
        def ray(r):
            return None if r is None else {"origin": r.origin.tolist(), "direction": r.direction.tolist()}

        return {
            "raysOriginal": [ray(r) for r in self.configs.rays_original],
            "raysFinal": [ray(r) for r in self.configs.rays_final],
            "status": list(self.configs.status),
            "report": self.configs.report(),
            "candidateSet": self.cset.to_dict(),
            "selection": [
                {
                    "waypointIndex": int(p.waypoint_index),
                    "rayOrigin": p.ray.origin.tolist(),
                    "rayDirection": p.ray.direction.tolist(),
                    "rollAngle": float(p.roll),
                }
                for p in self.selection
            ],
            "tourMetricCost": float(self.cost),
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")


def plan_viewpoints(
    mesh: TriangleMesh,
    tess,
    order,
    params: CandidateRayParams | None = None,
    env: Sequence[TriangleMesh] = (),
    oracle: ValidityOracle | None = None,
    theta_r: float = DEFAULT_THETA_R,
    I: int = 4,
    threads: int = 1,
) -> ViewpointPlan:
    """Viewpoints for a segmentation visited in tour ``order``."""
    params = params or CandidateRayParams()
    cset = candidate_ray_set(params)
    order = [int(i) for i in order]
    rays = [make_viewpoint(tess.generators[i], tess.proxy_normals[i], params.r_s) for i in order]
    faces = [int(tess.generator_faces[i]) for i in order]
    configs = plan_valid_configs(rays, cset, mesh, env, oracle, theta_r, I, faces, threads)
    layers = [c for c in configs.candidates if c]
    pick, cost = optimal_config_tour(layers)
    return ViewpointPlan(configs, cset, [layer[k] for layer, k in zip(layers, pick)], cost)
