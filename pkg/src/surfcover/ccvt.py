"""Constrained centroidal Voronoi tessellation of a mesh into face clusters.

Faces are assigned to generators by a cost mixing an area-weighted distance
term and a thresholded normal-deviation term; generators are then moved to the
member face centroid closest to the cluster's mass centroid (Lloyd iteration).
"""

from __future__ import annotations

import colorsys
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .mesh import TriangleMesh, save_ply

logger = logging.getLogger(__name__)

DEFAULT_RC = 5.0 * math.sqrt(2.0) * 1e-3
DEGENERATE_NORMAL = 1e-9
# cost-matrix entries evaluated per chunk
_CHUNK = 1 << 21


class SegmentationError(Exception):
    pass


class TooManyClusters(SegmentationError):
    pass


class DegenerateNormal(SegmentationError):
    pass


VARIANTS = {
    "l1": ("l1", False),
    "l2": ("l2", False),
    "l1n": ("l1", True),
    "l2n": ("l2", True),
}


@dataclass(frozen=True)
class EnergyParams:
    """Weights of the assignment cost.

    ``alpha1`` normalises distances, ``alpha2`` trades distance against the
    normal term, faces whose normal dot product with the proxy normal is not
    above ``alpha3`` get their normal cost multiplied by ``alpha4``.
    """

    alpha1: float
    alpha2: float = 0.93
    alpha3: float = 1.0 / 1.9
    alpha4: float = 7.0
    norm: str = "l1"
    normal_cost: bool = True
    m: int | str = "auto"

    def __post_init__(self):
        if not self.alpha1 > 0:
            raise ValueError("alpha1 must be positive")
        if not 0.0 <= self.alpha2 <= 1.0:
            raise ValueError("alpha2 must lie in [0, 1]")
        if not -1.0 < self.alpha3 < 1.0:
            raise ValueError("alpha3 must lie in (-1, 1)")
        if not self.alpha4 > 1.0:
            raise ValueError("alpha4 must be > 1")
        if self.norm not in ("l1", "l2"):
            raise ValueError(f"norm must be 'l1' or 'l2', got {self.norm!r}")
        if self.m != "auto" and (not isinstance(self.m, (int, np.integer)) or self.m < 1):
            raise ValueError("m must be a positive integer or 'auto'")

    @classmethod
    def defaults(cls, mesh: TriangleMesh, variant: str = "l1n", rough: bool = False, **overrides) -> "EnergyParams":
        """Recommended weights for ``mesh``: alpha1 = bbox diagonal / 6,
        alpha2 = 0.93, alpha4 = 7, alpha3 = 1/1.9 (1/3 when ``rough``)."""
        norm, normal_cost = VARIANTS[variant]
        kw = dict(
            alpha1=mesh.bbox_diagonal() / 6.0,
            alpha3=1.0 / 3.0 if rough else 1.0 / 1.9,
            norm=norm,
            normal_cost=normal_cost,
        )
        kw.update(overrides)
        return cls(**kw)

    @property
    def variant(self) -> str:
        return self.norm + ("n" if self.normal_cost else "")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["m"] = self.m if self.m == "auto" else int(self.m)
        return d


@dataclass
class Cluster:
    face_indices: np.ndarray
    generator: np.ndarray
    generator_face: int
    mass_centroid: np.ndarray
    proxy_normal: np.ndarray
    area: float
    degenerate_normal: bool = False


@dataclass
class Tessellation:
    clusters: list[Cluster]
    face_to_cluster: np.ndarray
    energy: float
    iterations: int
    seed: int
    params: EnergyParams
    energy_trace: list[float] = field(default_factory=list)
    converged: bool = False

    @property
    def m(self) -> int:
        return len(self.clusters)

    @property
    def generators(self) -> np.ndarray:
        return np.array([c.generator for c in self.clusters])

    @property
    def generator_faces(self) -> np.ndarray:
        return np.array([c.generator_face for c in self.clusters], dtype=np.int64)

    @property
    def proxy_normals(self) -> np.ndarray:
        return np.array([c.proxy_normal for c in self.clusters])

    @property
    def cluster_areas(self) -> np.ndarray:
        return np.array([c.area for c in self.clusters])

    def check_partition(self, n_faces: int) -> None:
        """Raise AssertionError unless clusters are disjoint and cover all faces."""
        seen = np.zeros(n_faces, dtype=np.int64)
        for k, c in enumerate(self.clusters):
            assert len(c.face_indices) > 0, f"cluster {k} is empty"
            seen[c.face_indices] += 1
            assert np.all(self.face_to_cluster[c.face_indices] == k), f"cluster {k} inconsistent with faceToCluster"
            assert c.generator_face in set(c.face_indices.tolist()), f"generator of cluster {k} is not a member face"
        assert np.all(seen == 1), "clusters overlap or leave faces unassigned"

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "seed": int(self.seed),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "energy": float(self.energy),
            "energyTrace": [float(e) for e in self.energy_trace],
            "clusters": [
                {
                    "generator": [float(x) for x in c.generator],
                    "generatorFace": int(c.generator_face),
                    "massCentroid": [float(x) for x in c.mass_centroid],
                    "proxyNormal": [float(x) for x in c.proxy_normal],
                    "area": float(c.area),
                    "degenerateNormal": bool(c.degenerate_normal),
                    "faceIndices": [int(i) for i in c.face_indices],
                }
                for c in self.clusters
            ],
            "faceToCluster": [int(i) for i in self.face_to_cluster],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tessellation":
        p = dict(d["params"])
        clusters = [
            Cluster(
                face_indices=np.asarray(c["faceIndices"], dtype=np.int64),
                generator=np.asarray(c["generator"], dtype=float),
                generator_face=int(c["generatorFace"]),
                mass_centroid=np.asarray(c["massCentroid"], dtype=float),
                proxy_normal=np.asarray(c["proxyNormal"], dtype=float),
                area=float(c["area"]),
                degenerate_normal=bool(c.get("degenerateNormal", False)),
            )
            for c in d["clusters"]
        ]
        return cls(
            clusters=clusters,
            face_to_cluster=np.asarray(d["faceToCluster"], dtype=np.int64),
            energy=float(d["energy"]),
            iterations=int(d["iterations"]),
            seed=int(d["seed"]),
            params=EnergyParams(**p),
            energy_trace=list(d["energyTrace"]),
            converged=bool(d.get("converged", False)),
        )

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load_json(cls, path) -> "Tessellation":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# --------------------------------------------------------------------------
# cost terms


def expected_cluster_count(mesh: TriangleMesh, r_c: float) -> int:
    """Number of clusters so each covers about one nozzle footprint pi * r_c**2."""
    if not r_c > 0:
        raise ValueError("r_c must be positive")
    return max(1, int(round(mesh.total_area / (math.pi * r_c * r_c))))


def normal_cost(face_normal, proxy_normal, alpha3: float, alpha4: float):
    """Thresholded normal deviation; vectorises over leading axes."""
    dot = np.sum(np.asarray(face_normal) * np.asarray(proxy_normal), axis=-1)
    beta = np.where(dot > alpha3, 1.0, alpha4)
    return beta * (1.0 - dot) / 2.0


def _distance(diff, norm):
    if norm == "l1":
        return np.abs(diff).sum(axis=-1)
    return np.sqrt((diff * diff).sum(axis=-1))


def _costs(cen, nrm, area, g, pn, params: EnergyParams):
    # single kernel for every cost evaluation so that values agree bit for bit
    d = _distance(cen - g, params.norm)
    c = ((params.alpha2 if params.normal_cost else 1.0) / params.alpha1) * d
    if params.normal_cost:
        dot = (nrm * pn).sum(axis=-1)
        beta = np.where(dot > params.alpha3, 1.0, params.alpha4)
        c = c + (1.0 - params.alpha2) * (beta * (1.0 - dot) / 2.0)
    return c * area


def cost_xi(params: EnergyParams, generator, proxy_normal, face_centroid, face_normal, face_area):
    """Cost of assigning a single face to a generator."""
    f = lambda x: np.asarray(x, dtype=float)
    return float(_costs(f(face_centroid), f(face_normal), float(face_area), f(generator), f(proxy_normal), params))


def cost_matrix(mesh: TriangleMesh, generators, proxy_normals, params: EnergyParams, faces=None) -> np.ndarray:
    """``(n_faces, m)`` assignment costs, optionally for a subset of faces."""
    g = np.asarray(generators, dtype=float).reshape(-1, 3)
    pn = np.asarray(proxy_normals, dtype=float).reshape(-1, 3)
    if faces is None:
        faces = np.arange(mesh.n_faces)
    cen = mesh.face_centroids[faces]
    nrm = mesh.face_normals[faces]
    area = mesh.face_areas[faces]
    out = np.empty((len(faces), len(g)))
    step = max(1, _CHUNK // max(1, len(g)))
    for s in range(0, len(faces), step):
        sl = slice(s, s + step)
        out[sl] = _costs(cen[sl, None, :], nrm[sl, None, :], area[sl, None], g[None], pn[None], params)
    return out


def pair_costs(mesh: TriangleMesh, faces, generators, proxy_normals, params: EnergyParams) -> np.ndarray:
    """Cost of face ``faces[i]`` against ``generators[i]`` (row-wise)."""
    faces = np.asarray(faces, dtype=np.int64)
    g = np.asarray(generators, dtype=float).reshape(-1, 3)
    pn = np.asarray(proxy_normals, dtype=float).reshape(-1, 3)
    return _costs(mesh.face_centroids[faces], mesh.face_normals[faces], mesh.face_areas[faces], g, pn, params)


@dataclass
class Assignment:
    labels: np.ndarray
    costs: np.ndarray
    empty: list[int]

    @property
    def energy(self) -> float:
        return float(self.costs.sum())


def assign_faces(mesh: TriangleMesh, generators, proxy_normals, params: EnergyParams) -> Assignment:
    """Give every face to its cheapest generator; ties go to the lowest index."""
    g = np.asarray(generators, dtype=float).reshape(-1, 3)
    if len(g) == 0:
        raise ValueError("need at least one generator")
    c = cost_matrix(mesh, g, proxy_normals, params)
    labels = np.argmin(c, axis=1)
    costs = c[np.arange(len(labels)), labels]
    counts = np.bincount(labels, minlength=len(g))
    return Assignment(labels=labels, costs=costs, empty=np.flatnonzero(counts == 0).tolist())


# --------------------------------------------------------------------------
# per-cluster updates


def mass_centroid(mesh: TriangleMesh, faces) -> np.ndarray:
    """Area-weighted mean of the member face centroids."""
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) == 0:
        raise ValueError("empty cluster")
    w = mesh.face_areas[faces]
    return (w[:, None] * mesh.face_centroids[faces]).sum(axis=0) / w.sum()


def constrain_centroid(mesh: TriangleMesh, faces, centroid) -> int:
    """Member face whose centroid is closest to ``centroid`` (lowest index on ties)."""
    faces = np.sort(np.asarray(faces, dtype=np.int64))
    if len(faces) == 0:
        raise ValueError("empty cluster")
    d2 = ((mesh.face_centroids[faces] - np.asarray(centroid, float)) ** 2).sum(axis=1)
    return int(faces[np.argmin(d2)])


def proxy_normal(mesh: TriangleMesh, faces) -> np.ndarray:
    """Normalised area-weighted mean of member face normals.

    Raises DegenerateNormal when the normals cancel out.
    """
    faces = np.asarray(faces, dtype=np.int64)
    s = (mesh.face_areas[faces, None] * mesh.face_normals[faces]).sum(axis=0)
    n = np.linalg.norm(s)
    if n <= DEGENERATE_NORMAL:
        raise DegenerateNormal("area-weighted normals cancel out")
    return s / n


def _cluster_updates(mesh: TriangleMesh, labels: np.ndarray, m: int):
    """Vectorised mass centroids, constrained generator faces and proxy normals."""
    w = mesh.face_areas
    area = np.bincount(labels, weights=w, minlength=m)
    cen = np.column_stack([np.bincount(labels, weights=w * mesh.face_centroids[:, k], minlength=m) for k in range(3)])
    safe = np.where(area > 0, area, 1.0)
    mass = cen / safe[:, None]
    nsum = np.column_stack([np.bincount(labels, weights=w * mesh.face_normals[:, k], minlength=m) for k in range(3)])

    d2 = ((mesh.face_centroids - mass[labels]) ** 2).sum(axis=1)
    faces = np.arange(mesh.n_faces)
    order = np.lexsort((faces, d2, labels))
    first = np.ones(len(order), dtype=bool)
    first[1:] = labels[order[1:]] != labels[order[:-1]]
    gen_face = np.full(m, -1, dtype=np.int64)
    gen_face[labels[order[first]]] = order[first]

    nn = np.linalg.norm(nsum, axis=1)
    degenerate = nn <= DEGENERATE_NORMAL
    normals = np.empty_like(nsum)
    normals[~degenerate] = nsum[~degenerate] / nn[~degenerate, None]
    if degenerate.any():
        # fall back to the generator face's own normal
        ok = degenerate & (gen_face >= 0)
        normals[ok] = mesh.face_normals[gen_face[ok]]
        normals[degenerate & (gen_face < 0)] = (0.0, 0.0, 1.0)
    return area, mass, gen_face, normals, degenerate


def build_tessellation(mesh: TriangleMesh, labels, params: EnergyParams, seed: int = 0, iterations: int = 0,
                       energy_trace=None, converged: bool = False) -> Tessellation:
    """Assemble clusters (generators, proxy normals, areas) from a face labelling."""
    labels = np.asarray(labels, dtype=np.int64)
    m = int(labels.max()) + 1
    area, mass, gen_face, normals, degenerate = _cluster_updates(mesh, labels, m)
    if np.any(gen_face < 0):
        raise SegmentationError("labelling leaves a cluster without faces")
    order = np.argsort(labels, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(np.bincount(labels, minlength=m))])
    clusters = [
        Cluster(
            face_indices=order[bounds[k]:bounds[k + 1]],
            generator=mesh.face_centroids[gen_face[k]].copy(),
            generator_face=int(gen_face[k]),
            mass_centroid=mass[k],
            proxy_normal=normals[k],
            area=float(area[k]),
            degenerate_normal=bool(degenerate[k]),
        )
        for k in range(m)
    ]
    tess = Tessellation(
        clusters=clusters,
        face_to_cluster=labels.copy(),
        energy=0.0,
        iterations=iterations,
        seed=seed,
        params=params,
        energy_trace=list(energy_trace or []),
        converged=converged,
    )
    tess.energy = total_energy(mesh, tess, params)
    return tess


def total_energy(mesh: TriangleMesh, tess: Tessellation, params: EnergyParams | None = None) -> float:
    """Sum of face costs against their assigned generator and proxy normal."""
    params = params or tess.params
    lab = tess.face_to_cluster
    return float(pair_costs(mesh, np.arange(mesh.n_faces), tess.generators[lab], tess.proxy_normals[lab], params).sum())


# --------------------------------------------------------------------------
# Lloyd iteration


def resolve_m(mesh: TriangleMesh, params: EnergyParams, r_c: float = DEFAULT_RC) -> int:
    return expected_cluster_count(mesh, r_c) if params.m == "auto" else int(params.m)


def lloyd_run(
    mesh: TriangleMesh,
    params: EnergyParams,
    seed: int = 0,
    max_iterations: int = 50,
    tol: float = 1e-4,
    r_c: float = DEFAULT_RC,
) -> Tessellation:
    """Lloyd relaxation from ``m`` seeded random face centroids.

    Stops once the relative change of the assignment energy drops below
    ``tol`` or after ``max_iterations`` assignment passes.
    """
    m = resolve_m(mesh, params, r_c)
    nf = mesh.n_faces
    if m > nf:
        raise TooManyClusters(f"m={m} exceeds the face count {nf}")
    rng = np.random.default_rng(seed)
    gen_face = rng.choice(nf, size=m, replace=False)
    gens = mesh.face_centroids[gen_face].copy()
    normals = mesh.face_normals[gen_face].copy()

    trace: list[float] = []
    converged = False
    labels = None
    it = 0
    for it in range(1, max_iterations + 1):
        a = assign_faces(mesh, gens, normals, params)
        reseeds = 0
        while a.empty:
            # reseed each empty cluster at the worst-served face centroid
            taken = set(gen_face.tolist())
            order = np.argsort(-a.costs, kind="stable")
            for k in a.empty:
                f = next(int(x) for x in order if int(x) not in taken)
                taken.add(f)
                gen_face[k] = f
                gens[k] = mesh.face_centroids[f]
                normals[k] = mesh.face_normals[f]
            a = assign_faces(mesh, gens, normals, params)
            reseeds += 1
            if reseeds > m:
                raise SegmentationError("could not repopulate empty clusters")
        labels = a.labels
        trace.append(a.energy)
        _, _, gen_face, normals, _ = _cluster_updates(mesh, labels, m)
        gens = mesh.face_centroids[gen_face].copy()
        logger.debug("lloyd iteration %d energy %.9g", it, a.energy)
        if len(trace) >= 2:
            prev = trace[-2]
            if abs(trace[-1] - prev) < tol * abs(prev):
                converged = True
                break
    return build_tessellation(mesh, labels, params, seed=seed, iterations=it, energy_trace=trace, converged=converged)


def segment(
    mesh: TriangleMesh,
    params: EnergyParams,
    seed: int = 0,
    max_iterations: int = 50,
    tol: float = 1e-4,
    r_c: float = DEFAULT_RC,
    repair: bool = True,
) -> Tessellation:
    """Lloyd relaxation followed (by default) by connectivity repair."""
    tess = lloyd_run(mesh, params, seed=seed, max_iterations=max_iterations, tol=tol, r_c=r_c)
    if repair:
        tess = repair_connectivity(mesh, tess)
    return tess


# --------------------------------------------------------------------------
# connectivity


def cluster_components(mesh: TriangleMesh, labels) -> tuple[int, np.ndarray]:
    """Connected components of the face graph restricted to same-label edges."""
    labels = np.asarray(labels)
    adj = mesh.adjacency_matrix.tocoo()
    same = labels[adj.row] == labels[adj.col]
    g = sparse.coo_matrix(
        (np.ones(same.sum(), dtype=np.int8), (adj.row[same], adj.col[same])), shape=adj.shape
    ).tocsr()
    return csgraph.connected_components(g, directed=False)


def is_connected(mesh: TriangleMesh, tess: Tessellation) -> bool:
    _, comp = cluster_components(mesh, tess.face_to_cluster)
    return len(np.unique(comp)) == tess.m


def repair_connectivity(mesh: TriangleMesh, tess: Tessellation) -> Tessellation:
    """Make every cluster edge-connected.

    All but the largest component of a cluster are handed, face by face, to
    the adjacent cluster with the lowest assignment cost. Faces only reach a
    neighbour through kept (main) components, so absorbed faces stay attached.
    """
    labels = tess.face_to_cluster.copy()
    params = tess.params
    gens, normals = tess.generators, tess.proxy_normals
    adj = mesh.adjacency_matrix
    changed = False
    for _ in range(mesh.n_faces):
        n_comp, comp = cluster_components(mesh, labels)
        if n_comp == len(np.unique(labels)):
            break
        size = np.bincount(comp, weights=mesh.face_areas)
        comp_label = np.zeros(n_comp, dtype=np.int64)
        comp_label[comp] = labels
        first_face = np.full(n_comp, mesh.n_faces)
        np.minimum.at(first_face, comp, np.arange(mesh.n_faces))
        # main component per label: largest area, lowest first face on ties
        order = np.lexsort((first_face, -size, comp_label))
        head = np.ones(n_comp, dtype=bool)
        head[1:] = comp_label[order[1:]] != comp_label[order[:-1]]
        keep = np.zeros(n_comp, dtype=bool)
        keep[order[head]] = True
        orphan = ~keep[comp]

        progressed = False
        while orphan.any():
            idx = np.flatnonzero(orphan)
            best_label = np.full(len(idx), -1)
            best_cost = np.full(len(idx), np.inf)
            for j, f in enumerate(idx):
                nb = adj.indices[adj.indptr[f]:adj.indptr[f + 1]]
                nb = nb[~orphan[nb]]
                if len(nb) == 0:
                    continue
                cand = np.unique(labels[nb])
                c = pair_costs(mesh, np.full(len(cand), f), gens[cand], normals[cand], params)
                k = int(np.argmin(c))
                best_label[j], best_cost[j] = cand[k], c[k]
            ready = best_label >= 0
            if not ready.any():
                break
            labels[idx[ready]] = best_label[ready]
            orphan[idx[ready]] = False
            progressed = changed = True
        if not progressed:
            logger.warning("cluster islands without neighbouring clusters remain disconnected")
            break
    if not changed:
        return tess
    # relabel so that cluster ids stay contiguous
    used = np.unique(labels)
    remap = np.full(tess.m, -1)
    remap[used] = np.arange(len(used))
    out = build_tessellation(mesh, remap[labels], params, seed=tess.seed, iterations=tess.iterations,
                             energy_trace=tess.energy_trace, converged=tess.converged)
    return out


# --------------------------------------------------------------------------
# export


def cluster_colors(m: int) -> np.ndarray:
    rgb = [colorsys.hsv_to_rgb((k * 0.618033988749895) % 1.0, 0.65, 0.95) for k in range(m)]
    return (np.array(rgb) * 255).round().astype(np.uint8)


def save_colored_ply(mesh: TriangleMesh, tess: Tessellation, path) -> None:
    save_ply(mesh, path, face_colors=cluster_colors(tess.m)[tess.face_to_cluster])
