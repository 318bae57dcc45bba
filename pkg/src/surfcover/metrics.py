"""Segmentation quality measures: coverage/overlap, RSD, unreachable faces, area spread."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .ccvt import DEFAULT_RC, Tessellation
from .geodesic import SteinerBackend, cluster_adjacency, cluster_submesh
from .mesh import TriangleMesh

DEFAULT_THETA0 = math.pi / 3


def generator_hits(mesh: TriangleMesh, tess: Tessellation, threshold: float, backend=None) -> np.ndarray:
    """Per face, how many generators (own cluster or an adjacent one) lie
    within ``threshold`` geodesic distance of the face centroid.

    Distances from generator ``i`` are measured on the submesh made of
    cluster ``i`` and its neighbours, which holds exactly the faces that
    count generator ``i`` as own or adjacent.
    """
    backend = backend or SteinerBackend()
    neighbors = cluster_adjacency(mesh, tess.face_to_cluster)
    hits = np.zeros(mesh.n_faces, dtype=np.int64)
    for i in range(tess.m):
        sub = cluster_submesh(mesh, tess, i, neighbors)
        d = backend.face_distances(mesh, (int(tess.generator_faces[i]), tess.generators[i]), faces=sub.faces)
        hits += d <= threshold
    return hits


def coverage_and_overlap(
    mesh: TriangleMesh,
    tess: Tessellation,
    backend=None,
    r_c: float = DEFAULT_RC,
    threshold: float | None = None,
) -> tuple[float, float]:
    """Area-weighted percentages of faces reached by at least one and by at
    least two generators. The default threshold is ``r_c``."""
    threshold = r_c if threshold is None else threshold
    hits = generator_hits(mesh, tess, threshold, backend)
    return _area_pct(mesh, hits >= 1), _area_pct(mesh, hits >= 2)


def _area_pct(mesh: TriangleMesh, mask) -> float:
    return float(100.0 * mesh.face_areas[mask].sum() / mesh.total_area)


def rsd(areas, sigma_e: float) -> float:
    """Relative standard deviation (%) of cluster areas in units of ``sigma_e``."""
    a = np.asarray(areas.cluster_areas if isinstance(areas, Tessellation) else areas, dtype=float) / sigma_e
    mean = a.mean()
    return float(100.0 * a.std() / mean) if mean > 0 else 0.0


def unreachable_faces(mesh: TriangleMesh, tess: Tessellation, theta0: float = DEFAULT_THETA0):
    """Faces whose normal is more than ``theta0`` away from their cluster's proxy normal.

    Returns ``(faces, count_pct, area_pct)``.
    """
    n = tess.proxy_normals[tess.face_to_cluster]
    cos = np.einsum("ij,ij->i", mesh.face_normals, n)
    angle = np.arccos(np.clip(cos, -1.0, 1.0))
    bad = angle > theta0
    return np.flatnonzero(bad), float(100.0 * bad.sum() / mesh.n_faces), _area_pct(mesh, bad)


def area_sd(tess_or_areas) -> float:
    """Population standard deviation of cluster areas."""
    a = tess_or_areas.cluster_areas if isinstance(tess_or_areas, Tessellation) else tess_or_areas
    return float(np.std(np.asarray(a, dtype=float)))


@dataclass
class MetricsReport:
    coverage_pct: float
    overlap_pct: float
    rsd_pct: float
    unreach_pct: float
    unreach_area_pct: float
    area_sd: float
    cluster_areas: list = field(default_factory=list)
    unreachable_faces: list = field(default_factory=list)
    r_c: float = DEFAULT_RC
    theta0: float = DEFAULT_THETA0
    threshold: float = DEFAULT_RC
    seed: int | None = None
    variant: str = ""
    runtime: float = 0.0

    def to_dict(self) -> dict:
        return {
            "coveragePct": self.coverage_pct,
            "overlapPct": self.overlap_pct,
            "rsdPct": self.rsd_pct,
            "unreachPct": self.unreach_pct,
            "unreachAreaPct": self.unreach_area_pct,
            "areaSD": self.area_sd,
            "clusterAreas": [float(a) for a in self.cluster_areas],
            "unreachableFaces": [int(f) for f in self.unreachable_faces],
            "params": {"r_c": self.r_c, "theta0": self.theta0, "coverageThreshold": self.threshold},
            "conventions": {"coverage": "area-weighted", "unreach": "face-count over all faces"},
            "seed": self.seed,
            "variant": self.variant,
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    CSV_FIELDS = ("seed", "variant", "r_c", "theta0", "threshold", "coverage_pct", "overlap_pct",
                  "rsd_pct", "unreach_pct", "unreach_area_pct", "area_sd", "runtime")

    def csv_row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in self.CSV_FIELDS}

    def save_csv(self, path, header: bool = True) -> None:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS)
        if header:
            w.writeheader()
        w.writerow(self.csv_row())
        with open(path, "w" if header else "a", newline="") as fh:
            fh.write(buf.getvalue())


def compute_metrics(
    mesh: TriangleMesh,
    tess: Tessellation,
    backend=None,
    r_c: float = DEFAULT_RC,
    threshold: float | None = None,
    theta0: float = DEFAULT_THETA0,
) -> MetricsReport:
    threshold = r_c if threshold is None else threshold
    cov, ovl = coverage_and_overlap(mesh, tess, backend, r_c, threshold)
    faces, upct, uarea = unreachable_faces(mesh, tess, theta0)
    return MetricsReport(
        coverage_pct=cov,
        overlap_pct=ovl,
        rsd_pct=rsd(tess, math.pi * r_c * r_c),
        unreach_pct=upct,
        unreach_area_pct=uarea,
        area_sd=area_sd(tess),
        cluster_areas=tess.cluster_areas.tolist(),
        unreachable_faces=faces.tolist(),
        r_c=r_c,
        theta0=theta0,
        threshold=threshold,
        seed=tess.seed,
        variant=tess.params.variant if tess.params is not None else "",
    )
