"""Surface coverage planning on triangle meshes.

Segment a mesh into near-uniform clusters, connect the cluster generators
with surface geodesics, order them into a tour and turn each generator into
an unobstructed viewpoint.
"""

from .ccvt import EnergyParams, Tessellation, lloyd_run, repair_connectivity, segment
from .geodesic import GeneratorGraph, SteinerBackend, generator_graph
from .mesh import Ray, TriangleMesh, load_mesh
from .metrics import MetricsReport, compute_metrics
from .tour import CoveragePath, three_opt_tour
from .viewpoint import CandidateRayParams, candidate_ray_set, plan_viewpoints

__version__ = "0.1.0"

__all__ = [
    "CandidateRayParams",
    "CoveragePath",
    "EnergyParams",
    "GeneratorGraph",
    "MetricsReport",
    "Ray",
    "SteinerBackend",
    "Tessellation",
    "TriangleMesh",
    "candidate_ray_set",
    "compute_metrics",
    "generator_graph",
    "lloyd_run",
    "load_mesh",
    "plan_viewpoints",
    "repair_connectivity",
    "segment",
    "three_opt_tour",
]
