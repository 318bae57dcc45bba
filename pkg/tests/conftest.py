import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from surfcover import shapes
from surfcover.ccvt import EnergyParams, build_tessellation

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def small_sphere():
    return shapes.icosphere(6)  # 720 faces, unit radius


@pytest.fixture(scope="session")
def coarse_sphere():
    return shapes.icosphere(3)


@pytest.fixture(scope="session")
def flat_grid():
    return shapes.grid(10, 10, 1.0, 1.0)


def halves(mesh, axis=0):
    """Two-cluster tessellation splitting ``mesh`` at the plane ``x[axis] = 0``
    (or at the middle of its extent)."""
    c = mesh.face_centroids[:, axis]
    mid = 0.5 * (c.min() + c.max())
    labels = (c > mid).astype(np.int64)
    params = EnergyParams.defaults(mesh, "l2", m=2)
    return build_tessellation(mesh, labels, params)


def scalar_hit(o, d, a, b, c):
    """Plain-Python ray/triangle test (barycentric solve by Cramer's rule)."""
    e1 = [b[i] - a[i] for i in range(3)]
    e2 = [c[i] - a[i] for i in range(3)]
    s = [o[i] - a[i] for i in range(3)]
    nd = [-d[i] for i in range(3)]

    def det3(x, y, z):
        return (x[0] * (y[1] * z[2] - y[2] * z[1])
                - y[0] * (x[1] * z[2] - x[2] * z[1])
                + z[0] * (x[1] * y[2] - x[2] * y[1]))

    den = det3(e1, e2, nd)
    if abs(den) < 1e-14:
        return None
    u = det3(s, e2, nd) / den
    v = det3(e1, s, nd) / den
    t = det3(e1, e2, s) / den
    if u < 0 or v < 0 or u + v > 1 or t <= 0:
        return None
    return t


def brute_nearest(mesh, o, d):
    best = None
    for f, (i, j, k) in enumerate(mesh.faces.tolist()):
        t = scalar_hit(o, d, *(mesh.vertices[x].tolist() for x in (i, j, k)))
        if t is not None and (best is None or t < best[1]):
            best = (f, t)
    return best


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
