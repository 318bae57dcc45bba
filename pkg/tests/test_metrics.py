import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surfcover import shapes
from surfcover.ccvt import EnergyParams, build_tessellation, segment
from surfcover.geodesic import SteinerBackend
from surfcover.invariants import check_metrics
from surfcover.metrics import (
    MetricsReport,
    area_sd,
    compute_metrics,
    coverage_and_overlap,
    generator_hits,
    rsd,
    unreachable_faces,
)

from conftest import halves


@pytest.fixture(scope="module")
def seg():
    mesh = shapes.icosphere(8, 0.035)
    tess = segment(mesh, EnergyParams.defaults(mesh, m=16), seed=0)
    return mesh, tess


def uniform_grid_partition(n=8, k=4):
    """n x n grid cut into k x k equal square blocks."""
    mesh = shapes.grid(n, n, 1.0, 1.0)
    c = mesh.face_centroids
    bx = np.minimum((c[:, 0] * k).astype(int), k - 1)
    by = np.minimum((c[:, 1] * k).astype(int), k - 1)
    return mesh, build_tessellation(mesh, bx * k + by, EnergyParams.defaults(mesh, m=k * k))


def test_rsd_hand_values():
    assert rsd([1.0, 3.0], 2.0) == pytest.approx(50.0)
    assert rsd([2.0, 2.0, 2.0], 2.0) == 0.0


@settings(max_examples=30)
@given(st.lists(st.floats(0.1, 10.0), min_size=1, max_size=20), st.floats(0.1, 100.0))
def test_rsd_scale_invariant(areas, s):
    a = np.asarray(areas)
    assert rsd(a * s * s, s * s) == pytest.approx(rsd(a, 1.0), rel=1e-9, abs=1e-9)


def test_area_sd_hand_values():
    assert area_sd([1.0, 3.0]) == 1.0
    assert area_sd([5.0, 5.0]) == 0.0


@settings(max_examples=30)
@given(st.lists(st.floats(0.1, 10.0), min_size=1, max_size=20))
def test_area_sd_mean_duplicate(areas):
    a = np.asarray(areas)
    assert area_sd(np.append(a, a.mean())) <= area_sd(a) * (1 + 1e-12) + 1e-15


def test_uniform_grid_zero_rsd_and_unreach():
    mesh, tess = uniform_grid_partition()
    r = compute_metrics(mesh, tess, r_c=0.1)
    assert r.rsd_pct == pytest.approx(0.0, abs=1e-9)
    assert r.unreach_pct == 0.0 and r.unreachable_faces == []


def test_threshold_extremes(seg):
    mesh, tess = seg
    cov, ovl = coverage_and_overlap(mesh, tess, threshold=np.inf)
    assert cov == pytest.approx(100.0) and ovl == pytest.approx(100.0)
    cov0, _ = coverage_and_overlap(mesh, tess, threshold=0.0)
    share = 100 * mesh.face_areas[tess.generator_faces].sum() / mesh.total_area
    assert cov0 == pytest.approx(share)


def test_coverage_monotone_and_accounting(seg):
    mesh, tess = seg
    prev_c = prev_o = -1.0
    for thr in np.linspace(0.0, 0.03, 10):
        hits = generator_hits(mesh, tess, thr)
        cov = 100 * mesh.face_areas[hits >= 1].sum() / mesh.total_area
        unc = 100 * mesh.face_areas[hits == 0].sum() / mesh.total_area
        assert cov + unc == pytest.approx(100.0, abs=1e-12)
        c, o = coverage_and_overlap(mesh, tess, threshold=thr)
        assert o <= c
        assert c >= prev_c and o >= prev_o
        prev_c, prev_o = c, o


def test_flat_strip_matches_euclidean():
    mesh = shapes.grid(20, 2, 2.0, 0.2)
    tess = halves(mesh)
    thr = 0.5
    hits = generator_hits(mesh, tess, thr, SteinerBackend())
    e = np.linalg.norm(mesh.face_centroids[:, None] - tess.generators[None], axis=2)
    # the approximate distance d obeys e <= d <= 1.01 e
    surely_in = (e * 1.01 <= thr).sum(axis=1)
    maybe_in = (e <= thr).sum(axis=1)
    assert np.all(hits >= surely_in) and np.all(hits <= maybe_in)
    assert (surely_in == maybe_in).mean() > 0.9


def test_unreachable_cases():
    mesh, tess = uniform_grid_partition()
    assert unreachable_faces(mesh, tess)[1] == 0.0
    fine = shapes.icosphere(16)
    labels = (fine.face_centroids[:, 2] < 0).astype(int)
    hemis = build_tessellation(fine, labels, EnergyParams.defaults(fine, m=2))
    assert np.allclose(np.abs(hemis.proxy_normals[:, 2]), 1.0, atol=1e-3)
    faces, pct, area_pct = unreachable_faces(fine, hemis, math.pi / 3)
    # polar angle > 60 deg is half of each hemisphere's area
    assert area_pct == pytest.approx(50.0, abs=1.0)
    assert pct == pytest.approx(50.0, abs=2.0)
    assert unreachable_faces(fine, hemis, math.pi)[1] == 0.0
    prev = 101.0
    for t in np.linspace(0, math.pi, 12):
        p = unreachable_faces(fine, hemis, t)[1]
        assert p <= prev
        prev = p


def test_report_fields_and_csv(seg, tmp_path):
    mesh, tess = seg
    r = compute_metrics(mesh, tess)
    assert check_metrics(r) == []
    d = r.to_dict()
    assert d["params"]["coverageThreshold"] == r.threshold
    assert "runtime" not in d
    r.runtime = 1.5
    r.save_csv(tmp_path / "m.csv")
    r.save_csv(tmp_path / "m.csv", header=False)
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert len(rows) == 2 and set(rows[0]) == set(MetricsReport.CSV_FIELDS)
    assert float(rows[0]["runtime"]) == 1.5
