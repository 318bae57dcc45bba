import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surfcover import shapes
from surfcover.mesh import (
    EmptyMesh,
    NonManifoldWarning,
    ParseError,
    Ray,
    TriangleMesh,
    bbox_diagonal,
    load_mesh,
    ray_intersect,
    save_obj,
    save_ply,
    save_stl,
)

from conftest import brute_nearest, scalar_hit


def test_single_triangle_obj(tmp_path):
    p = tmp_path / "tri.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    m = load_mesh(p)
    assert m.n_faces == 1
    assert m.face_areas[0] == pytest.approx(0.5)
    assert np.allclose(m.face_normals[0], [0, 0, 1])


def test_icosahedron_counts(tmp_path):
    p = tmp_path / "ico.obj"
    save_obj(shapes.icosahedron(), p)
    m = load_mesh(p)
    assert (m.n_faces, m.n_edges, m.n_vertices) == (20, 30, 12)
    assert all(len(m.neighbors(f)) == 3 for f in range(20))
    assert m.is_closed


@pytest.mark.parametrize("binary", [True, False])
def test_unit_cube_stl_area(tmp_path, binary):
    p = tmp_path / "cube.stl"
    save_stl(shapes.cube(1.0), p, binary=binary)
    m = load_mesh(p)
    assert m.n_faces == 12
    assert abs(m.total_area - 6.0) < 1e-9
    assert bbox_diagonal(m) == pytest.approx(math.sqrt(3))


def test_ply_roundtrip(tmp_path, small_sphere):
    p = tmp_path / "s.ply"
    save_ply(small_sphere, p, face_colors=np.zeros((small_sphere.n_faces, 3), np.uint8))
    m = load_mesh(p)
    assert m.n_faces == small_sphere.n_faces
    assert np.allclose(m.vertices, small_sphere.vertices)


def test_scaled_diagonal_doubles(small_sphere):
    assert small_sphere.scaled(2.0).bbox_diagonal() == pytest.approx(2 * small_sphere.bbox_diagonal())


def test_degenerate_faces_dropped():
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]]
    m = TriangleMesh(v, [[0, 1, 2], [0, 1, 3]])
    assert m.n_faces == 1
    assert m.report.dropped_faces == [1]


def test_empty_and_malformed(tmp_path):
    with pytest.raises(EmptyMesh):
        TriangleMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0\nf 1 2 3\n")
    with pytest.raises(ParseError):
        load_mesh(p)
    q = tmp_path / "none.obj"
    q.write_text("v 0 0 0\n")
    with pytest.raises(EmptyMesh):
        load_mesh(q)
    s = tmp_path / "short.stl"
    s.write_bytes(b"\0" * 80 + struct.pack("<I", 5))
    with pytest.raises(ParseError):
        load_mesh(s)


def test_non_manifold_warning():
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]]
    with pytest.warns(NonManifoldWarning):
        m = TriangleMesh(v, [[0, 1, 2], [1, 0, 3], [0, 1, 4]])
    assert not m.is_manifold and not m.is_closed


def test_adjacency_symmetric(small_sphere):
    a = small_sphere.adjacency_matrix
    assert (a != a.T).nnz == 0
    assert small_sphere.n_edges == 3 * small_sphere.n_faces // 2


def test_area_additivity_under_reordering(small_sphere):
    perm = np.random.default_rng(0).permutation(small_sphere.n_faces)
    m2 = TriangleMesh(small_sphere.vertices, small_sphere.faces[perm])
    assert m2.total_area == pytest.approx(small_sphere.total_area, rel=1e-12)


def test_ray_from_center_hits_pole(small_sphere):
    hit = ray_intersect(small_sphere, Ray([0, 0, 0], [0, 0, 1]))
    assert hit is not None
    edge = np.linalg.norm(np.diff(small_sphere.vertices[small_sphere.edges], axis=1), axis=2).max()
    assert abs(hit[1] - 1.0) <= edge
    assert small_sphere.face_centroids[hit[0], 2] > 0.9


def test_ray_away_from_plane(flat_grid):
    assert ray_intersect(flat_grid, Ray([0.5, 0.5, 0.1], [0, 0, 1])) is None


def test_thousand_rays_match_scalar_oracle():
    mesh = shapes.combine(shapes.icosphere(3, 0.5), shapes.grid(6, 6, 2.0, 2.0, origin=(-1, -1), z=-0.7))
    rng = np.random.default_rng(7)
    for _ in range(1000):
        o = rng.uniform(-1.2, 1.2, 3)
        d = rng.normal(size=3)
        if rng.random() < 0.5:
            d = rng.uniform(-0.3, 0.3, 3) - o  # aim roughly at the sphere
        ray = Ray(o, d)
        got = ray_intersect(mesh, ray)
        want = brute_nearest(mesh, ray.origin.tolist(), ray.direction.tolist())
        assert (got is None) == (want is None)
        if got is not None:
            assert abs(got[1] - want[1]) < 1e-9
            if got[0] != want[0]:
                # shared edge or vertex: both faces are hit at the same distance
                assert scalar_hit(ray.origin.tolist(), ray.direction.tolist(),
                                  *(mesh.vertices[x].tolist() for x in mesh.faces[got[0]])) is not None


@settings(max_examples=60)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.05, 1.0))
def test_downward_ray_hits_grid_at_height(x, y, h):
    g = shapes.grid(8, 8, 2.0, 2.0, origin=(-1, -1))
    hit = ray_intersect(g, Ray([x * 0.99, y * 0.99, h], [0, 0, -1]))
    assert hit is not None and hit[1] == pytest.approx(h, abs=1e-12)


def test_ignore_skips_faces(flat_grid):
    ray = Ray([0.55, 0.45, 1.0], [0, 0, -1])
    f, _ = ray_intersect(flat_grid, ray)
    assert ray_intersect(flat_grid, ray, ignore={f}) is None or ray_intersect(flat_grid, ray, ignore={f})[0] != f
