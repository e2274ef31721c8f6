import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvcvox.geometry import TriangleMesh, VoxelGrid
from mvcvox.metrics import (MetricReport, chamfer, evaluate, iou3d, iou_arrays, mesh_chamfer, mesh_to_points,
                            nearest_distances, per_vertex_chamfer, point_distance)

from conftest import sphere_grid


def brute_nearest(q, r):
    q, r = np.asarray(q, float), np.asarray(r, float)
    return point_distance(q[:, None, :], r[None, :, :]).min(axis=1)


def brute_chamfer(a, b):
    return float(brute_nearest(a, b).mean() + brute_nearest(b, a).mean())


def random_cloud(rng, n):
    kind = rng.integers(3)
    if kind == 0:
        return rng.normal(size=(n, 3))
    if kind == 1:  # lattice points: many exact distance ties
        return rng.integers(-3, 4, size=(n, 3)).astype(float)
    return rng.random((n, 3)) * np.array([1.0, 1e-3, 1.0])  # nearly planar


# -- chamfer ------------------------------------------------------------------

def test_chamfer_examples():
    assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == 2.0
    assert chamfer([[0, 0, 0], [2, 0, 0]], [[1, 0, 0]]) == 2.0


def test_chamfer_rejects_empty_sets():
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), [[0, 0, 0]])
    with pytest.raises(ValueError):
        chamfer([[0, 0, 0]], [])


def test_spatial_index_equals_brute_force_exactly():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        a = random_cloud(rng, int(rng.integers(1, 501)))
        b = random_cloud(rng, int(rng.integers(1, 501)))
        assert np.array_equal(nearest_distances(a, b), brute_nearest(a, b))
        assert chamfer(a, b) == brute_chamfer(a, b)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_chamfer_symmetric_and_zero_on_self(seed):
    rng = np.random.default_rng(seed)
    a, b = random_cloud(rng, 50), random_cloud(rng, 70)
    assert abs(chamfer(a, b) - chamfer(b, a)) <= 1e-12
    assert chamfer(a, a) == 0.0


def test_per_vertex_examples():
    m = TriangleMesh([[0, 0, 0], [5, 0, 0], [0, 5, 0]], [[0, 1, 2]])
    d = per_vertex_chamfer(m, [[0, 0, 3], [0, 4, 0]])
    assert d[0] == 3.0
    assert per_vertex_chamfer(m, m.vertices).tolist() == [0.0, 0.0, 0.0]


def test_per_vertex_matches_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(20):
        v = rng.normal(size=(30, 3))
        m = TriangleMesh(v, rng.permutation(30)[:27].reshape(9, 3))
        ref = rng.normal(size=(int(rng.integers(1, 200)), 3))
        assert np.array_equal(per_vertex_chamfer(m, ref), brute_nearest(v, ref))


# -- surface sampling ---------------------------------------------------------

def test_samples_lie_in_the_triangle():
    tri = np.array([[0.0, 0.0, 1.0], [2.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    pts = mesh_to_points(TriangleMesh(tri, [[0, 1, 2]]), 1000, seed=3)
    assert np.allclose(pts[:, 2], 1.0)
    assert (pts[:, 0] >= -1e-12).all() and (pts[:, 1] >= -1e-12).all()
    assert (pts[:, 0] / 2 + pts[:, 1] <= 1 + 1e-12).all()


def test_samples_follow_area():
    v = np.array([[0, 0, 0], [3, 0, 0], [0, 1, 0], [10, 0, 0], [11, 0, 0], [10, 1, 0]], float)
    m = TriangleMesh(v, [[0, 1, 2], [3, 4, 5]])
    pts = mesh_to_points(m, 40_000, seed=0)
    big = np.count_nonzero(pts[:, 0] < 5)
    assert big / (40_000 - big) == pytest.approx(3.0, rel=0.02)


def test_sampling_is_deterministic():
    m = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    assert np.array_equal(mesh_to_points(m, 100, 7), mesh_to_points(m, 100, 7))
    assert not np.array_equal(mesh_to_points(m, 100, 7), mesh_to_points(m, 100, 8))


def test_sampling_rejects_empty_mesh_and_bad_count():
    with pytest.raises(ValueError):
        mesh_to_points(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), int)), 10)
    with pytest.raises(ValueError):
        mesh_to_points(TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]]), 0)


# -- IoU ----------------------------------------------------------------------

def test_iou_examples():
    a = np.zeros((4, 4, 4))
    b = np.zeros((4, 4, 4))
    a[0, 0, 0] = a[0, 0, 1] = 1.0  # voxels (0,0,0), (1,0,0)
    b[0, 0, 1] = b[0, 0, 2] = 1.0  # voxels (1,0,0), (2,0,0)
    assert iou3d(VoxelGrid(a), VoxelGrid(b)) == pytest.approx(1 / 3)
    c = np.zeros((4, 4, 4))
    c[3, 3, 3] = 1.0
    assert iou3d(VoxelGrid(a), VoxelGrid(c)) == 0.0
    assert iou3d(VoxelGrid(a), VoxelGrid(a)) == 1.0


def test_iou_of_two_empty_grids_is_one():
    z = VoxelGrid(np.zeros((3, 3, 3)))
    assert iou3d(z, z) == 1.0


def test_iou_checks_compatibility():
    a = VoxelGrid(np.zeros((4, 4, 4)))
    with pytest.raises(ValueError):
        iou3d(a, VoxelGrid(np.zeros((5, 5, 5))))
    with pytest.raises(ValueError):
        iou3d(a, VoxelGrid(np.zeros((4, 4, 4)), frame="view1"))
    with pytest.raises(ValueError):
        iou3d(a, a, threshold=1.0)


def test_iou_threshold_is_strict():
    a = VoxelGrid(np.full((2, 2, 2), 0.5))
    b = VoxelGrid(np.ones((2, 2, 2)))
    assert iou3d(a, b, 0.5) == 0.0
    assert iou3d(a, b, 0.4) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.95))
def test_iou_axioms(seed, thr):
    rng = np.random.default_rng(seed)
    a = VoxelGrid(rng.random((5, 5, 5)) ** rng.uniform(0.2, 5))
    b = VoxelGrid(rng.random((5, 5, 5)) ** rng.uniform(0.2, 5))
    ab = iou3d(a, b, thr)
    assert 0.0 <= ab <= 1.0
    assert ab == iou3d(b, a, thr)
    assert iou3d(a, a, thr) == 1.0
    # adding a voxel occupied in both never lowers IoU
    va, vb = a.values.copy(), b.values.copy()
    idx = tuple(rng.integers(5, size=3))
    va[idx] = vb[idx] = 1.0
    assert iou3d(VoxelGrid(va), VoxelGrid(vb), thr) >= ab


def test_iou_mask_restricts_comparison():
    a = np.zeros((4, 4, 4))
    b = np.zeros((4, 4, 4))
    a[0] = 1.0
    b[3] = 1.0
    mask = np.zeros((4, 4, 4), bool)
    mask[1:3] = True
    assert iou_arrays(a, b, 0.5, mask) == 1.0
    assert iou_arrays(a, b) == 0.0


# -- reports ------------------------------------------------------------------

def test_metric_report_invariants():
    with pytest.raises(ValueError):
        MetricReport(-1.0, 0.5)
    with pytest.raises(ValueError):
        MetricReport(0.0, 1.5)


def test_evaluate_self_is_perfect():
    g = sphere_grid(16, 0.5)
    rep = evaluate(g, g, n=2000, per_vertex=True)
    assert rep.iou == 1.0 and rep.chamfer == 0.0
    assert rep.per_vertex_error is not None and rep.per_vertex_error.max() < g.spacing


def test_evaluate_empty_prediction():
    g = sphere_grid(16, 0.5)
    rep = evaluate(VoxelGrid(np.zeros((16,) * 3)), g, n=500)
    assert rep.iou == 0.0 and rep.chamfer == float("inf")


def test_chamfer_grows_with_offset():
    a, b = sphere_grid(24, 0.5), sphere_grid(24, 0.5, center=(0.2, 0.0, 0.0))
    from mvcvox.surface import marching_cubes

    near = mesh_chamfer(marching_cubes(a), marching_cubes(a), 3000)
    far = mesh_chamfer(marching_cubes(a), marching_cubes(b), 3000)
    assert near == 0.0 and far > 0.1
