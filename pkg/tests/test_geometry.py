import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from oracles.cubic import newton_polish, symmetric_eigenvalues
from pcdistill.geometry import (
    Role,
    Scene,
    correspond_keypoints,
    curvature,
    curvature_from_eigenvalues,
    curvatures,
    distance_matrix,
    keypoint_count,
    knn,
    neighborhood_stats,
    select_keypoints,
    select_keypoints_baseline,
)

seeds = st.integers(0, 2**31 - 1)


def rigid(points, seed):
    rng = np.random.default_rng(seed)
    rot = Rotation.random(random_state=seed).as_matrix()
    return points @ rot.T + rng.normal(0, 5, 3)


def brute_knn(pts, q, k):
    d = [(float(np.sum((pts[i] - pts[q]) ** 2)), i) for i in range(len(pts)) if i != q]
    return [i for _, i in sorted(d)[:k]]


# Scene -----------------------------------------------------------------------

def test_scene_rejects_bad_input():
    with pytest.raises(ValueError):
        Scene(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        Scene(np.array([[0.0, np.nan, 1.0]]))
    with pytest.raises(ValueError):
        Scene(np.zeros((4, 2)))


def test_scene_points_are_read_only():
    s = Scene(np.ones((2, 3)), Role.SCAN)
    with pytest.raises(ValueError):
        s.points[0, 0] = 5.0


# knn -------------------------------------------------------------------------

def test_knn_collinear():
    pts = np.array([[x, 0.0, 0.0] for x in range(4)])
    assert set(knn(pts, 0, 2)) == {1, 2}


def test_knn_duplicate_is_nearest():
    pts = np.array([[0.0, 0, 0], [5, 5, 5], [0, 0, 0], [1, 1, 1]])
    assert list(knn(pts, 0, 1)) == [2]


def test_knn_ties_prefer_smaller_index():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0]])
    assert list(knn(pts, 0, 3)) == [1, 2, 3]


@pytest.mark.parametrize("k", [0, 50])
def test_knn_range_checked(k):
    with pytest.raises(ValueError):
        knn(np.random.default_rng(0).random((50, 3)), 0, k)


@given(seeds, st.integers(2, 120), st.integers(1, 10))
def test_knn_matches_full_sort(seed, n, k):
    rng = np.random.default_rng(seed)
    pts = rng.random((n, 3))
    k = min(k, n - 1)
    q = int(rng.integers(n))
    assert list(knn(pts, q, k)) == brute_knn(pts, q, k)


def test_knn_matches_full_sort_with_grid_ties():
    pts = np.stack(np.meshgrid(range(5), range(5), range(2), indexing="ij"), -1).reshape(-1, 3).astype(float)
    for q in range(len(pts)):
        assert list(knn(pts, q, 7)) == brute_knn(pts, q, 7)


# neighbourhoods and curvature ----------------------------------------------

def test_isotropic_neighbourhood():
    pts = np.vstack([np.zeros(3), np.eye(3), -np.eye(3)])
    nb = neighborhood_stats(pts, 0, 6)
    np.testing.assert_allclose(nb.centroid, 0, atol=1e-15)
    np.testing.assert_allclose(nb.covariance, np.eye(3) / 3, atol=1e-15)
    np.testing.assert_allclose(nb.eigenvalues, [1 / 3] * 3, atol=1e-14)
    assert curvature(nb) == pytest.approx(1 / 3)


def test_coplanar_neighbourhood_is_flat():
    rng = np.random.default_rng(3)
    pts = np.column_stack([rng.random((30, 2)), np.zeros(30)])
    nb = neighborhood_stats(pts, 0, 12)
    assert nb.eigenvalues[0] == 0.0
    assert curvature(nb) == 0.0


def test_curvature_arithmetic():
    assert curvature_from_eigenvalues(np.array([1.0, 2.0, 5.0])) == pytest.approx(0.125)
    assert curvature_from_eigenvalues(np.array([0.0, 0.3, 2.0])) == 0.0
    assert curvature_from_eigenvalues(np.zeros(3)) == 0.0


def test_degenerate_neighbourhood_flagged():
    pts = np.zeros((6, 3))
    k, degen = curvatures(pts, np.arange(6), 3)
    assert np.all(k == 0) and np.all(degen)


@given(seeds)
def test_eigenvalues_match_cubic_oracle(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(40, 3)) * rng.uniform(0.1, 3.0, 3)
    nb = neighborhood_stats(pts, int(rng.integers(40)), 12)
    c = nb.covariance.tolist()
    oracle = newton_polish(c, symmetric_eigenvalues(c))
    np.testing.assert_allclose(nb.eigenvalues, oracle, rtol=0, atol=1e-8)


@given(seeds)
def test_covariance_symmetric_psd(seed):
    rng = np.random.default_rng(seed)
    nb = neighborhood_stats(rng.normal(size=(30, 3)), 0, 10)
    assert np.array_equal(nb.covariance, nb.covariance.T)
    assert np.all(np.linalg.eigvalsh(nb.covariance) >= -1e-9)
    assert np.all(np.diff(nb.eigenvalues) >= 0) and np.all(nb.eigenvalues >= 0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_curvature_in_range(eig):
    k = float(curvature_from_eigenvalues(np.sort(np.abs(eig))))
    assert 0.0 <= k <= 1 / 3


# keypoints -------------------------------------------------------------------

def cube_corner_scene(seed=0):
    rng = np.random.default_rng(seed)
    xs = np.linspace(-3, 3, 20)
    plane = np.array([[x, y, 0.0] for x in xs for y in xs])
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (1.5, 3.5)])
    clusters = np.concatenate([c + rng.normal(0, 0.05, (12, 3)) for c in corners])
    return np.concatenate([plane, clusters]), len(plane)


def oracle_top_curvature(pts, k_nn, n):
    kappa = []
    for i in range(len(pts)):
        nbr = pts[brute_knn(pts, i, k_nn)]
        dev = nbr - nbr.mean(0)
        c = (dev.T @ dev / k_nn).tolist()
        lam = [max(v, 0.0) for v in symmetric_eigenvalues(c)]
        kappa.append(lam[0] / sum(lam) if sum(lam) > 1e-12 else 0.0)
    return sorted(range(len(pts)), key=lambda i: (-kappa[i], i))[:n]


def test_cube_corner_keypoints():
    pts, n_plane = cube_corner_scene()
    frac = 8.5 / len(pts)
    assert keypoint_count(len(pts), frac) == 8
    keys = select_keypoints(pts, frac, k_nn=11, prefilter=1.0)
    assert np.all(keys.indices >= n_plane)
    assert set(keys.indices.tolist()) == set(oracle_top_curvature(pts, 11, 8))


def test_select_all_points():
    pts = np.random.default_rng(1).random((12, 3))
    keys = select_keypoints(pts, 1.0, 4, prefilter=1.0)
    assert sorted(keys.indices.tolist()) == list(range(12))


def test_keypoint_invariants():
    pts = np.random.default_rng(2).random((200, 3))
    keys = select_keypoints(pts, 1 / 30, 20, prefilter=0.5, rng=4)
    assert len(keys) == keypoint_count(200, 1 / 30) == 6
    assert len(set(keys.indices.tolist())) == len(keys)
    assert np.all(np.diff(keys.curvatures) <= 0)
    assert np.all((keys.curvatures >= 0) & (keys.curvatures <= 1 / 3))


def test_keypoint_count_floor_is_three():
    assert keypoint_count(10, 1 / 30) == 3
    with pytest.raises(ValueError):
        select_keypoints(np.zeros((2, 3)), 1 / 30, 1)


def test_degenerate_points_selected_last():
    rng = np.random.default_rng(5)
    pts = np.concatenate([np.zeros((5, 3)), rng.random((10, 3)) + 3])
    keys = select_keypoints(pts, 0.99, 4, prefilter=1.0)
    assert not keys.degenerate[: len(keys) - 5].any()


@given(seeds)
def test_keypoints_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    pts = rng.random((150, 3)) * [4, 4, 1]
    moved = rigid(pts, seed)
    a = select_keypoints(pts, 1 / 15, 15, prefilter=1.0)
    b = select_keypoints(moved, 1 / 15, 15, prefilter=1.0)
    ka, _ = curvatures(pts, np.arange(150), 15)
    kb, _ = curvatures(moved, np.arange(150), 15)
    np.testing.assert_allclose(ka, kb, atol=1e-8)
    assert set(a.indices.tolist()) == set(b.indices.tolist())


def test_baseline_selection():
    pts = np.random.default_rng(0).random((90, 3))
    for method in ("random", "farthest"):
        keys = select_keypoints_baseline(pts, 1 / 30, method)
        assert len(keys) == 3 and len(set(keys.indices.tolist())) == 3
    with pytest.raises(ValueError):
        select_keypoints_baseline(pts, 1 / 30, "bogus")


# correspondence and distance matrices ---------------------------------------

def test_correspondence_identity_and_translation():
    pts = np.random.default_rng(6).random((80, 3))
    keys = select_keypoints(pts, 0.1, 8, prefilter=1.0)
    assert np.array_equal(correspond_keypoints(pts, keys, pts).indices, keys.indices)
    assert np.array_equal(correspond_keypoints(pts + 0.001, keys, pts + 0.001).indices, keys.indices)


@given(seeds)
def test_correspondence_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    g, c = rng.random((60, 3)), rng.random((45, 3))
    keys = select_keypoints(g, 0.1, 6, prefilter=1.0)
    got = correspond_keypoints(g, keys, c).indices
    for gi, ci in zip(keys.indices, got):
        d = [float(np.sum((c[j] - g[gi]) ** 2)) for j in range(len(c))]
        assert ci == min(range(len(c)), key=lambda j: (d[j], j))


def test_distance_matrix_345():
    d = distance_matrix(np.array([[0.0, 0, 0], [3, 0, 0], [0, 4, 0]]))
    assert sorted([d[0, 1], d[0, 2], d[1, 2]]) == [3.0, 4.0, 5.0]


@given(seeds, st.integers(2, 25))
def test_distance_matrix_properties(seed, n):
    pts = np.random.default_rng(seed).normal(size=(n, 3))
    d = distance_matrix(pts)
    assert np.array_equal(d, d.T)
    assert np.all(np.diag(d) == 0) and np.all(d >= 0)
    tri = d[:, :, None] + d[None, :, :] - d[:, None, :]  # d_ij + d_jk - d_ik
    assert tri.min() >= -1e-9
    np.testing.assert_allclose(distance_matrix(rigid(pts, seed)), d, atol=1e-9)
