"""Point-set primitives: neighbours, curvature keypoints, distance matrices."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

EIG_CLAMP = 1e-12


class Role(str, enum.Enum):
    SCAN = "scan"
    GROUND_TRUTH = "ground_truth"
    COMPLETION = "completion"
    NOISY = "noisy"


@dataclass(frozen=True)
class Scene:
    """An ordered (N, 3) point array tagged with its role.

    Index identity matters: keypoint correspondences refer to row positions.
    """

    points: np.ndarray
    role: Role = Role.GROUND_TRUTH

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
        if len(pts) < 1:
            raise ValueError("a scene needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("scene contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


def as_points(x) -> np.ndarray:
    if isinstance(x, Scene):
        return x.points
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class Neighborhood:
    center: int
    members: np.ndarray
    centroid: np.ndarray
    covariance: np.ndarray
    eigenvalues: np.ndarray

    @property
    def degenerate(self) -> bool:
        return float(self.eigenvalues.sum()) == 0.0


@dataclass(frozen=True)
class KeypointSet:
    indices: np.ndarray
    curvatures: np.ndarray
    role: Role = Role.GROUND_TRUTH
    degenerate: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.indices)


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact squared distances between rows of ``a`` and ``b`` via explicit differences."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def nearest_index(queries: np.ndarray, points: np.ndarray, chunk: int = 512):
    """Index of and squared distance to the nearest row of ``points`` for each query.

    Ties resolve to the smaller index (``argmin`` returns the first minimum).
    """
    idx = np.empty(len(queries), dtype=np.int64)
    d2 = np.empty(len(queries))
    for s in range(0, len(queries), chunk):
        block = sq_dists(queries[s : s + chunk], points)
        j = np.argmin(block, axis=1)
        idx[s : s + chunk] = j
        d2[s : s + chunk] = block[np.arange(len(j)), j]
    return idx, d2


def knn_many(points, queries: np.ndarray, k_nn: int) -> np.ndarray:
    """K nearest neighbours (self excluded) for each query index, shape (len(queries), k_nn)."""
    pts = as_points(points)
    n = len(pts)
    if not 1 <= k_nn <= n - 1:
        raise ValueError(f"k_nn must lie in [1, {n - 1}], got {k_nn}")
    queries = np.asarray(queries, dtype=np.int64)
    d2 = sq_dists(pts[queries], pts)
    d2[np.arange(len(queries)), queries] = np.inf
    # stable sort keeps ascending index order among equal distances
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k_nn]


def knn(points, query: int, k_nn: int) -> np.ndarray:
    return knn_many(points, np.array([query]), k_nn)[0]


def _covariances(pts: np.ndarray, members: np.ndarray):
    nb = pts[members]  # (m, K, 3)
    centroid = nb.mean(axis=1)
    dev = nb - centroid[:, None, :]
    cov = np.einsum("mki,mkj->mij", dev, dev) / members.shape[1]
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    eig = np.linalg.eigvalsh(cov)
    eig[eig < EIG_CLAMP] = 0.0
    return centroid, cov, eig


def neighborhood_stats(points, center: int, k_nn: int) -> Neighborhood:
    pts = as_points(points)
    members = knn(pts, center, k_nn)
    centroid, cov, eig = _covariances(pts, members[None, :])
    return Neighborhood(int(center), members, centroid[0], cov[0], eig[0])


def curvature_from_eigenvalues(eig: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue over the eigenvalue sum; 0 where the sum vanishes."""
    eig = np.asarray(eig, dtype=np.float64)
    total = eig.sum(axis=-1)
    out = np.zeros_like(total)
    np.divide(eig[..., 0], total, out=out, where=total > 0)
    return np.clip(out, 0.0, 1.0 / 3.0)


def curvature(nb: Neighborhood) -> float:
    return float(curvature_from_eigenvalues(nb.eigenvalues))


def curvatures(points, indices, k_nn: int):
    """Curvature and degeneracy flag for each of ``indices``."""
    pts = as_points(points)
    members = knn_many(pts, indices, k_nn)
    _, _, eig = _covariances(pts, members)
    return curvature_from_eigenvalues(eig), eig.sum(axis=1) == 0.0


def keypoint_count(n_points: int, fraction: float) -> int:
    return max(3, int(np.floor(fraction * n_points)))


def select_keypoints(
    points,
    fraction: float,
    k_nn: int,
    prefilter: float = 1.0,
    rng: np.random.Generator | int | None = 0,
) -> KeypointSet:
    """Top-curvature keypoints among a uniform random prefilter subset.

    ``fraction`` is relative to the full scene, so with ``prefilter=0.1`` and
    ``fraction=1/30`` the top third of the candidates is kept.
    """
    pts = as_points(points)
    n_pts = len(pts)
    if not (0 < fraction <= 1 and 0 < prefilter <= 1):
        raise ValueError("fraction and prefilter must lie in (0, 1]")
    n = keypoint_count(n_pts, fraction)
    if n_pts < 3 or n > n_pts:
        raise ValueError(f"scene with {n_pts} points cannot provide {n} keypoints")
    if prefilter >= 1.0:
        cand = np.arange(n_pts)
    else:
        m = min(n_pts, max(n, int(np.floor(prefilter * n_pts))))
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        cand = np.sort(gen.choice(n_pts, size=m, replace=False))
    kappa, degen = curvatures(pts, cand, k_nn)
    # lexsort: last key is primary
    order = np.lexsort((cand, -kappa, degen))[:n]
    return KeypointSet(cand[order], kappa[order], Role.GROUND_TRUTH, degen[order])


def correspond_keypoints(gt_points, keys: KeypointSet, completion) -> KeypointSet:
    """Map each ground-truth keypoint to its nearest completion point (indices may repeat)."""
    g = as_points(gt_points)
    c = as_points(completion)
    idx, _ = nearest_index(g[keys.indices], c)
    return KeypointSet(idx, keys.curvatures, Role.COMPLETION, keys.degenerate)


def distance_matrix(points, keys: KeypointSet | np.ndarray | None = None) -> np.ndarray:
    pts = as_points(points)
    if keys is not None:
        idx = keys.indices if isinstance(keys, KeypointSet) else np.asarray(keys)
        pts = pts[idx]
    return np.sqrt(sq_dists(pts, pts))


def farthest_point_indices(points, n: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling; a keypoint baseline for ablations only."""
    pts = as_points(points)
    chosen = [start]
    d2 = np.sum((pts - pts[start]) ** 2, axis=1)
    for _ in range(n - 1):
        j = int(np.argmax(d2))
        chosen.append(j)
        d2 = np.minimum(d2, np.sum((pts - pts[j]) ** 2, axis=1))
    return np.array(chosen, dtype=np.int64)


def select_keypoints_baseline(points, fraction: float, method: str, rng=0) -> KeypointSet:
    pts = as_points(points)
    n = keypoint_count(len(pts), fraction)
    if method == "random":
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        idx = np.sort(gen.choice(len(pts), size=n, replace=False))
    elif method == "farthest":
        idx = farthest_point_indices(pts, n)
    else:
        raise ValueError(f"unknown baseline selection method {method!r}")
    return KeypointSet(idx, np.zeros(n), Role.GROUND_TRUTH, np.zeros(n, dtype=bool))
