"""Completion metrics: Chamfer distance, BEV Jensen-Shannon divergence, EMD and voxel IoU."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import as_points, nearest_index, sq_dists

IOU_RESOLUTIONS = (0.5, 0.2, 0.1)


@dataclass(frozen=True)
class GridConfig:
    bins: int = 64
    bounds: tuple[float, float, float, float] = (-7.0, 7.0, -7.0, 7.0)  # xmin, xmax, ymin, ymax


@dataclass(frozen=True)
class MetricConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    n_emd: int = 256
    emd_seed: int = 0
    iou_resolutions: tuple[float, ...] = IOU_RESOLUTIONS


@dataclass
class MetricReport:
    """cd in squared metres, emd in metres, jsd in [0, 1], iou per voxel size in metres."""

    cd: float
    jsd: float
    emd: float
    iou: dict[float, float]
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["iou"] = {repr(float(k)): v for k, v in self.iou.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MetricReport:
        d = dict(d)
        d["iou"] = {float(k): float(v) for k, v in d["iou"].items()}
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def chamfer(p, q) -> float:
    a, b = as_points(p), as_points(q)
    _, d_ab = nearest_index(a, b)
    _, d_ba = nearest_index(b, a)
    return float(d_ab.mean() + d_ba.mean())


def bev_histogram(points, grid: GridConfig) -> np.ndarray:
    """Normalised (x, y) occupancy mass; points outside the bounds fall into edge cells."""
    pts = as_points(points)
    if len(pts) == 0:
        raise ValueError("empty scene")
    xmin, xmax, ymin, ymax = grid.bounds
    ix = np.clip(np.floor((pts[:, 0] - xmin) / (xmax - xmin) * grid.bins), 0, grid.bins - 1).astype(int)
    iy = np.clip(np.floor((pts[:, 1] - ymin) / (ymax - ymin) * grid.bins), 0, grid.bins - 1).astype(int)
    h = np.zeros((grid.bins, grid.bins))
    np.add.at(h, (ix, iy), 1.0)
    return h / h.sum()


def kl_bits(p: np.ndarray, q: np.ndarray) -> float:
    """KL divergence in bits with 0 log 0 = 0."""
    nz = p > 0
    return float(np.sum(p[nz] * np.log2(p[nz] / q[nz])))


def jsd_from_hist(p: np.ndarray, q: np.ndarray) -> float:
    m = 0.5 * (p + q)
    return float(np.clip(0.5 * kl_bits(p, m) + 0.5 * kl_bits(q, m), 0.0, 1.0))


def jsd(a, b, grid: GridConfig = GridConfig()) -> float:
    return jsd_from_hist(bev_histogram(a, grid), bev_histogram(b, grid))


def _resample(pts: np.ndarray, n: int, seed: int) -> np.ndarray:
    # the draw depends only on the set itself, which keeps emd(P, Q) == emd(Q, P)
    rng = np.random.default_rng([seed, zlib.crc32(np.ascontiguousarray(pts).tobytes())])
    if len(pts) > n:
        return pts[np.sort(rng.choice(len(pts), n, replace=False))]
    if len(pts) < n:
        extra = rng.integers(0, len(pts), n - len(pts))
        return np.concatenate([pts, pts[extra]])
    return pts


def emd(p, q, n_emd: int = 256, seed: int = 0) -> float:
    """Mean Euclidean cost of the optimal one-to-one matching between equal-size resamples."""
    a, b = as_points(p), as_points(q)
    n = min(n_emd, max(len(a), len(b)))
    a, b = _resample(a, n, seed), _resample(b, n, seed)
    cost = np.sqrt(sq_dists(a, b))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def voxel_set(points, r: float) -> set[tuple[int, int, int]]:
    if r <= 0:
        raise ValueError("voxel resolution must be positive")
    vox = np.floor(as_points(points) / r).astype(np.int64)
    return set(map(tuple, np.unique(vox, axis=0).tolist()))


def voxel_iou(a, b, r: float) -> float:
    va, vb = voxel_set(a, r), voxel_set(b, r)
    union = va | vb
    return len(va & vb) / len(union) if union else 1.0


def evaluate(completion, gt, cfg: MetricConfig = MetricConfig(), wall_time: float = 0.0) -> MetricReport:
    c, g = as_points(completion), as_points(gt)
    return MetricReport(
        cd=chamfer(c, g),
        jsd=jsd(c, g, cfg.grid),
        emd=emd(c, g, cfg.n_emd, cfg.emd_seed),
        iou={float(r): voxel_iou(c, g, r) for r in cfg.iou_resolutions},
        wall_time=float(wall_time),
    )
