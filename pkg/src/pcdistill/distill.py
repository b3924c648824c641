"""Score distillation of a multi-step teacher into a few-step student.

Per iteration the student generates a completion in one step, the frozen
teacher and the auxiliary model score a re-noised copy of it, and the student
descends the difference of the two noise predictions plus the structural loss.
The auxiliary model is then refit on the student's completion.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, pairwise_distances
from .diffusion import (
    TrainingError,
    denoise_update,
    denoising_loss,
    initial_noisy,
    make_timesteps,
    onestep_graph,
    predict_noise,
)
from .geometry import (
    KeypointSet,
    as_points,
    correspond_keypoints,
    distance_matrix,
    nearest_index,
    select_keypoints,
    select_keypoints_baseline,
)
from .net import DenoiserModel, sgd_step
from .schedule import NoiseSchedule, diffuse_offset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DistillConfig:
    lambda_scene: float = 0.5
    lambda_point: float = 0.01
    keypoint_fraction: float = 1 / 30
    prefilter: float = 0.1
    k_nn: int = 180
    k_dup: int = 10
    t_range: tuple[int, int] | None = None
    ratio: tuple[int, int] = (1, 1)
    lr_student: float = 3e-5
    lr_aux: float = 3e-5
    iterations: int = 50
    seed: int = 0
    inversion: str = "rescale"
    keypoint_method: str = "curvature"
    kl_weight: float = 1.0
    generation: str = "onestep"
    reduction: str = "sum"
    student_steps: int = 8

    def __post_init__(self):
        if self.lambda_scene < 0 or self.lambda_point < 0:
            raise ValueError("loss weights must be non-negative")
        if min(self.ratio) < 1:
            raise ValueError("alternation ratio components must be >= 1")

    def timestep_range(self, T: int) -> tuple[int, int]:
        if self.t_range is not None:
            lo, hi = self.t_range
        else:
            lo, hi = max(1, math.ceil(0.02 * T)), max(1, math.floor(0.98 * T))
        if not 1 <= lo <= hi <= T:
            raise ValueError(f"timestep range {(lo, hi)} invalid for T={T}")
        return lo, hi


@dataclass
class DistillState:
    theta: DenoiserModel
    phi: DenoiserModel
    eta: DenoiserModel
    iteration: int = 0
    history: list[dict] = field(default_factory=list)
    theta_checksum: str = ""


def kl_surrogate_loss(theta: DenoiserModel, phi: DenoiserModel, g0: Tensor, scan, t: int,
                      eps: np.ndarray, sched: NoiseSchedule):
    """Surrogate whose gradient w.r.t. the student is (eps_theta - eps_phi) dG_t/d(eta).

    The score difference is held constant; the noised completion stays live, and
    offset noising makes dG_t/dG_0 the identity. Returns (surrogate, mean ||d||^2).
    """
    g_t = g0 + np.sqrt(1.0 - sched.abar(t)) * np.asarray(eps)
    x = g_t.value
    scan = as_points(scan)
    d = predict_noise(theta, x, scan, t) - predict_noise(phi, x, scan, t)
    if not np.all(np.isfinite(d)):
        raise TrainingError(f"non-finite score difference at t={t}")
    return (Tensor(d) * g_t).sum(), float(np.sum(d * d) / len(x))


def scene_loss(g0, gt) -> Tensor:
    """Mean squared distance from each completion point to its nearest ground-truth point."""
    g0 = g0 if isinstance(g0, Tensor) else Tensor(as_points(g0))
    gt = as_points(gt)
    idx, _ = nearest_index(g0.value, gt)
    return (g0 - gt[idx]).square().sum() * (1.0 / len(g0))


def point_loss(gt_key_points, completion_key_points) -> Tensor:
    """Squared Frobenius norm between the keypoint distance matrices of G and the completion."""
    dg = distance_matrix(as_points(gt_key_points))
    ck = completion_key_points if isinstance(completion_key_points, Tensor) else Tensor(as_points(completion_key_points))
    if ck.shape != (len(dg), 3):
        raise ValueError(f"keypoint count mismatch: {len(dg)} vs {ck.shape[0]}")
    return (pairwise_distances(ck) - dg).square().sum()


def ground_truth_keypoints(gt, cfg: DistillConfig, seed: int = 0) -> KeypointSet:
    gt = as_points(gt)
    if cfg.keypoint_method == "curvature":
        return select_keypoints(gt, cfg.keypoint_fraction, min(cfg.k_nn, len(gt) - 1), cfg.prefilter, seed)
    return select_keypoints_baseline(gt, cfg.keypoint_fraction, cfg.keypoint_method, seed)


def structural_loss(g0, gt, cfg: DistillConfig, keys: KeypointSet | None = None):
    """lambda_scene * scene loss + lambda_point * point loss; returns (total, scene, point)."""
    g0 = g0 if isinstance(g0, Tensor) else Tensor(as_points(g0))
    gt = as_points(gt)
    ls = scene_loss(g0, gt)
    if keys is None:
        keys = ground_truth_keypoints(gt, cfg, cfg.seed)
    corr = correspond_keypoints(gt, keys, g0.value)
    lp = point_loss(gt[keys.indices], g0[corr.indices])
    w_point = cfg.lambda_point / (len(keys) ** 2 if cfg.reduction == "mean" else 1.0)
    return ls * cfg.lambda_scene + lp * w_point, float(ls.value), float(lp.value)


def kl_scale(cfg: DistillConfig, g0: Tensor) -> float:
    """1 for the summed surrogate; 1/(coordinate count) when losses are mean-reduced."""
    return 1.0 / g0.value.size if cfg.reduction == "mean" else 1.0


def auxiliary_step(phi: DenoiserModel, g0, scan, sched: NoiseSchedule, lr: float, rng) -> float:
    """One denoising-loss SGD step on the auxiliary model, with the completion as data."""
    g0 = np.asarray(g0.value if isinstance(g0, Tensor) else g0, dtype=np.float64)
    t = int(rng.integers(1, sched.T + 1))
    eps = rng.standard_normal(g0.shape)
    loss = denoising_loss(phi, g0, as_points(scan), t, eps, sched)
    if not np.isfinite(loss.value):
        raise TrainingError(f"auxiliary loss became non-finite at t={t}")
    loss.backward()
    sgd_step(phi, lr)
    return float(loss.value)


def init_state(theta: DenoiserModel) -> DistillState:
    return DistillState(
        theta=theta,
        phi=theta.clone("auxiliary"),
        eta=theta.clone("student"),
        theta_checksum=theta.checksum(),
    )


def student_start(eta: DenoiserModel, scan, sched: NoiseSchedule, cfg: DistillConfig, rng):
    """Noisy input and timestep for the student's differentiable generation step.

    ``onestep`` starts from the noised pseudo-dense scan at T. ``backward``
    picks a stop of the student's few-step schedule and reaches it by running
    the student's own predict-and-renoise chain without recording a graph, so
    training inputs match what the student sees at inference.
    """
    x = initial_noisy(scan, sched, cfg.k_dup, rng)
    if cfg.generation == "onestep":
        return x, sched.T
    if cfg.generation != "backward":
        raise ValueError(f"unknown generation scheme {cfg.generation!r}")
    ts = make_timesteps(sched.T, cfg.student_steps)
    k = int(rng.integers(len(ts)))
    for i in range(k):
        eps_hat = predict_noise(eta, x, scan, ts[i])
        x0 = denoise_update(x, eps_hat, ts[i], sched, t_prev=0, inversion=cfg.inversion)
        x = diffuse_offset(x0, ts[i + 1], rng.standard_normal(x.shape), sched).points
    return x, ts[k]


def distill_iteration(state: DistillState, scan, gt, keys, sched: NoiseSchedule, cfg: DistillConfig, rng) -> dict:
    """Student update(s) on the total loss, then auxiliary update(s) on the fresh completion."""
    lo, hi = cfg.timestep_range(sched.T)
    rec = {}
    for _ in range(cfg.ratio[0]):
        x_t, t_gen = student_start(state.eta, scan, sched, cfg, rng)
        g0 = onestep_graph(state.eta, x_t, scan, sched, cfg.inversion, t=t_gen)
        t = int(rng.integers(lo, hi + 1))
        eps = rng.standard_normal(g0.shape)
        kl, kl_val = kl_surrogate_loss(state.theta, state.phi, g0, scan, t, eps, sched)
        st, ls, lp = structural_loss(g0, gt, cfg, keys)
        total = kl * (cfg.kl_weight * kl_scale(cfg, g0)) + st
        if not np.isfinite(total.value):
            raise TrainingError(f"student loss became non-finite at iteration {state.iteration}")
        total.backward()
        sgd_step(state.eta, cfg.lr_student)
        rec = {"L_KL": kl_val, "L_scene": ls, "L_point": lp, "t": t}
    lphi = [auxiliary_step(state.phi, g0.value, scan, sched, cfg.lr_aux, rng) for _ in range(cfg.ratio[1])]
    rec["L_phi"] = float(np.mean(lphi))
    return rec


def distill(theta: DenoiserModel, dataset, sched: NoiseSchedule, cfg: DistillConfig = DistillConfig(),
            log_path=None, state: DistillState | None = None) -> DistillState:
    """Run the alternating optimisation; ``state.eta`` is the distilled student."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    state = state or init_state(theta)
    rng = np.random.default_rng(cfg.seed)
    keys = [ground_truth_keypoints(gt, cfg, cfg.seed + j) for j, (_, gt) in enumerate(dataset)]
    fh = open(log_path, "w") if log_path is not None else None
    try:
        for _ in range(cfg.iterations):
            j = int(rng.integers(len(dataset)))
            scan, gt = (as_points(a) for a in dataset[j])
            last_good = state.eta.clone("student")
            try:
                rec = distill_iteration(state, scan, gt, keys[j], sched, cfg, rng)
                bad = not all(np.all(np.isfinite(p.value)) for p in state.eta.parameters())
            except TrainingError as exc:
                state.eta = last_good
                raise TrainingError(f"{exc}; student rolled back to iteration {state.iteration}") from exc
            if bad:
                state.eta = last_good
                raise TrainingError(f"student parameters diverged at iteration {state.iteration}")
            if state.theta.checksum() != state.theta_checksum:
                raise RuntimeError("teacher parameters changed during distillation")
            state.iteration += 1
            rec = {"iteration": state.iteration, **rec}
            state.history.append(rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if state.iteration % 50 == 0:
                log.info("distill it %d %s", state.iteration, rec)
    finally:
        if fh:
            fh.close()
    return state


def read_history(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
