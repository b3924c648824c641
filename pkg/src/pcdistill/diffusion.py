"""Teacher training and the denoising samplers.

Two inversion rules are supported. ``"rescale"`` applies the classic DDPM update
literally to point coordinates, including the 1/sqrt(alpha) rescale.
``"offset"`` is the update that is consistent with per-point offset noising
(p_t = p + sqrt(1 - abar_t) eps): it removes predicted offset without any
rescale, and supports jumps between non-adjacent timesteps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .net import DenoiserModel, NetConfig, encode_condition, forward, init_model, sgd_step
from .schedule import NoiseSchedule, diffuse_offset, pseudo_dense

log = logging.getLogger(__name__)

INVERSIONS = ("rescale", "offset")
MODES = ("chain", "renoise")


class TrainingError(RuntimeError):
    pass


def make_timesteps(T: int, steps: int) -> tuple[int, ...]:
    """Evenly spaced descending timesteps including T and 1; a single step uses T."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}]")
    if steps == 1:
        return (T,)
    ts = tuple(int(round(v)) for v in np.linspace(T, 1, steps))
    if len(set(ts)) != steps:
        raise ValueError(f"cannot space {steps} distinct steps over T={T}")
    return ts


@dataclass(frozen=True)
class SamplerConfig:
    steps: int
    timesteps: tuple[int, ...]
    stochastic: bool = False
    mode: str = "chain"
    inversion: str = "rescale"

    def __post_init__(self):
        if len(self.timesteps) != self.steps or self.steps < 1:
            raise ValueError("timestep subsequence length must equal steps")
        if list(self.timesteps) != sorted(set(self.timesteps), reverse=True):
            raise ValueError("timesteps must be strictly descending")
        if self.steps > 1 and self.timesteps[-1] != 1:
            raise ValueError("a multi-step subsequence must end at t=1")
        if self.mode not in MODES or self.inversion not in INVERSIONS:
            raise ValueError(f"bad sampler mode/inversion {self.mode!r}/{self.inversion!r}")

    @classmethod
    def even(cls, T: int, steps: int, **kw) -> SamplerConfig:
        return cls(steps, make_timesteps(T, steps), **kw)


def denoise_update(x, eps_hat, t: int, sched: NoiseSchedule, *, t_prev: int | None = None,
                   inversion: str = "rescale", z=None):
    """One reverse update from ``t`` to ``t_prev`` (default t-1) given predicted noise.

    Works on numpy arrays or on ``Tensor`` (for the differentiable student path).
    ``z`` adds the stochastic term; it is ignored when the target is t=0 under
    the offset rule (zero posterior variance).
    """
    s = t - 1 if t_prev is None else t_prev
    if inversion == "rescale":
        a, ab = sched.a(t), sched.abar(t)
        out = (x - ((1.0 - a) / np.sqrt(1.0 - ab)) * eps_hat) * (1.0 / np.sqrt(a))
        if z is not None:
            out = out + sched.sig(t) * z
        return out
    if inversion == "offset":
        vt, vs = 1.0 - sched.abar(t), 1.0 - sched.abar(s)
        out = x - ((vt - vs) / np.sqrt(vt)) * eps_hat
        if z is not None and s > 0:
            out = out + np.sqrt(vs * (vt - vs) / vt) * z
        return out
    raise ValueError(f"unknown inversion {inversion!r}")


def predict_noise(model: DenoiserModel, x: np.ndarray, scan: np.ndarray, t: int) -> np.ndarray:
    return forward(model, x, encode_condition(scan, x, model.config.n_cond), t).value


def reverse_step(model, x_t, scan, t: int, sched: NoiseSchedule, stochastic: bool = False,
                 z=None, *, t_prev: int | None = None, inversion: str = "rescale") -> np.ndarray:
    eps_hat = predict_noise(model, np.asarray(x_t), scan, t)
    return denoise_update(np.asarray(x_t), eps_hat, t, sched, t_prev=t_prev,
                          inversion=inversion, z=z if stochastic else None)


def initial_noisy(scan, sched: NoiseSchedule, k_dup: int, rng: np.random.Generator) -> np.ndarray:
    dense = pseudo_dense(scan, k_dup)
    return diffuse_offset(dense, sched.T, rng.standard_normal(dense.shape), sched).points


def sample_multistep(model: DenoiserModel, scan, sched: NoiseSchedule, cfg: SamplerConfig,
                     seed: int = 0, k_dup: int = 10) -> np.ndarray:
    """Complete ``scan`` from its noised pseudo-dense copy.

    ``chain`` mode walks reverse updates through the subsequence; ``renoise``
    mode predicts a clean scene at every stop and re-noises it to the next stop.
    Both reduce to the same single update when ``steps == 1``.
    """
    scan = np.asarray(scan, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = initial_noisy(scan, sched, k_dup, rng)
    ts = cfg.timesteps
    for i, t in enumerate(ts):
        nxt = ts[i + 1] if i + 1 < len(ts) else 0
        eps_hat = predict_noise(model, x, scan, t)
        if cfg.mode == "chain":
            z = rng.standard_normal(x.shape) if cfg.stochastic and nxt > 0 else None
            x = denoise_update(x, eps_hat, t, sched, t_prev=nxt, inversion=cfg.inversion, z=z)
        else:
            x0 = denoise_update(x, eps_hat, t, sched, t_prev=0, inversion=cfg.inversion)
            x = x0 if nxt == 0 else diffuse_offset(x0, nxt, rng.standard_normal(x.shape), sched).points
    return x


def sample_onestep(model: DenoiserModel, scan, sched: NoiseSchedule, seed: int = 0,
                   k_dup: int = 10, inversion: str = "rescale") -> np.ndarray:
    cfg = SamplerConfig(1, (sched.T,), inversion=inversion)
    return sample_multistep(model, scan, sched, cfg, seed=seed, k_dup=k_dup)


def onestep_graph(model: DenoiserModel, x_t: np.ndarray, scan: np.ndarray, sched: NoiseSchedule,
                  inversion: str = "rescale", t: int | None = None) -> Tensor:
    """Differentiable single-step generation from a fixed noisy start (default t = T)."""
    t = sched.T if t is None else t
    cond = encode_condition(scan, x_t, model.config.n_cond)
    eps_hat = forward(model, x_t, cond, t)
    return denoise_update(Tensor(x_t), eps_hat, t, sched, t_prev=0, inversion=inversion)


def denoising_loss(model: DenoiserModel, clean: np.ndarray, scan: np.ndarray, t: int,
                   eps: np.ndarray, sched: NoiseSchedule) -> Tensor:
    """Mean over points of ||eps - eps_hat(x_t, scan, t)||^2 with offset noising."""
    x_t = diffuse_offset(clean, t, eps, sched).points
    pred = forward(model, x_t, encode_condition(scan, x_t, model.config.n_cond), t)
    return (Tensor(eps) - pred).square().sum() * (1.0 / len(clean))


class Adam:
    """Adam over a model's parameters; used for teacher pre-training only."""

    def __init__(self, model: DenoiserModel, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.model, self.lr, self.betas, self.eps = model, lr, betas, eps
        self.m = {k: np.zeros_like(p.value) for k, p in model.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in model.params.items()}
        self.k = 0

    def step(self):
        self.k += 1
        b1, b2 = self.betas
        for name, p in self.model.params.items():
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mh = self.m[name] / (1 - b1**self.k)
            vh = self.v[name] / (1 - b2**self.k)
            p.value = p.value - self.lr * mh / (np.sqrt(vh) + self.eps)
            p.grad = None


def train_teacher(dataset, epochs: int, sched: NoiseSchedule, net_cfg: NetConfig | None = None,
                  seed: int = 0, lr: float = 1e-3, optimizer: str = "adam",
                  history: list | None = None) -> DenoiserModel:
    """Fit the denoising loss on (scan, ground truth) pairs, one SGD/Adam step per scene per epoch."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    net_cfg = net_cfg or NetConfig(T=sched.T)
    model = init_model(net_cfg, seed=seed, role="teacher")
    rng = np.random.default_rng(seed + 1)
    opt = Adam(model, lr) if optimizer == "adam" else None
    for epoch in range(epochs):
        total = 0.0
        for j in rng.permutation(len(dataset)):
            scan, gt = (np.asarray(a, dtype=np.float64) for a in dataset[j])
            t = int(rng.integers(1, sched.T + 1))
            eps = rng.standard_normal(gt.shape)
            loss = denoising_loss(model, gt, scan, t, eps, sched)
            if not np.isfinite(loss.value):
                raise TrainingError(f"teacher loss became non-finite at epoch {epoch}, scene {j}, t={t}")
            loss.backward()
            if opt is not None:
                opt.step()
            else:
                sgd_step(model, lr)
            total += float(loss.value)
        if history is not None:
            history.append(total / len(dataset))
        log.debug("teacher epoch %d loss %.5f", epoch, total / len(dataset))
    return model


def held_out_loss(model: DenoiserModel, dataset, sched: NoiseSchedule, seed: int = 123, draws: int = 4) -> float:
    """Average denoising loss over fixed (t, eps) draws; a stable yardstick for training."""
    rng = np.random.default_rng(seed)
    vals = []
    for scan, gt in dataset:
        gt = np.asarray(gt, dtype=np.float64)
        for _ in range(draws):
            t = int(rng.integers(1, sched.T + 1))
            eps = rng.standard_normal(gt.shape)
            vals.append(float(denoising_loss(model, gt, np.asarray(scan), t, eps, sched).value))
    return float(np.mean(vals))
