"""Noise schedule and the noising operators used for training and sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import as_points


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep factors for t = 1..T, stored 0-based (entry t-1 belongs to t)."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def _check(self, t: int):
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")

    def a(self, t: int) -> float:
        self._check(t)
        return float(self.alpha[t - 1])

    def abar(self, t: int) -> float:
        """Cumulative product at ``t``; ``abar(0) == 1`` by convention."""
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bar[t - 1])

    def sig(self, t: int) -> float:
        self._check(t)
        return float(self.sigma[t - 1])

    def noise_scale(self, t: int) -> float:
        """sqrt(1 - abar(t)), the offset noise amplitude."""
        return float(np.sqrt(1.0 - self.abar(t)))


def build_schedule(T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    for arr in (beta, alpha, alpha_bar, sigma):
        arr.setflags(write=False)
    return NoiseSchedule(beta, alpha, alpha_bar, sigma)


@dataclass(frozen=True)
class NoisySample:
    points: np.ndarray
    t: int
    eps: np.ndarray


def _check_noise(x: np.ndarray, eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x.shape:
        raise ValueError(f"noise shape {eps.shape} does not match points {x.shape}")
    return eps


def diffuse_standard(x0, t: int, eps, sched: NoiseSchedule) -> NoisySample:
    """x_t = sqrt(abar) x_0 + sqrt(1 - abar) eps."""
    x = as_points(x0)
    eps = _check_noise(x, eps)
    ab = sched.abar(t)
    return NoisySample(np.sqrt(ab) * x + np.sqrt(1.0 - ab) * eps, t, eps)


def diffuse_offset(points, t: int, eps, sched: NoiseSchedule) -> NoisySample:
    """Per-point offset noising: p_t = p + sqrt(1 - abar) eps, no shrink towards the origin."""
    x = as_points(points)
    eps = _check_noise(x, eps)
    return NoisySample(x + sched.noise_scale(t) * eps, t, eps)


def pseudo_dense(scan, k_dup: int) -> np.ndarray:
    """Repeat the scan ``k_dup`` times; row i*N + j is scan point j."""
    if k_dup < 1:
        raise ValueError("k_dup must be >= 1")
    return np.tile(as_points(scan), (k_dup, 1))
