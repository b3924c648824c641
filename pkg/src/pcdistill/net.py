"""Conditional per-point denoiser shared by the teacher, auxiliary and student roles."""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import StateError, Tensor, silu
from .geometry import as_points

CHECKPOINT_VERSION = 1
N_COND = 3


@dataclass(frozen=True)
class NetConfig:
    width: int = 64
    depth: int = 4
    t_embed: int = 16
    n_cond: int = N_COND
    coord_scale: float = 4.0
    T: int = 50

    @property
    def in_dim(self) -> int:
        return 3 + 3 * self.n_cond + self.t_embed

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.width] * (self.depth - 1) + [3]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class DenoiserModel:
    config: NetConfig
    params: dict[str, Tensor]
    role: str = "teacher"

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def clone(self, role: str | None = None) -> DenoiserModel:
        params = {k: Tensor(v.value.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return DenoiserModel(self.config, params, role or self.role)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].value).tobytes())
        return h.hexdigest()

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].value.ravel() for k in sorted(self.params)])


def init_model(config: NetConfig, seed: int = 0, role: str = "teacher") -> DenoiserModel:
    """Uniform fan-in init for hidden layers; the output layer starts at zero."""
    rng = np.random.default_rng(seed)
    params = {}
    layers = config.layer_dims()
    for i, (fan_in, fan_out) in enumerate(layers):
        bound = 1.0 / np.sqrt(fan_in)
        if i == len(layers) - 1:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"w{i}"] = Tensor(w, requires_grad=True, name=f"w{i}")
        params[f"b{i}"] = Tensor(np.zeros((1, fan_out)), requires_grad=True, name=f"b{i}")
    return DenoiserModel(config, params, role)


def timestep_embedding(t: int, dim: int, T: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(100.0) * np.arange(half) / max(half - 1, 1))
    arg = (t / T) * 2.0 * np.pi * freqs * 8.0
    return np.concatenate([np.sin(arg), np.cos(arg)])[None, :]


def encode_condition(scan, noisy, n_cond: int = N_COND, chunk: int = 1024) -> np.ndarray:
    """Offsets from each noisy point to its ``n_cond`` nearest scan points, concatenated.

    Ties resolve to the smaller scan index. Scans with fewer than ``n_cond``
    points repeat their farthest neighbour.
    """
    p = as_points(scan)
    x = as_points(noisy)
    k = min(n_cond, len(p))
    out = np.empty((len(x), n_cond, 3))
    for s in range(0, len(x), chunk):
        xs = x[s : s + chunk]
        c = xs.mean(axis=0)
        xc, pc = xs - c, p - c
        d2 = (xc * xc).sum(1)[:, None] + (pc * pc).sum(1)[None, :] - 2.0 * xc @ pc.T
        order = _k_smallest(d2, k)
        nb = p[order] - xs[:, None, :]
        if k < n_cond:
            nb = np.concatenate([nb, np.repeat(nb[:, -1:, :], n_cond - k, axis=1)], axis=1)
        out[s : s + chunk] = nb
    return out.reshape(len(x), 3 * n_cond)


def _k_smallest(d2: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k smallest entries per row, ordered by (value, index)."""
    if k >= d2.shape[1]:
        return np.argsort(d2, axis=1, kind="stable")
    part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    vals = np.take_along_axis(d2, part, axis=1)
    kth = vals.max(axis=1)
    tied = np.count_nonzero(d2 <= kth[:, None], axis=1) > k
    order = np.lexsort((part, vals), axis=1)
    out = np.take_along_axis(part, order, axis=1)
    if tied.any():
        out[tied] = np.argsort(d2[tied], axis=1, kind="stable")[:, :k]
    return out


def forward(model: DenoiserModel, points, cond: np.ndarray, t: int) -> Tensor:
    """Per-point noise prediction; rows never interact, so permuting points permutes outputs."""
    cfg = model.config
    x = np.asarray(points.points if hasattr(points, "eps") else points, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got {x.shape}")
    if cond.shape != (len(x), 3 * cfg.n_cond):
        raise ValueError(f"condition shape {cond.shape} does not match {len(x)} points")
    if not 1 <= t <= cfg.T:
        raise ValueError(f"timestep {t} outside [1, {cfg.T}]")
    temb = np.repeat(timestep_embedding(t, cfg.t_embed, cfg.T), len(x), axis=0)
    h = Tensor(np.concatenate([x / cfg.coord_scale, cond / cfg.coord_scale, temb], axis=1))
    n_layers = len(cfg.layer_dims())
    for i in range(n_layers):
        h = h @ model.params[f"w{i}"] + model.params[f"b{i}"]
        if i < n_layers - 1:
            h = silu(h)
    return h


def predict(model: DenoiserModel, points, cond, t: int) -> np.ndarray:
    return forward(model, points, cond, t).value


def sgd_step(model: DenoiserModel, lr: float):
    """Plain SGD update p <- p - lr * grad; clears gradients afterwards."""
    missing = [k for k, p in model.params.items() if p.grad is None]
    if missing:
        raise StateError(f"no gradient for parameters {missing}")
    for p in model.params.values():
        p.value = p.value - lr * p.grad
        p.grad = None
    return model


def save_checkpoint(model: DenoiserModel, path):
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(model.config), "role": model.role}
    arrays = {f"param/{k}": v.value for k, v in model.params.items()}
    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    _atomic_write(path, buf.getvalue())


def load_checkpoint(path) -> DenoiserModel:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        params = {
            k.split("/", 1)[1]: Tensor(data[k].copy(), requires_grad=True, name=k.split("/", 1)[1])
            for k in data.files
            if k.startswith("param/")
        }
    return DenoiserModel(NetConfig(**meta["config"]), params, meta["role"])


def _atomic_write(path, payload: bytes):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
