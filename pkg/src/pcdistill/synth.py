"""Synthetic street-like scenes, a virtual sensor, and point-cloud file I/O.

Ground truth is sampled on the ground plane and on object surfaces at a fixed
areal density. The sparse scan keeps only what a sensor at the origin would
see: back faces and points shadowed by an object are dropped, one return is
kept per angular bin, and the survivors are thinned at random.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Role, Scene, as_points

SENSOR_HEIGHT = 1.7


class PointCloudParseError(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    kind: str  # "box" or "cylinder"
    center: tuple[float, float]
    size: tuple[float, float, float]  # box: length, width, height; cylinder: radius, radius, height
    yaw: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    extent: float = 6.0
    objects: tuple[SceneObject, ...] = ()
    density: float = 9.0
    keep_fraction: float = 0.25
    occlusion: bool = True
    azimuth_bins: int | None = 180
    elevation_bins: int | None = 24
    ground: bool = True

    def __post_init__(self):
        if self.extent <= 0 or self.density <= 0:
            raise ValueError("extent and density must be positive")
        if not 0 < self.keep_fraction <= 1:
            raise ValueError("keep_fraction must lie in (0, 1]")


def random_spec(seed: int, **overrides) -> SceneSpec:
    """A street-like layout: a couple of cars, cones, one wall and a pole."""
    rng = np.random.default_rng(seed)
    ext = overrides.get("extent", SceneSpec.extent)
    objs = []

    def place(min_r=2.0):
        while True:
            c = rng.uniform(-ext + 1.5, ext - 1.5, size=2)
            if np.hypot(*c) >= min_r:
                return (float(c[0]), float(c[1]))

    for _ in range(int(rng.integers(1, 3))):
        objs.append(SceneObject("box", place(2.5), (3.8, 1.7, 1.4), float(rng.uniform(0, np.pi))))
    for _ in range(int(rng.integers(1, 3))):
        objs.append(SceneObject("cylinder", place(), (0.25, 0.25, 0.7)))
    objs.append(SceneObject("box", place(3.0), (5.0, 0.3, 2.0), float(rng.uniform(0, np.pi))))
    objs.append(SceneObject("cylinder", place(), (0.12, 0.12, 3.0)))
    return SceneSpec(seed=seed, objects=tuple(objs), **overrides)


# surface sampling -----------------------------------------------------------

def _rot(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _count(area: float, density: float) -> int:
    return int(round(area * density))


def box_faces(obj: SceneObject):
    """(origin, u, v, outward normal) for the five exposed faces of a ground-standing box."""
    L, W, H = obj.size
    R = _rot(obj.yaw)
    c = np.array([obj.center[0], obj.center[1], 0.0])
    ex, ey, ez = R[:, 0], R[:, 1], R[:, 2]
    faces = [
        (c + ez * H - ex * L / 2 - ey * W / 2, ex * L, ey * W, ez),
        (c + ex * L / 2 - ey * W / 2, ey * W, ez * H, ex),
        (c - ex * L / 2 - ey * W / 2, ey * W, ez * H, -ex),
        (c + ey * W / 2 - ex * L / 2, ex * L, ez * H, ey),
        (c - ey * W / 2 - ex * L / 2, ex * L, ez * H, -ey),
    ]
    return faces


def box_area(obj: SceneObject) -> float:
    L, W, H = obj.size
    return L * W + 2 * (L + W) * H


def sample_box(obj: SceneObject, density: float, rng):
    pts, normals = [], []
    for o, u, v, n in box_faces(obj):
        k = _count(np.linalg.norm(u) * np.linalg.norm(v), density)
        ab = rng.uniform(size=(k, 2))
        pts.append(o + ab[:, :1] * u + ab[:, 1:] * v)
        normals.append(np.repeat(n[None], k, axis=0))
    return np.concatenate(pts), np.concatenate(normals)


def sample_cylinder(obj: SceneObject, density: float, rng):
    r, _, h = obj.size
    cx, cy = obj.center
    k_side = _count(2 * np.pi * r * h, density)
    th = rng.uniform(0, 2 * np.pi, k_side)
    z = rng.uniform(0, h, k_side)
    side = np.stack([cx + r * np.cos(th), cy + r * np.sin(th), z], axis=1)
    n_side = np.stack([np.cos(th), np.sin(th), np.zeros(k_side)], axis=1)
    k_top = _count(np.pi * r * r, density)
    rr = r * np.sqrt(rng.uniform(size=k_top))
    tt = rng.uniform(0, 2 * np.pi, k_top)
    top = np.stack([cx + rr * np.cos(tt), cy + rr * np.sin(tt), np.full(k_top, h)], axis=1)
    n_top = np.tile([0.0, 0.0, 1.0], (k_top, 1))
    return np.concatenate([side, top]), np.concatenate([n_side, n_top])


def _inside_footprint(xy: np.ndarray, obj: SceneObject) -> np.ndarray:
    d = xy - np.asarray(obj.center)
    if obj.kind == "cylinder":
        return np.hypot(d[:, 0], d[:, 1]) < obj.size[0]
    c, s = math.cos(-obj.yaw), math.sin(-obj.yaw)
    lx = c * d[:, 0] - s * d[:, 1]
    ly = s * d[:, 0] + c * d[:, 1]
    return (np.abs(lx) < obj.size[0] / 2) & (np.abs(ly) < obj.size[1] / 2)


def sample_surfaces(spec: SceneSpec, rng):
    """Ground-truth points, outward normals and the owning object index (-1 for ground)."""
    pts, nrm, owner = [], [], []
    if spec.ground:
        k = _count((2 * spec.extent) ** 2, spec.density)
        g = np.column_stack([rng.uniform(-spec.extent, spec.extent, (k, 2)), np.zeros(k)])
        keep = np.ones(k, dtype=bool)
        for obj in spec.objects:
            keep &= ~_inside_footprint(g[:, :2], obj)
        pts.append(g[keep])
        nrm.append(np.tile([0.0, 0.0, 1.0], (int(keep.sum()), 1)))
        owner.append(np.full(int(keep.sum()), -1))
    for i, obj in enumerate(spec.objects):
        p, n = (sample_box if obj.kind == "box" else sample_cylinder)(obj, spec.density, rng)
        pts.append(p)
        nrm.append(n)
        owner.append(np.full(len(p), i))
    if not pts or sum(len(p) for p in pts) == 0:
        raise ValueError("degenerate scene: no ground and no objects")
    return np.concatenate(pts), np.concatenate(nrm), np.concatenate(owner)


# virtual sensor ------------------------------------------------------------

def _shadow_mask(points: np.ndarray, owner: np.ndarray, spec: SceneSpec) -> np.ndarray:
    """True where a point is hidden behind some other object.

    Each object shadows the azimuth sector it subtends, beyond its nearest
    range, and below the elevation of its top edge as seen from the sensor.
    """
    sensor = np.array([0.0, 0.0, SENSOR_HEIGHT])
    rel = points - sensor
    rng_xy = np.hypot(rel[:, 0], rel[:, 1])
    az = np.arctan2(rel[:, 1], rel[:, 0])
    el = np.arctan2(rel[:, 2], rng_xy)
    hidden = np.zeros(len(points), dtype=bool)
    for i, obj in enumerate(spec.objects):
        if obj.kind == "box":
            L, W, _ = obj.size
            R = _rot(obj.yaw)
            c = np.array([obj.center[0], obj.center[1]])
            corners = np.array([c + R[:2, :2] @ np.array([sx * L / 2, sy * W / 2])
                                for sx in (-1, 1) for sy in (-1, 1)])
        else:
            r = obj.size[0]
            c = np.array(obj.center)
            th = np.linspace(0, 2 * np.pi, 16, endpoint=False)
            corners = c + r * np.stack([np.cos(th), np.sin(th)], axis=1)
        caz = np.arctan2(corners[:, 1], corners[:, 0])
        mid = math.atan2(obj.center[1], obj.center[0])
        dz = (caz - mid + np.pi) % (2 * np.pi) - np.pi
        lo, hi = dz.min(), dz.max()
        near = np.hypot(corners[:, 0], corners[:, 1]).min()
        far_top = np.hypot(corners[:, 0], corners[:, 1]).max()
        top_el = math.atan2(obj.size[2] - SENSOR_HEIGHT, far_top if obj.size[2] >= SENSOR_HEIGHT else near)
        daz = (az - mid + np.pi) % (2 * np.pi) - np.pi
        in_sector = (daz > lo) & (daz < hi)
        behind = (rng_xy > near) & (el < top_el) & (owner != i)
        hidden |= in_sector & behind
    return hidden


def simulate_scan(points, normals, owner, spec: SceneSpec, rng) -> np.ndarray:
    """Indices into the ground truth of the points the sensor returns."""
    pts = as_points(points)
    idx = np.arange(len(pts))
    if spec.occlusion:
        sensor = np.array([0.0, 0.0, SENSOR_HEIGHT])
        facing = np.einsum("ij,ij->i", sensor - pts, normals) > 0
        visible = facing & ~_shadow_mask(pts, owner, spec)
        idx = idx[visible]
    if spec.azimuth_bins and spec.elevation_bins and len(idx):
        rel = pts[idx] - np.array([0.0, 0.0, SENSOR_HEIGHT])
        r = np.linalg.norm(rel, axis=1)
        az = np.arctan2(rel[:, 1], rel[:, 0])
        el = np.arcsin(np.clip(rel[:, 2] / np.maximum(r, 1e-12), -1, 1))
        a_bin = np.floor((az + np.pi) / (2 * np.pi) * spec.azimuth_bins).astype(np.int64)
        e_bin = np.floor((el + np.pi / 2) / np.pi * spec.elevation_bins * 3).astype(np.int64)
        key = a_bin * (spec.elevation_bins * 3 + 1) + e_bin
        # nearest return per angular bin
        order = np.lexsort((idx, r, key))
        first = np.ones(len(order), dtype=bool)
        first[1:] = key[order][1:] != key[order][:-1]
        idx = np.sort(idx[order][first])
    if spec.keep_fraction < 1 and len(idx):
        m = max(1, int(round(spec.keep_fraction * len(idx))))
        idx = np.sort(rng.choice(idx, size=m, replace=False))
    return idx


def generate_scene(spec: SceneSpec) -> tuple[Scene, Scene]:
    """Return (ground truth G, sparse scan P); P is always a row subset of G."""
    if not spec.ground and not spec.objects:
        raise ValueError("degenerate scene: no ground and no objects")
    rng = np.random.default_rng(spec.seed)
    pts, nrm, owner = sample_surfaces(spec, rng)
    keep = simulate_scan(pts, nrm, owner, spec, rng)
    if len(keep) == 0:
        raise ValueError("sensor sees no points for this scene")
    return Scene(pts, Role.GROUND_TRUTH), Scene(pts[keep], Role.SCAN)


# file I/O -----------------------------------------------------------------

def format_points(points) -> str:
    pts = as_points(points)
    return "".join(f"{x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in pts.tolist())


def write_pointcloud(scene, path):
    """Plain-text "x y z" rows at 17 significant digits, enough for an exact float64 round trip."""
    _atomic_write_text(path, format_points(scene))


def read_pointcloud(path, role: Role = Role.GROUND_TRUTH) -> Scene:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            parts = s.split()
            if len(parts) != 3:
                raise PointCloudParseError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise PointCloudParseError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise PointCloudParseError(f"{path}: no points")
    try:
        return Scene(np.array(rows), role)
    except ValueError as exc:
        raise PointCloudParseError(f"{path}: {exc}") from None


def _atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


# datasets -----------------------------------------------------------------

@dataclass
class DatasetRecord:
    scan: str
    gt: str
    seed: int
    split: str


@dataclass
class DatasetManifest:
    records: list[DatasetRecord] = field(default_factory=list)
    root: str = "."

    def split(self, name: str) -> list[DatasetRecord]:
        return [r for r in self.records if r.split == name]

    def load(self, name: str) -> list[tuple[np.ndarray, np.ndarray]]:
        out = []
        for r in self.split(name):
            scan = read_pointcloud(Path(self.root) / r.scan, Role.SCAN).points
            gt = read_pointcloud(Path(self.root) / r.gt).points
            out.append((scan, gt))
        return out

    def save(self, path):
        body = {"version": 1, "records": [asdict(r) for r in self.records]}
        _atomic_write_text(path, json.dumps(body, indent=1, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> DatasetManifest:
        body = json.loads(Path(path).read_text())
        recs = [DatasetRecord(**r) for r in body["records"]]
        splits = {}
        for r in recs:
            splits.setdefault(r.seed, set()).add(r.split)
        if any(len(s) > 1 for s in splits.values()):
            raise ValueError("a seed appears in more than one split")
        return cls(recs, str(Path(path).parent))


def make_dataset(n_train: int, n_test: int, base_seed: int = 0, **spec_overrides):
    """In-memory (scan, gt) pairs; train seeds and held-out seeds never overlap."""
    train = [_pair(random_spec(base_seed + i, **spec_overrides)) for i in range(n_train)]
    test = [_pair(random_spec(base_seed + 100_000 + i, **spec_overrides)) for i in range(n_test)]
    return train, test


def _pair(spec: SceneSpec):
    g, p = generate_scene(spec)
    return p.points, g.points


def generate_dataset(out_dir, n_train: int, n_test: int, base_seed: int = 0, **spec_overrides) -> DatasetManifest:
    out = Path(out_dir)
    recs = []
    for split, n, offset in (("train", n_train, 0), ("held-out", n_test, 100_000)):
        for i in range(n):
            seed = base_seed + offset + i
            g, p = generate_scene(random_spec(seed, **spec_overrides))
            stem = f"{split}_{seed:06d}"
            write_pointcloud(p, out / f"{stem}_scan.xyz")
            write_pointcloud(g, out / f"{stem}_gt.xyz")
            recs.append(DatasetRecord(f"{stem}_scan.xyz", f"{stem}_gt.xyz", seed, split))
    manifest = DatasetManifest(recs, str(out))
    manifest.save(out / "manifest.json")
    return manifest
