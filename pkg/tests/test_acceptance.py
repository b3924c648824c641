"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

The last four criteria run on the desk-scale benchmark (configs/default.yaml,
20 held-out scenes, seeds 0, 1, 2), produced once per session by the
``desk_runs`` fixture. They take roughly a quarter of an hour on one core.
"""

import math
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from criteria import record
from oracles import metrics_ref
from oracles.cubic import newton_polish, symmetric_eigenvalues
from oracles.fd import central_diff, rel_error
from pcdistill import distill as D
from pcdistill.autodiff import Tensor
from pcdistill.diffusion import denoise_update, denoising_loss, onestep_graph
from pcdistill.distill import init_state, kl_surrogate_loss, point_loss, scene_loss
from pcdistill.geometry import curvatures, distance_matrix, knn, neighborhood_stats, select_keypoints
from pcdistill.metrics import chamfer, emd
from pcdistill.net import NetConfig, init_model, sgd_step
from pcdistill.schedule import build_schedule, diffuse_offset, diffuse_standard

INSTANCES = 20
SCHED10 = build_schedule(10, 1e-3, 0.2)
SCHED50 = build_schedule(50)
SEEDS = (0, 1, 2)


def random_model(cfg, seed, scale=0.4):
    m = init_model(cfg, seed)
    rng = np.random.default_rng(seed)
    for p in m.parameters():
        p.value = rng.normal(0, scale, p.value.shape)
    return m


def rigid(points, seed):
    rot = Rotation.random(random_state=seed).as_matrix()
    return points @ rot.T + np.random.default_rng(seed).normal(0, 5, 3)


def median_over_seeds(runs, row):
    return float(np.median([runs[s]["rows"][row]["cd"] for s in SEEDS]))


# gradient suite -------------------------------------------------------------

def worst_denoising_gradient(seed):
    rng = np.random.default_rng(seed)
    m = random_model(NetConfig(width=6, depth=2, t_embed=4, T=50), seed, scale=0.5)
    clean, scan, eps = rng.normal(size=(8, 3)), rng.normal(size=(5, 3)), rng.normal(size=(8, 3))
    t = int(rng.integers(1, 51))
    denoising_loss(m, clean, scan, t, eps, SCHED50).backward()
    f = lambda: float(denoising_loss(m, clean, scan, t, eps, SCHED50).value)  # noqa: E731
    return max(rel_error(p.grad, central_diff(f, p.value)) for p in m.parameters())


def worst_scene_gradient(seed):
    rng = np.random.default_rng(seed)
    g0, gt = rng.normal(size=(15, 3)), rng.normal(size=(40, 3))
    t = Tensor(g0, requires_grad=True)
    scene_loss(t, gt).backward()
    return rel_error(t.grad, central_diff(lambda: float(scene_loss(g0, gt).value), g0, h=1e-6))


def worst_point_gradient(seed):
    rng = np.random.default_rng(seed)
    k, c = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    t = Tensor(c, requires_grad=True)
    point_loss(k, t).backward()
    return rel_error(t.grad, central_diff(lambda: float(point_loss(k, c).value), c))


def worst_kl_gradient(seed):
    rng = np.random.default_rng(seed)
    cfg = NetConfig(width=8, depth=3, t_embed=4, T=10)
    theta, phi, eta = (random_model(cfg, 3 * seed + i) for i in range(3))
    scan = rng.normal(size=(5, 3))
    x_t, eps = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
    t = int(rng.integers(1, 11))
    inversion = ("rescale", "offset")[seed % 2]
    g0 = onestep_graph(eta, x_t, scan, SCHED10, inversion)
    loss, _ = kl_surrogate_loss(theta, phi, g0, scan, t, eps, SCHED10)
    loss.backward()
    g_t = g0.value + SCHED10.noise_scale(t) * eps
    d = D.predict_noise(theta, g_t, scan, t) - D.predict_noise(phi, g_t, scan, t)

    def frozen():
        g = onestep_graph(eta, x_t, scan, SCHED10, inversion).value + SCHED10.noise_scale(t) * eps
        return float(np.sum(d * g))

    return max(rel_error(p.grad, central_diff(frozen, p.value)) for p in eta.parameters())


def test_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for name, fn in [("denoising", worst_denoising_gradient), ("scene", worst_scene_gradient),
                     ("point", worst_point_gradient), ("kl", worst_kl_gradient)]:
        worst[name] = max(fn(s) for s in range(INSTANCES))
    dt = time.perf_counter() - t0
    ok = all(v <= 1e-4 for v in worst.values()) and dt < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert record("gradient suite", ok, f"worst rel. error {detail} over {INSTANCES} instances each, {dt:.1f}s")


# oracle equivalence ---------------------------------------------------------

def test_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    cd_err = emd_err = eig_err = 0.0
    knn_ok = True
    for _ in range(INSTANCES):
        p = rng.normal(size=(int(rng.integers(1, 201)), 3))
        q = rng.normal(size=(int(rng.integers(1, 201)), 3))
        cd_err = max(cd_err, abs(chamfer(p, q) - metrics_ref.chamfer(p.tolist(), q.tolist())))
        n = int(rng.integers(1, 7))
        a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        emd_err = max(emd_err, abs(emd(a, b, n_emd=n) - metrics_ref.emd_exhaustive(a.tolist(), b.tolist())))
        pts = rng.random((int(rng.integers(2, 121)), 3))
        k, qi = min(int(rng.integers(1, 11)), len(pts) - 1), int(rng.integers(len(pts)))
        d = [(float(np.sum((pts[i] - pts[qi]) ** 2)), i) for i in range(len(pts)) if i != qi]
        knn_ok &= list(knn(pts, qi, k)) == [i for _, i in sorted(d)[:k]]
        cloud = rng.normal(size=(40, 3)) * rng.uniform(0.1, 3.0, 3)
        nb = neighborhood_stats(cloud, int(rng.integers(40)), 12)
        c = nb.covariance.tolist()
        eig_err = max(eig_err, float(np.max(np.abs(nb.eigenvalues - newton_polish(c, symmetric_eigenvalues(c))))))
    dt = time.perf_counter() - t0
    ok = cd_err <= 1e-12 and emd_err <= 1e-12 and knn_ok and eig_err <= 1e-8 and dt < 60
    assert record("oracle equivalence", ok, f"chamfer {cd_err:.1e}, emd {emd_err:.1e}, knn "
                  f"{'identical' if knn_ok else 'differs'}, eigenvalues {eig_err:.1e}, {dt:.1f}s")


# invariance suite -----------------------------------------------------------

def test_invariance_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    curv_err = pl_err = 0.0
    keys_same = kappa_ok = dist_ok = scene_ok = True
    for s in range(INSTANCES):
        pts = rng.random((150, 3)) * [4, 4, 1]
        moved = rigid(pts, s)
        ka, _ = curvatures(pts, np.arange(150), 15)
        kb, _ = curvatures(moved, np.arange(150), 15)
        curv_err = max(curv_err, float(np.max(np.abs(ka - kb))))
        kappa_ok &= bool(np.all((ka >= 0) & (ka <= 1 / 3)))
        a = select_keypoints(pts, 1 / 15, 15, prefilter=1.0)
        b = select_keypoints(moved, 1 / 15, 15, prefilter=1.0)
        keys_same &= set(a.indices.tolist()) == set(b.indices.tolist())
        k, c = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
        base = float(point_loss(k, c).value)
        pl_err = max(pl_err, abs(float(point_loss(rigid(k, s), c).value) - base),
                     abs(float(point_loss(k, rigid(c, s + 1)).value) - base))
        dm = distance_matrix(rng.normal(size=(12, 3)))
        tri = dm[:, :, None] + dm[None, :, :] - dm[:, None, :]
        dist_ok &= bool(np.array_equal(dm, dm.T) and np.all(np.diag(dm) == 0) and tri.min() >= -1e-12)
        gt = rng.normal(size=(12, 3))
        g0 = gt[rng.integers(0, 12, 20)].copy()
        zero = float(scene_loss(g0, gt).value)
        g0[int(rng.integers(20))] += 1e-3
        scene_ok &= zero == 0.0 and float(scene_loss(g0, gt).value) > 0
    dt = time.perf_counter() - t0
    ok = curv_err <= 1e-8 and pl_err <= 1e-8 and keys_same and kappa_ok and dist_ok and scene_ok and dt < 60
    assert record("invariance suite", ok, f"curvature {curv_err:.1e}, point loss {pl_err:.1e}, keypoints "
                  f"{'same' if keys_same else 'differ'}, kappa range {kappa_ok}, distance matrices {dist_ok}, "
                  f"scene loss zero iff coincident {scene_ok}, {dt:.1f}s")


# exact recovery -------------------------------------------------------------

def test_exact_recovery_identities():
    rng = np.random.default_rng(2)
    errs = [0.0, 0.0, 0.0]
    for _ in range(INSTANCES):
        x0, eps = rng.normal(size=(50, 3)) * 5, rng.normal(size=(50, 3))
        t = int(rng.integers(1, 51))
        ab = SCHED50.abar(t)
        xt = diffuse_standard(x0, t, eps, SCHED50).points
        errs[0] = max(errs[0], np.max(np.abs((xt - math.sqrt(1 - ab) * eps) / math.sqrt(ab) - x0)))
        xo = diffuse_offset(x0, t, eps, SCHED50).points
        errs[1] = max(errs[1], np.max(np.abs(xo - SCHED50.noise_scale(t) * eps - x0)))
        x1 = diffuse_standard(x0, 1, eps, SCHED50).points
        errs[2] = max(errs[2], np.max(np.abs(denoise_update(x1, eps, 1, SCHED50) - x0)))
    ok = max(errs) <= 1e-10
    assert record("exact recovery", ok, f"standard inversion {errs[0]:.1e}, offset subtraction {errs[1]:.1e}, "
                  f"reverse step at t=1 {errs[2]:.1e}")


# KL null test ---------------------------------------------------------------

def test_kl_null():
    cfg = NetConfig(width=8, depth=3, t_embed=4, T=10)
    state = init_state(random_model(cfg, 1))
    rng = np.random.default_rng(0)
    scan = rng.normal(size=(6, 3))
    x_t = rng.normal(size=(24, 3))
    before = {k: p.value.copy() for k, p in state.eta.params.items()}
    g0 = onestep_graph(state.eta, x_t, scan, SCHED10)
    loss, _ = kl_surrogate_loss(state.theta, state.phi, g0, scan, 5, rng.normal(size=(24, 3)), SCHED10)
    loss.backward()
    sgd_step(state.eta, 1.0)
    moved = max(float(np.max(np.abs(p.value - before[k]))) for k, p in state.eta.params.items())
    assert record("KL null", moved == 0.0, f"largest student parameter change after one KL update: {moved}")


# desk-scale benchmark -------------------------------------------------------

@pytest.mark.slow
def test_distillation_efficacy(desk_runs):
    s8, t8, t50 = (median_over_seeds(desk_runs, r) for r in ("student@8", "teacher@8", "teacher@50"))
    slowest = max(desk_runs[s]["runtime"] for s in SEEDS)
    ok = s8 <= t8 and s8 <= 1.25 * t50 and slowest <= 15 * 60
    assert record("distillation efficacy", ok, f"median CD student@8 {s8:.4f}, teacher@8 {t8:.4f}, "
                  f"teacher@50 {t50:.4f} (limit {1.25 * t50:.4f}); slowest pipeline {slowest:.0f}s")


@pytest.mark.slow
def test_speedup(desk_runs):
    ratios = [desk_runs[s]["rows"]["teacher@50"]["time"] / desk_runs[s]["rows"]["student@8"]["time"] for s in SEEDS]
    ok = min(ratios) >= 5
    assert record("speedup", ok, "teacher@50 / student@8 median wall time over 20 completions: "
                  + ", ".join(f"{r:.1f}x" for r in ratios))


@pytest.mark.slow
def test_structural_loss_ablation(desk_runs):
    default = float(np.median([desk_runs[s]["ablation"]["default"] for s in SEEDS]))
    off = float(np.median([desk_runs[s]["ablation"]["no-structural"] for s in SEEDS]))
    assert record("structural-loss ablation", default < off,
                  f"median CD default {default:.4f} vs no structural loss {off:.4f}")


@pytest.mark.slow
def test_step_count_ablation(desk_runs):
    steps = (8, 4, 2, 1)
    times = [float(np.median([desk_runs[s]["rows"][f"student@{k}"]["time"] for s in SEEDS])) for k in steps]
    cds = {k: median_over_seeds(desk_runs, f"student@{k}") for k in steps}
    ok = all(a > b for a, b in zip(times, times[1:])) and cds[1] >= cds[8]
    assert record("step-count ablation", ok, "time " + " > ".join(f"{t:.4f}s" for t in times)
                  + f"; CD@1 {cds[1]:.4f} vs CD@8 {cds[8]:.4f}")
