"""Acceptance suite: every criterion at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one PASS line
per criterion.
"""

import json
import time
import tracemalloc

import numpy as np
import pytest

from gramdyn.frameset import PointCloud
from gramdyn.geometry import CameraParams, depth_gradient, project, unproject, _residual_gradients_batch
from gramdyn.gramstats import LayerGroup, WindowSpec, aggregate_stats
from gramdyn.intervene import masked_attention_reference, plain_attention
from gramdyn.masking import otsu_threshold
from gramdyn.metrics import Trajectory, recon_metrics, traj_metrics
from gramdyn.pipeline import run_pipeline
from gramdyn.refine import sor_filter

from .conftest import small_scene_spec, tiny_frameset
from .test_gramstats import naive_aggregate
from .test_masking import exhaustive_otsu
from .test_metrics import brute_force_recon, cloud, orbit_trajectory, random_rotation
from .test_refine import brute_force_sor, cloud_from


def report(name, detail):
    print(f"\n[PASS] {name}: {detail}")


def test_c1_gram_stats_oracle_equivalence():
    fs = tiny_frameset(F=6, size=112, P=14, c=16, layers=(1, 4), seed=101)
    assert fs.token_count == 64
    w = WindowSpec(3, 2)
    t0 = time.monotonic()
    worst = 0.0
    for kind in ("QQ", "QK", "KK"):
        group = LayerGroup(kind, (1, 4))
        maps = aggregate_stats(fs, group, w)
        S, V = naive_aggregate(fs, group, w)
        worst = max(worst, float(np.abs(maps.S - S).max()), float(np.abs(maps.V - V).max()))
    elapsed = time.monotonic() - t0
    assert worst <= 1e-5
    assert elapsed < 5.0
    report("oracle equivalence (gram stats)",
           f"F=6 Np=64 c=16, max |streaming - naive| = {worst:.2e}, {elapsed:.2f}s")


def _peak_bytes(F):
    fs = tiny_frameset(F=F, size=448, P=14, c=16, layers=(1,), seed=7)
    assert fs.token_count == 1024
    group = LayerGroup("QQ", (1,))
    w = WindowSpec(3, 2)
    tracemalloc.start()
    aggregate_stats(fs, group, w)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return peak


def test_c2_memory_contract():
    np_sq_f32 = 1024 * 1024 * 4  # one Np x Np float32 transient
    p4, p8, p16 = _peak_bytes(4), _peak_bytes(8), _peak_bytes(16)
    budget = np_sq_f32 + 16 * 1024 * 8 * 8 + 1_000_000  # + O(F Np) + slack
    assert p16 <= budget, f"peak {p16} exceeds one-gram-buffer budget {budget}"
    # linear-in-F growth: extrapolating the 4 -> 8 increment to F=16 must
    # cover the measured peak (quadratic growth would overshoot hugely)
    linear_pred = p8 + 2 * (p8 - p4)
    assert p16 <= max(1.25 * linear_pred, linear_pred + 1_000_000)
    report("memory contract",
           f"peaks F=4/8/16: {p4 / 1e6:.2f}/{p8 / 1e6:.2f}/{p16 / 1e6:.2f} MB "
           f"(budget {budget / 1e6:.2f} MB)")


def test_c3_gradient_check():
    rng = np.random.default_rng(2024)
    t0 = time.monotonic()
    total = ok = 0
    size = 151
    while total < 10_000:
        A = rng.normal(size=(3, 3))
        R, _ = np.linalg.qr(A)
        if np.linalg.det(R) < 0:
            R[:, 0] *= -1
        cam = CameraParams(
            fx=float(rng.uniform(100, 400)), fy=float(rng.uniform(100, 400)),
            cx=(size - 1) / 2, cy=(size - 1) / 2,
            rotation=R.T, translation=rng.normal(scale=0.15, size=3),
        )
        b, c, d = rng.uniform(-0.003, 0.003, size=3)
        uu, vv = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float))
        depth = 3.0 + b * uu + c * vv + d * uu * vv / size  # smooth: no depth edges
        grad_map = depth_gradient(depth)
        pc = unproject(depth, cam, stride=4)
        pts = pc.positions[rng.choice(len(pc), size=min(900, len(pc)), replace=False)]
        scale = float(np.median(depth))
        step = 1e-4 * scale

        base = project(pts, cam, depth)
        vis = base.visible
        fd = np.zeros((len(pts), 3))
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = step
            sp = project(pts + e, cam, depth)
            sm = project(pts - e, cam, depth)
            vis = vis & sp.visible & sm.visible
            with np.errstate(invalid="ignore"):
                fd[:, axis] = (sp.r_d - sm.r_d) / (2 * step)
        if not vis.any():
            continue
        an = _residual_gradients_batch(pts[vis], cam, grad_map, base.u[vis], base.v[vis])
        rel = np.linalg.norm(an - fd[vis], axis=1) / np.maximum(
            np.linalg.norm(fd[vis], axis=1), 1e-12
        )
        total += int(vis.sum())
        ok += int((rel < 1e-3).sum())
    elapsed = time.monotonic() - t0
    frac = ok / total
    assert frac >= 0.95
    assert elapsed < 10.0
    report("gradient check",
           f"{total} visible samples, rel err < 1e-3 on {frac * 100:.2f}% ({elapsed:.1f}s)")


def test_c4_otsu_exactness():
    rng = np.random.default_rng(31)
    mismatches = 0
    n_sets = 0
    while n_sets < 1000:
        n = int(rng.integers(2, 80))
        kind = rng.integers(4)
        if kind == 0:
            scores = rng.uniform(size=n)
        elif kind == 1:
            scores = np.clip(np.concatenate([
                rng.normal(rng.uniform(0.1, 0.4), 0.05, size=n),
                rng.normal(rng.uniform(0.6, 0.9), 0.05, size=n),
            ]), 0, 1)
        elif kind == 2:
            scores = rng.choice(rng.uniform(size=4), size=n)
        else:
            scores = rng.beta(0.5, 0.5, size=n)
        if scores.max() == scores.min():
            continue
        n_sets += 1
        if otsu_threshold(scores) != exhaustive_otsu(scores):
            mismatches += 1
    assert mismatches == 0
    report("Otsu exactness", f"1000 random score sets, {mismatches} mismatches")


def test_c5_sor_exactness():
    rng = np.random.default_rng(55)
    checked = 0
    for _ in range(100):
        n = int(rng.integers(25, 501))
        pts = rng.normal(size=(n, 3)) * rng.uniform(0.3, 5.0)
        n_out = int(rng.integers(0, 6))
        if n_out:
            pts[:n_out] += rng.normal(scale=40.0, size=(n_out, 3))
        kept, removed = sor_filter(cloud_from(pts), k=20, sigma=2.5)
        assert set(removed.tolist()) == brute_force_sor(pts, 20, 2.5)
        checked += 1
    assert checked == 100
    report("SOR exactness", "identical removed sets on 100 random clouds (N <= 500)")


def test_c6_suppression_semantics():
    rng = np.random.default_rng(77)
    worst_mass = 0.0
    for _ in range(1000):
        nq = int(rng.integers(1, 10))
        nk = int(rng.integers(2, 16))
        c = int(rng.choice([4, 8, 16]))
        Q = rng.normal(scale=rng.uniform(0.5, 3.0), size=(nq, c))
        K = rng.normal(scale=rng.uniform(0.5, 3.0), size=(nk, c))
        sup = rng.uniform(size=nk) < rng.uniform(0.2, 0.8)
        if sup.all():
            sup[int(rng.integers(nk))] = False
        if not sup.any():
            sup[int(rng.integers(nk))] = True
        W = masked_attention_reference(Q, K, np.eye(nk), sup)
        worst_mass = max(worst_mass, float(W[:, sup].sum()))
    assert worst_mass < 1e-7

    Q = rng.normal(size=(16, 32))
    K = rng.normal(size=(24, 32))
    V = rng.normal(size=(24, 8))
    out = masked_attention_reference(Q, K, V, np.zeros(24, bool))
    assert out.tobytes() == plain_attention(Q, K, V).tobytes()
    report("suppression semantics",
           f"worst suppressed mass {worst_mass:.2e} over 1000 instances; "
           "no-suppression path bit-identical")


def test_c7_end_to_end_fixture(tmp_path):
    t0 = time.monotonic()
    rep = run_pipeline(tmp_path / "run", seed=7)
    elapsed = time.monotonic() - t0
    jm = rep["seg_patch"]["JM"]
    fm_gain = rep["seg_refined"]["FM"] - rep["seg_patch"]["FM"]
    assert jm >= 0.70, f"mined mask IoU {jm:.4f} below 0.70"
    assert fm_gain >= 0.05, f"refinement boundary-F gain {fm_gain:.4f} below 0.05"
    assert elapsed < 120.0, f"pipeline took {elapsed:.0f}s (budget 120s)"
    report("end-to-end synthetic segmentation",
           f"mined JM {jm:.4f} (>= 0.70), boundary-F gain {fm_gain:+.4f} (>= 0.05), "
           f"{elapsed:.0f}s (< 120s)")


def test_c8_metric_sanity():
    gt = orbit_trajectory(16)
    ate, rte, rre = traj_metrics(gt, gt)
    assert max(ate, rte, rre) < 1e-12

    rng = np.random.default_rng(12)
    est = Trajectory(rotations=gt.rotations.copy(),
                     translations=gt.translations + rng.normal(scale=0.03, size=(16, 3)))
    base_ate, _, _ = traj_metrics(est, gt)
    worst = 0.0
    for _ in range(10):
        R0 = random_rotation(rng)
        s0 = float(rng.uniform(0.2, 5.0))
        t0 = rng.normal(scale=4.0, size=3)
        warped = Trajectory(
            rotations=np.einsum("ij,fjk->fik", R0, est.rotations),
            translations=(est.translations @ R0.T) * s0 + t0,
        )
        ate, _, _ = traj_metrics(warped, gt)
        worst = max(worst, abs(ate - base_ate))
    assert worst < 1e-9

    for _ in range(10):
        pred = rng.normal(size=(int(rng.integers(50, 501)), 3))
        gt_pts = rng.normal(size=(int(rng.integers(50, 501)), 3))
        repm = recon_metrics(cloud(pred), cloud(gt_pts))
        am, amed, cm, cmed, dm, dmed = brute_force_recon(pred, gt_pts)
        assert repm.accuracy_mean == pytest.approx(am, abs=1e-12)
        assert repm.completeness_median == pytest.approx(cmed, abs=1e-12)
        assert repm.distance_mean == pytest.approx(dm, abs=1e-12)
    report("metric sanity",
           f"traj(gt,gt) ~ 0, ATE similarity-invariance drift {worst:.1e} (< 1e-9), "
           "recon == brute force on 10 clouds")


def test_c9_pipeline_determinism(tmp_path):
    from gramdyn.pipeline import PipelineConfig

    def run(out, threads):
        cfg = PipelineConfig(scene=small_scene_spec(seed=5))
        run_pipeline(out, cfg, seed=5, threads=threads)
        return {
            p.relative_to(out).as_posix(): p.read_bytes()
            for p in sorted(out.rglob("*")) if p.is_file()
        }

    a = run(tmp_path / "t1", threads=1)
    b = run(tmp_path / "t4", threads=4)
    c = run(tmp_path / "t1b", threads=1)
    assert a.keys() == b.keys() == c.keys()
    diffs = [k for k in a if not (a[k] == b[k] == c[k])]
    assert not diffs, f"non-deterministic outputs: {diffs}"
    report("determinism",
           f"{len(a)} output files bit-identical across threads 1/4 and repeat runs")
