"""Numbered acceptance criteria.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion with the measured numbers. Criteria 5 to 8 and
10 train the full toy scene and take several minutes each on one core.
"""
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from evsplat.events import (
    BayerMask,
    EventCameraModel,
    EventFrame,
    EventStream,
    EventWindow,
    accumulate,
    apply_bayer,
    slice_stream,
)
from evsplat.io import save_ply
from evsplat.losses import LossConfig, blur_loss, event_loss
from evsplat.metrics import evaluate
from evsplat.optim import refine_appearance
from evsplat.render import BlurConfig, render, render_backward, render_blur, render_blur_backward, render_reference
from evsplat.sim import frames_to_events
from evsplat.toy import toy_train_config

from oracles import brute_force_cuts, central_diff, grad_agreement, random_scene
from toy_runs import config_hash, heldout_report, run_toy, toy_problem

# Reference run (lambda 0.2, two rounds x 3000 iterations, one core): 30.06 dB
# aligned held-out PSNR. The bar below was fixed from that run and is only
# meaningful for the configuration with this hash.
TOY_PSNR_BAR = 25.0
TOY_CONFIG_HASH = "e8d9196dee4f0b67"
# Reference run: refinement lifted unaligned PSNR from 28.36 dB to 34.87 dB.
REFINE_GAIN_BAR = 1.0


def detail(record_property, text):
    record_property("detail", text)
    print(text)


# -- fast property criteria -------------------------------------------------------------


@pytest.mark.criterion(1, "tiled rasterizer matches the full-sort reference")
def test_criterion_1_rasterizer_oracle(record_property):
    rng = np.random.default_rng(101)
    render(*random_scene(rng, 3, size=32))  # compile outside the timed region
    t0 = time.perf_counter()
    worst_raw = worst_cut = 0.0
    for _ in range(50):
        cloud, view = random_scene(rng, int(rng.integers(1, 51)), size=32)
        raw = render(cloud, view, alpha_min=0.0, t_min=0.0).rgb
        worst_raw = max(worst_raw, float(np.max(np.abs(raw - render_reference(cloud, view)))))
        cut = render(cloud, view).rgb
        ref = render_reference(cloud, view, alpha_min=1 / 255, t_min=1e-4)
        worst_cut = max(worst_cut, float(np.max(np.abs(cut - ref))))
    secs = time.perf_counter() - t0
    detail(record_property, f"max |diff| {worst_raw:.2e} (no cutoffs), {worst_cut:.2e} (matched cutoffs); {secs:.1f} s")
    assert worst_raw <= 1e-10 and worst_cut <= 1e-10
    assert secs < 10


def _shifted(view, dx):
    return view.with_pose(view.rotation, view.translation + np.array([dx, -0.5 * dx, 0.0]), view.time + 0.01)


def _render_grad_fraction(rng, n):
    cloud, view = random_scene(rng, n, degree=1, size=16)
    up = rng.normal(size=(16, 16, 3))
    g = render_backward(cloud, view, up, render(cloud, view)).flat()
    fd = central_diff(lambda x: np.sum(up * render(cloud.with_flat(x), view).rgb), cloud.flat(), h=1e-5)
    return grad_agreement(g, fd, rel=1e-3, abs_=1e-6)[0]


def _event_grad_fraction(rng, n):
    cloud, v0 = random_scene(rng, n, degree=1, size=16)
    v1 = _shifted(v0, 0.04)
    frame = EventFrame(rng.normal(0, 0.3, (16, 16)), np.zeros((16, 16), bool), 0, 1)
    bayer = BayerMask(16, 16)
    cfg = LossConfig(gamma=2.2, lambda_dssim=0.2, dssim_range=1.0)

    def total(x, gamma=2.2):
        c = cloud.with_flat(x)
        return event_loss(render(c, v0), render(c, v1), frame, bayer, LossConfig(gamma=gamma, lambda_dssim=0.2,
                                                                                 dssim_range=1.0)).total

    r0, r1 = render(cloud, v0), render(cloud, v1)
    lv = event_loss(r0, r1, frame, bayer, cfg)
    g = (render_backward(cloud, v0, lv.d_image_start, r0) + render_backward(cloud, v1, lv.d_image_end, r1)).flat()
    x0 = cloud.flat()
    fd = central_diff(total, x0, h=1e-5)
    fd_gamma = central_diff(lambda gm: total(x0, float(gm[0])), [2.2], h=1e-5)
    return grad_agreement(np.append(g, lv.d_gamma), np.append(fd, fd_gamma), rel=1e-3, abs_=1e-6)[0]


def _blur_grad_fraction(rng, n):
    cloud, v0 = random_scene(rng, n, degree=1, size=16)
    bc = BlurConfig([v0, _shifted(v0, 0.03)])
    target = rng.random((16, 16, 3))
    fwd = render_blur(cloud, bc)
    lv = blur_loss(fwd, target)
    g = render_blur_backward(cloud, bc, lv.d_blur_image, fwd).flat()
    fd = central_diff(lambda x: blur_loss(render_blur(cloud.with_flat(x), bc), target).total, cloud.flat(), h=1e-5)
    return grad_agreement(g, fd, rel=1e-3, abs_=1e-6)[0]


@pytest.mark.criterion(2, "analytic gradients match central differences")
def test_criterion_2_gradient_suite(record_property):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    fr = {name: min(fn(rng, n) for n in (20, 12, 5))
          for name, fn in (("render", _render_grad_fraction), ("event_loss", _event_grad_fraction),
                           ("blur_loss", _blur_grad_fraction))}
    secs = time.perf_counter() - t0
    detail(record_property, ", ".join(f"{k} {v:.4f}" for k, v in fr.items()) + f" agreeing; {secs:.1f} s")
    assert all(v >= 0.99 for v in fr.values())
    assert secs < 120


def _random_stream(rng, n, w=8, h=6):
    t = np.sort(rng.integers(0, 10_000, n))
    return EventStream.from_arrays(t, rng.integers(0, w, n), rng.integers(0, h, n), rng.choice([-1, 1], n), w, h)


def _window(events):
    return EventWindow(int(events["t"][0]), int(events["t"][-1]) + 1, events)


@pytest.mark.criterion(3, "event pipeline invariants on 100 random cases each")
def test_criterion_3_event_pipeline(record_property):
    rng = np.random.default_rng(303)
    failures = dict(partition=0, linearity=0, seeds=0, bayer=0)
    for _ in range(100):
        n, ct, nt = int(rng.integers(1, 400)), int(rng.integers(1, 60)), int(rng.integers(1, 8))
        s = _random_stream(rng, n)
        windows = slice_stream(s, EventCameraModel(window_event_count=ct, neutralization_pixel_threshold=nt))
        ref = [c for c in brute_force_cuts(s, ct, nt) if c < n]
        bounds = np.cumsum([len(w) for w in windows])[:-1].tolist()
        ok = np.array_equal(np.concatenate([w.events for w in windows]), s.events)
        ok &= bounds == ref or (bounds == ref[:-1] and n - ref[-1] < 0.1 * ct)
        failures["partition"] += not ok

    model = EventCameraModel(threshold=0.17, noise_sigma=0.3)
    for _ in range(100):
        s = _random_stream(rng, int(rng.integers(1, 200)))
        seed = int(rng.integers(0, 2**31))
        doubled = np.sort(np.concatenate([s.events, s.events]), order="t", kind="stable")
        f1, f2 = accumulate(_window(s.events), model, seed, 8, 6), accumulate(_window(doubled), model, seed, 8, 6)
        ev = ~f1.no_event_mask
        failures["linearity"] += not np.allclose(f2.accumulated[ev], 2 * f1.accumulated[ev], rtol=0, atol=1e-12)

        again = accumulate(_window(s.events), model, seed, 8, 6)
        other = accumulate(_window(s.events), model, seed + 1, 8, 6)
        ok = np.array_equal(again.accumulated, f1.accumulated)
        ok &= np.array_equal(other.accumulated[ev], f1.accumulated[ev])
        silent = f1.no_event_mask
        ok &= not silent.any() or bool(np.any(other.accumulated[silent] != f1.accumulated[silent]))
        failures["seeds"] += not ok

    for _ in range(100):
        h, w = int(rng.integers(1, 41)), int(rng.integers(1, 41))
        img = rng.random((h, w, 3))
        yy, xx = np.mgrid[0:h, 0:w]
        ch = np.where((yy % 2 == 0) & (xx % 2 == 0), 0, np.where((yy % 2 == 1) & (xx % 2 == 1), 2, 1))
        failures["bayer"] += not np.array_equal(apply_bayer(img, BayerMask(h, w)),
                                                np.take_along_axis(img, ch[..., None], 2)[..., 0])
    detail(record_property, "failures " + ", ".join(f"{k} {v}/100" for k, v in failures.items()))
    assert sum(failures.values()) == 0


@pytest.mark.criterion(4, "simulator integration residual below the threshold")
def test_criterion_4_quantization_bound(record_property):
    rng = np.random.default_rng(404)
    worst = 0.0
    for k in range(100):
        delta = float(rng.uniform(0.05, 0.4))
        model = EventCameraModel(threshold=delta)
        n = int(rng.integers(2, 9))
        times = np.cumsum(rng.uniform(0.01, 0.1, n))
        if k % 2:
            frames = [rng.uniform(0.02, 1, (7, 9, 3)) for _ in range(n)]
            gamma, bayer = float(rng.choice([1.0, 2.2])), BayerMask(7, 9)
            s = frames_to_events(frames, times, model, bayer, encoding_gamma=gamma)
            total = (np.log(apply_bayer(frames[-1], bayer)) - np.log(apply_bayer(frames[0], bayer))) / gamma
        else:
            frames = [rng.uniform(0.02, 1, (7, 9)) for _ in range(n)]
            s = frames_to_events(frames, times, model)
            total = np.log(frames[-1]) - np.log(frames[0])
        counts = np.zeros((7, 9))
        np.add.at(counts, (s.events["y"], s.events["x"]), s.events["p"].astype(float))
        worst = max(worst, float(np.max(np.abs(total - delta * counts))) / delta)
    detail(record_property, f"worst residual {worst:.6f} thresholds")
    assert worst < 1.0


@pytest.mark.criterion(9, "scale ambiguity invariances")
def test_criterion_9_scale_invariance(record_property):
    rng = np.random.default_rng(909)
    drift_loss = 0.0
    for _ in range(20):
        s, e = rng.uniform(0.01, 1, (12, 14, 3)), rng.uniform(0.01, 1, (12, 14, 3))
        frame = EventFrame(rng.normal(0, 0.3, (12, 14)), np.zeros((12, 14), bool), 0, 1)
        base = event_loss(s, e, frame, BayerMask(12, 14)).total
        for k in (0.5, 2.0, 10.0, 1e3):
            drift_loss = max(drift_loss, abs(event_loss(k * s, k * e, frame, BayerMask(12, 14)).total - base))
    drift_psnr = 0.0
    for _ in range(5):
        gt = [rng.uniform(0.05, 0.95, (16, 16, 3)) for _ in range(4)]
        rendered = [np.clip(g * rng.uniform(0.7, 1.3) + rng.normal(0, 0.05, g.shape), 0.01, 2) for g in gt]
        base = evaluate(rendered, gt).psnr
        for k in (0.5, 1.0, 2.0, 10.0):
            drift_psnr = max(drift_psnr, max(abs(a - b) for a, b in zip(base, evaluate([k * r for r in rendered],
                                                                                        gt).psnr)))
    detail(record_property, f"event_loss drift {drift_loss:.1e}, PSNR drift {drift_psnr:.1e} dB")
    assert drift_loss <= 1e-12 and drift_psnr <= 1e-9


# -- toy-scene criteria (slow) ----------------------------------------------------------


@pytest.fixture(scope="module")
def main_run():
    return run_toy(0.2)


@pytest.mark.slow
@pytest.mark.criterion(5, "toy reconstruction reaches the aligned PSNR bar")
def test_criterion_5_toy_reconstruction(main_run, record_property):
    psnr = heldout_report(main_run.cloud).psnr_mean
    h = config_hash()
    detail(record_property, f"{psnr:.2f} dB (bar {TOY_PSNR_BAR}), {len(main_run.cloud)} splats, "
                            f"{main_run.seconds:.0f} s, config {h}")
    assert h == TOY_CONFIG_HASH, "toy configuration changed; re-derive the PSNR bar from a fresh reference run"
    assert psnr >= TOY_PSNR_BAR


@pytest.mark.slow
@pytest.mark.criterion(6, "second progressive round does not degrade")
def test_criterion_6_progressive_rounds(main_run, record_property):
    r1, r2 = main_run.round_psnr
    detail(record_property, f"round 1 {r1:.2f} dB, round 2 {r2:.2f} dB")
    assert r2 >= r1 - 0.1


@pytest.mark.slow
@pytest.mark.criterion(7, "L1 + DSSIM mix is at least as good as either term alone")
def test_criterion_7_loss_ablation(main_run, record_property):
    mixed = heldout_report(main_run.cloud).psnr_mean
    only = {lam: heldout_report(run_toy(lam).cloud).psnr_mean for lam in (0.0, 1.0)}
    detail(record_property, f"lambda 0.2 {mixed:.2f} dB, lambda 0 {only[0.0]:.2f} dB, lambda 1 {only[1.0]:.2f} dB")
    assert mixed >= max(only.values()) - 0.2


@pytest.mark.slow
@pytest.mark.criterion(8, "blurred-frame refinement keeps structure and lifts linear color")
def test_criterion_8_refinement(main_run, record_property):
    problem = toy_problem()
    before = main_run.cloud
    after = refine_appearance(before, problem.blurred_frames(10, 8), toy_train_config())
    same = all(np.array_equal(getattr(before, f), getattr(after, f)) for f in ("means", "log_scales", "rotations"))
    p0 = heldout_report(before, aligned=False).psnr_mean
    p1 = heldout_report(after, aligned=False).psnr_mean
    detail(record_property, f"unaligned {p0:.2f} -> {p1:.2f} dB (+{p1 - p0:.2f}), structure bit-identical: {same}")
    assert same
    assert p1 - p0 >= REFINE_GAIN_BAR


@pytest.mark.slow
@pytest.mark.criterion(10, "identical seeds give bit-identical PLY across thread counts")
def test_criterion_10_determinism(main_run, record_property, tmp_path):
    import numba

    here = Path(__file__).parent
    env = dict(os.environ, NUMBA_NUM_THREADS="2", EVENT3DGS_THREADS="2",
               PYTHONPATH=os.pathsep.join([str(here), os.environ.get("PYTHONPATH", "")]))
    out = tmp_path / "cloud.ply"
    proc = subprocess.run([sys.executable, str(here / "toy_runs.py"), str(out), "0.2"], env=env,
                          capture_output=True, text=True, check=True)
    info = json.loads(proc.stdout.strip().splitlines()[-1])
    same = out.read_bytes() == save_ply(main_run.cloud)
    detail(record_property, f"threads {numba.get_num_threads()} vs {info['threads']}: "
                            f"PLY {'identical' if same else 'differs'}")
    assert info["threads"] != numba.get_num_threads()
    assert same
