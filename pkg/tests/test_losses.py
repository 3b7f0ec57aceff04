from dataclasses import replace

import numpy as np
import pytest

from evsplat.errors import DimensionMismatch
from evsplat.events import BayerMask, EventFrame
from evsplat.losses import LossConfig, blur_loss, dssim, event_loss, log_radiance, log_radiance_backward, ssim, ssim_map

from oracles import central_diff, grad_agreement, ssim_bruteforce

H, W = 12, 14


def frame_of(acc):
    return EventFrame(np.asarray(acc, float), np.zeros(np.shape(acc), bool), 0, 1)


def gray(img2d):
    return np.repeat(np.asarray(img2d, float)[..., None], 3, axis=2)


# -- log radiance ----------------------------------------------------------------------


def test_log_radiance_values():
    img = np.full((2, 2, 3), np.e)
    img[1, 1] = 0.0
    out = log_radiance(img, BayerMask(2, 2))
    assert out[0, 0] == pytest.approx(1.0)
    assert out[1, 1] == pytest.approx(np.log(1e-5))


def test_log_radiance_gradient(rng):
    img = rng.uniform(0.1, 2.0, (5, 6, 3))
    bayer = BayerMask(5, 6)
    up = rng.normal(size=(5, 6))
    g = log_radiance_backward(img, bayer, up)
    fd = central_diff(lambda x: np.sum(up * log_radiance(x.reshape(img.shape), bayer)), img.ravel())
    np.testing.assert_allclose(g.ravel(), fd, rtol=1e-6, atol=1e-9)


def test_log_radiance_gradient_zero_at_floor():
    img = np.zeros((2, 2, 3))
    g = log_radiance_backward(img, BayerMask(2, 2), np.ones((2, 2)))
    assert np.all(g == 0)


# -- DSSIM -----------------------------------------------------------------------------


def test_ssim_map_matches_bruteforce(rng):
    a, b = rng.random((H, W)), rng.random((H, W))
    S, _ = ssim_map(a, b, LossConfig())
    np.testing.assert_allclose(S, ssim_bruteforce(a, b), atol=1e-12)


def test_dssim_identical_is_zero(rng):
    a = rng.random((H, W))
    assert dssim(a, a)[0] == pytest.approx(0.0, abs=1e-12)


def test_dssim_inverted_image(rng):
    b = rng.random((H, W))
    value = dssim(1 - b, b)[0]
    oracle = (1 - ssim_bruteforce(1 - b, b).mean()) / 2
    assert value == pytest.approx(oracle, abs=1e-12)
    assert value > 0.4


def test_dssim_in_unit_interval(rng):
    for _ in range(20):
        v = dssim(rng.random((H, W)), rng.random((H, W)))[0]
        assert 0.0 <= v <= 1.0


def test_dssim_gradient(rng):
    a, b = rng.random((H, W)), rng.random((H, W))
    _, g = dssim(a, b)
    fd = central_diff(lambda x: dssim(x.reshape(a.shape), b)[0], a.ravel())
    np.testing.assert_allclose(g.ravel(), fd, rtol=1e-4, atol=1e-10)


def test_dssim_multichannel_gradient(rng):
    a, b = rng.random((8, 9, 3)), rng.random((8, 9, 3))
    _, g = dssim(a, b)
    fd = central_diff(lambda x: dssim(x.reshape(a.shape), b)[0], a.ravel())
    np.testing.assert_allclose(g.ravel(), fd, rtol=1e-4, atol=1e-10)


def test_dssim_shape_mismatch():
    with pytest.raises(DimensionMismatch):
        dssim(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(DimensionMismatch):
        ssim(np.zeros((3, 3)), np.zeros((4, 3)))


# -- event loss ------------------------------------------------------------------------


def _consistent_pair(rng, target, g=2.2):
    start = rng.uniform(0.2, 1.0, target.shape)
    return gray(start), gray(start * np.exp(g * target))


def test_event_loss_perfect_fit(rng):
    target = rng.normal(0, 0.2, (H, W))
    s, e = _consistent_pair(rng, target)
    lv = event_loss(s, e, frame_of(target), BayerMask(H, W), LossConfig(dssim_range=1.0))
    assert lv.total == pytest.approx(0.0, abs=1e-12)
    assert lv.l1_part == pytest.approx(0.0, abs=1e-12)
    assert lv.dssim_part == pytest.approx(0.0, abs=1e-12)


def test_event_loss_constant_offset(rng):
    target = rng.normal(0, 0.2, (H, W))
    s, e = _consistent_pair(rng, target + 0.1)
    lv = event_loss(s, e, frame_of(target), BayerMask(H, W), LossConfig(dssim_range=1.0))
    assert lv.l1_part == pytest.approx(0.1, abs=1e-12)
    # oracle: the SSIM formula on the mapped grids directly
    pred, tgt = (target + 0.1 + 1.0) / 2.0, (target + 1.0) / 2.0
    assert lv.dssim_part == pytest.approx((1 - ssim_bruteforce(pred, tgt).mean()) / 2, abs=1e-12)
    assert lv.dssim_part < 0.05


def test_event_loss_lambda_extremes(rng):
    target = rng.normal(0, 0.2, (H, W))
    s, e = gray(rng.uniform(0.2, 1, (H, W))), gray(rng.uniform(0.2, 1, (H, W)))
    bayer = BayerMask(H, W)
    l0 = event_loss(s, e, frame_of(target), bayer, LossConfig(lambda_dssim=0.0))
    l1 = event_loss(s, e, frame_of(target), bayer, LossConfig(lambda_dssim=1.0))
    assert l0.total == l0.l1_part
    assert l1.total == l1.dssim_part


def test_event_loss_decomposition(rng):
    for lam in (0.0, 0.2, 0.7, 1.0):
        lv = event_loss(rng.uniform(0.1, 1, (H, W, 3)), rng.uniform(0.1, 1, (H, W, 3)),
                        frame_of(rng.normal(0, 0.3, (H, W))), BayerMask(H, W), LossConfig(lambda_dssim=lam))
        assert abs(lv.total - ((1 - lam) * lv.l1_part + lam * lv.dssim_part)) <= 1e-12


def test_event_loss_scale_invariance(rng):
    s, e = rng.uniform(0.01, 1, (H, W, 3)), rng.uniform(0.01, 1, (H, W, 3))
    f, bayer = frame_of(rng.normal(0, 0.3, (H, W))), BayerMask(H, W)
    base = event_loss(s, e, f, bayer).total
    for k in (0.5, 2.0, 10.0, 1e3):
        assert abs(event_loss(k * s, k * e, f, bayer).total - base) <= 1e-12


def test_event_loss_swap_symmetry_l1(rng):
    s, e = rng.uniform(0.1, 1, (H, W, 3)), rng.uniform(0.1, 1, (H, W, 3))
    acc = rng.normal(0, 0.3, (H, W))
    bayer = BayerMask(H, W)
    a = event_loss(s, e, frame_of(acc), bayer)
    b = event_loss(e, s, frame_of(-acc), bayer)
    assert a.l1_part == b.l1_part


@pytest.mark.xfail(strict=True, reason="SSIM is not invariant under x -> 1 - x: its luminance term "
                   "compares means, so negation under the shared [-R, R] -> [0, 1] map changes DSSIM")
def test_event_loss_swap_symmetry_dssim(rng):
    s, e = rng.uniform(0.1, 1, (H, W, 3)), rng.uniform(0.1, 1, (H, W, 3))
    acc = rng.normal(0, 0.3, (H, W))
    bayer = BayerMask(H, W)
    a = event_loss(s, e, frame_of(acc), bayer)
    b = event_loss(e, s, frame_of(-acc), bayer)
    assert abs(a.dssim_part - b.dssim_part) <= 1e-9


def test_event_loss_gradients(rng):
    s, e = rng.uniform(0.1, 1, (8, 9, 3)), rng.uniform(0.1, 1, (8, 9, 3))
    f, bayer = frame_of(rng.normal(0, 0.3, (8, 9))), BayerMask(8, 9)
    cfg = LossConfig(gamma=2.0, dssim_range=1.5)
    lv = event_loss(s, e, f, bayer, cfg)
    fd_s = central_diff(lambda x: event_loss(x.reshape(s.shape), e, f, bayer, cfg).total, s.ravel())
    fd_e = central_diff(lambda x: event_loss(s, x.reshape(e.shape), f, bayer, cfg).total, e.ravel())
    assert grad_agreement(lv.d_image_start, fd_s, rel=1e-4, abs_=1e-9)[0] >= 0.99
    assert grad_agreement(lv.d_image_end, fd_e, rel=1e-4, abs_=1e-9)[0] >= 0.99
    fd_g = central_diff(lambda g: event_loss(s, e, f, bayer, replace(cfg, gamma=float(g[0]))).total, [2.0])
    assert lv.d_gamma == pytest.approx(fd_g[0], rel=1e-5)


def test_event_loss_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        event_loss(np.ones((4, 4, 3)), np.ones((4, 4, 3)), frame_of(np.zeros((4, 5))), BayerMask(4, 4))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lambda_dssim=1.5)
    with pytest.raises(ValueError):
        LossConfig(gamma=0.0)
    with pytest.raises(ValueError):
        LossConfig(ssim_window=10)


# -- blur loss -------------------------------------------------------------------------


def test_blur_loss_zero_when_equal(rng):
    img = rng.random((H, W, 3))
    assert blur_loss(img, img).total == pytest.approx(0.0, abs=1e-12)


def test_blur_loss_constant_difference():
    assert blur_loss(np.full((H, W, 3), 0.7), np.full((H, W, 3), 0.5)).l1_part == pytest.approx(0.2)


def test_blur_loss_gradient(rng):
    a, b = rng.random((8, 9, 3)), rng.random((8, 9, 3))
    lv = blur_loss(a, b)
    fd = central_diff(lambda x: blur_loss(x.reshape(a.shape), b).total, a.ravel())
    np.testing.assert_allclose(lv.d_blur_image.ravel(), fd, rtol=1e-4, atol=1e-10)


def test_blur_loss_shape_mismatch():
    with pytest.raises(DimensionMismatch):
        blur_loss(np.zeros((3, 3, 3)), np.zeros((3, 4, 3)))
