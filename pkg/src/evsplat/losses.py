"""Differentiable losses on rendered images.

Each loss returns a :class:`LossValue` carrying the scalar parts and the
gradient with respect to the rendered RGB grids (and the gamma scalar).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DimensionMismatch
from .events import BayerMask, EventFrame


@dataclass
class LossConfig:
    lambda_dssim: float = 0.2
    gamma: float = 2.2
    log_floor: float = 1e-5
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2
    dssim_range: float = 1.0  # half-width R of the shared [-R, R] -> [0, 1] map

    def __post_init__(self):
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ValueError("lambda_dssim must lie in [0, 1]")
        if self.gamma <= 0 or self.log_floor <= 0 or self.dssim_range <= 0:
            raise ValueError("gamma, log_floor and dssim_range must be positive")
        if self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be odd")


@dataclass
class LossValue:
    total: float
    l1_part: float
    dssim_part: float
    d_image_start: np.ndarray | None = None
    d_image_end: np.ndarray | None = None
    d_blur_image: np.ndarray | None = None
    d_gamma: float = 0.0


def _rgb(image) -> np.ndarray:
    return np.asarray(getattr(image, "rgb", image), dtype=np.float64)


def log_radiance(image, bayer: BayerMask, floor: float = 1e-5) -> np.ndarray:
    """``ln(max(selected channel, floor))`` per pixel (channel mean when the mask is off)."""
    sel = np.sum(_rgb(image) * bayer.one_hot(), axis=2)
    return np.log(np.maximum(sel, floor))


def log_radiance_backward(image, bayer: BayerMask, d_out: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    weights = bayer.one_hot()
    sel = np.sum(_rgb(image) * weights, axis=2)
    d_sel = np.where(sel > floor, d_out / np.maximum(sel, floor), 0.0)
    return weights * d_sel[..., None]


@lru_cache(maxsize=16)
def _gauss_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - size // 2
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = correlate1d(img, kernel, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, kernel, axis=1, mode="constant", cval=0.0)


def ssim_map(a: np.ndarray, b: np.ndarray, cfg: LossConfig, want_grad: bool = False):
    """Gaussian-windowed SSIM map of two single-channel grids (zero padded).

    With ``want_grad`` also returns ``d mean(SSIM) / d a``.
    """
    k = _gauss_kernel(cfg.ssim_window, cfg.ssim_sigma)
    c1, c2 = cfg.ssim_c1, cfg.ssim_c2
    mu_a, mu_b = _blur(a, k), _blur(b, k)
    s_aa, s_bb, s_ab = _blur(a * a, k), _blur(b * b, k), _blur(a * b, k)
    var_a, var_b = s_aa - mu_a**2, s_bb - mu_b**2
    cov = s_ab - mu_a * mu_b
    A1, A2 = 2 * mu_a * mu_b + c1, 2 * cov + c2
    B1, B2 = mu_a**2 + mu_b**2 + c1, var_a + var_b + c2
    S = (A1 * A2) / (B1 * B2)
    if not want_grad:
        return S, None
    g = 1.0 / S.size
    den = B1 * B2
    # partials of S w.r.t. the blurred statistics
    d_mu_a = g * ((2 * mu_b * A2 - 2 * mu_b * A1) / den - S * (2 * mu_a / B1 - 2 * mu_a / B2))
    d_saa = g * (-S / B2)
    d_sab = g * (2 * A1 / den)
    grad = _blur(d_mu_a, k) + 2 * a * _blur(d_saa, k) + b * _blur(d_sab, k)
    return S, grad


def dssim(a: np.ndarray, b: np.ndarray, cfg: LossConfig | None = None):
    """``(1 - mean SSIM) / 2`` and its gradient w.r.t. ``a``.

    Accepts ``(H, W)`` or ``(H, W, C)`` grids; channels are scored separately
    and averaged.
    """
    cfg = cfg or LossConfig()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"dssim inputs differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        S, grad = ssim_map(a, b, cfg, want_grad=True)
        return float((1.0 - S.mean()) / 2.0), -0.5 * grad
    vals, grads = [], []
    for c in range(a.shape[2]):
        S, grad = ssim_map(a[..., c], b[..., c], cfg, want_grad=True)
        vals.append(S.mean())
        grads.append(grad)
    n = a.shape[2]
    return float((1.0 - np.mean(vals)) / 2.0), -0.5 * np.stack(grads, axis=2) / n


def ssim(a: np.ndarray, b: np.ndarray, cfg: LossConfig | None = None) -> float:
    """Mean SSIM over pixels (and channels)."""
    cfg = cfg or LossConfig()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return float(ssim_map(a, b, cfg)[0].mean())
    return float(np.mean([ssim_map(a[..., c], b[..., c], cfg)[0].mean() for c in range(a.shape[2])]))


def event_loss(render_start, render_end, frame: EventFrame, bayer: BayerMask,
               cfg: LossConfig | None = None) -> LossValue:
    """Log-radiance change between two renders against an accumulated event frame."""
    cfg = cfg or LossConfig()
    target = np.asarray(frame.accumulated, dtype=np.float64)
    rs, re = _rgb(render_start), _rgb(render_end)
    if rs.shape != re.shape or rs.shape[:2] != target.shape or target.shape != bayer.shape:
        raise DimensionMismatch(f"renders {rs.shape}/{re.shape}, frame {target.shape}, mask {bayer.shape}")
    g = cfg.gamma
    diff_log = log_radiance(re, bayer, cfg.log_floor) - log_radiance(rs, bayer, cfg.log_floor)
    pred = diff_log / g
    resid = pred - target
    lam = cfg.lambda_dssim
    l1 = float(np.mean(np.abs(resid)))
    d_pred = (1.0 - lam) * np.sign(resid) / resid.size
    scale = 1.0 / (2.0 * cfg.dssim_range)
    ds, d_a = dssim((pred + cfg.dssim_range) * scale, (target + cfg.dssim_range) * scale, cfg)
    d_pred = d_pred + lam * scale * d_a
    total = (1.0 - lam) * l1 + lam * ds
    d_log = d_pred / g
    return LossValue(
        total=float(total), l1_part=l1, dssim_part=float(ds),
        d_image_start=log_radiance_backward(rs, bayer, -d_log, cfg.log_floor),
        d_image_end=log_radiance_backward(re, bayer, d_log, cfg.log_floor),
        d_gamma=float(-np.sum(d_pred * pred) / g),
    )


def blur_loss(render_blur, target: np.ndarray, cfg: LossConfig | None = None) -> LossValue:
    """Linear-color L1 + DSSIM between a blur-aware render and a blurred photo."""
    cfg = cfg or LossConfig()
    pred = _rgb(render_blur)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionMismatch(f"render {pred.shape} vs target {target.shape}")
    lam = cfg.lambda_dssim
    resid = pred - target
    l1 = float(np.mean(np.abs(resid)))
    ds, d_ds = dssim(pred, target, cfg)
    grad = (1.0 - lam) * np.sign(resid) / resid.size + lam * d_ds
    return LossValue(float((1.0 - lam) * l1 + lam * ds), l1, ds, d_blur_image=grad)
