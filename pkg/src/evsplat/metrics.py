"""Evaluation with affine alignment in log space.

Event-trained models recover radiance only up to a per-channel gain and
exponent, so renders are mapped through ``exp(a * log(x) + b)`` before
scoring. ``(a, b)`` per channel is a least-squares fit over all views at once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch
from .losses import LossConfig, ssim

# MSE below this is treated as an exact match (PSNR reported as infinite)
EXACT_MSE = 1e-20


@dataclass
class EvalReport:
    psnr: list
    ssim: list
    coeffs: np.ndarray  # (C, 2) rows of (a, b)
    infinite: list = field(default_factory=list)

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_dict(self) -> dict:
        def num(x):
            return "inf" if math.isinf(x) else float(x)

        return dict(
            psnr=[num(p) for p in self.psnr],
            ssim=[float(s) for s in self.ssim],
            psnr_infinite=[bool(f) for f in self.infinite],
            alignment=[dict(a=float(a), b=float(b)) for a, b in self.coeffs],
            psnr_mean=num(self.psnr_mean),
            ssim_mean=self.ssim_mean,
        )


def psnr(a, b, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse <= EXACT_MSE:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _stack(images, name) -> np.ndarray:
    arrs = [np.asarray(getattr(im, "rgb", im), dtype=np.float64) for im in images]
    if not arrs:
        raise DimensionMismatch(f"no {name} images")
    shape = arrs[0].shape
    for k, a in enumerate(arrs):
        if a.shape != shape:
            raise DimensionMismatch(f"{name}[{k}] has shape {a.shape}, expected {shape}")
    out = np.stack(arrs)
    return out[..., None] if out.ndim == 3 else out


def fit_log_alignment(rendered: np.ndarray, truth: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Per-channel ``(a, b)`` minimizing ``sum (a log x + b - log y)^2`` over every pixel of every view."""
    x = np.log(np.maximum(rendered, eps))
    y = np.log(np.maximum(truth, eps))
    coeffs = np.empty((x.shape[-1], 2))
    for c in range(x.shape[-1]):
        xc, yc = x[..., c].ravel(), y[..., c].ravel()
        A = np.stack([xc, np.ones_like(xc)], axis=1)
        coeffs[c] = np.linalg.lstsq(A, yc, rcond=None)[0]
    return coeffs


def align(rendered: np.ndarray, coeffs: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.log(np.maximum(rendered, eps))
    return np.clip(np.exp(coeffs[:, 0] * x + coeffs[:, 1]), 0.0, 1.0)


def evaluate(rendered, ground_truth, eps: float = 1e-5, aligned: bool = True,
             clamp_before_fit: bool = False, cfg: LossConfig | None = None) -> EvalReport:
    """PSNR (peak 1) and SSIM of renders against ground truth.

    With ``aligned=False`` renders are only clamped to [0, 1], which is the
    linear-color score. ``clamp_before_fit`` clamps renders to [0, 1] before
    the log fit.
    """
    x = _stack(rendered, "rendered")
    y = _stack(ground_truth, "ground_truth")
    if len(x) != len(y):
        raise DimensionMismatch(f"{len(x)} renders vs {len(y)} ground-truth images")
    if x.shape != y.shape:
        raise DimensionMismatch(f"render shape {x.shape[1:]} vs ground truth {y.shape[1:]}")
    n_ch = x.shape[-1]
    if aligned:
        src = np.clip(x, 0.0, 1.0) if clamp_before_fit else x
        coeffs = fit_log_alignment(src, y, eps)
        out = align(src, coeffs, eps)
    else:
        coeffs = np.tile([1.0, 0.0], (n_ch, 1))
        out = np.clip(x, 0.0, 1.0)
    cfg = cfg or LossConfig()
    ps, ss = [], []
    for o, g in zip(out, y):
        ps.append(psnr(o, g))
        ss.append(ssim(o[..., 0], g[..., 0], cfg) if n_ch == 1 else ssim(o, g, cfg))
    return EvalReport(ps, ss, coeffs, [math.isinf(p) for p in ps])
