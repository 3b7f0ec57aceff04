"""Tile-based differentiable Gaussian rasterizer.

Forward pass: project every splat, sort globally by ``(depth, index)``, bin
into 16x16 tiles and alpha-blend front to back. The backward pass replays the
recorded per-pixel decisions and chains back through projection, covariance,
SH color and the activations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core_math import (
    COV2D_REGULARIZER,
    NEAR_PLANE,
    CameraView,
    batch_covariance,
    batch_covariance_vjp,
    covariance_from_factors,
    eval_sh,
    project_gaussian,
    sh_basis_grad,
    sh_num_coeffs,
)
from .errors import BehindCamera, EmptyCloud, MissingForwardState
from .gaussians import GaussianCloud, GradientBundle, sigmoid

ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
TILE_SIZE = 16
DET_EPS = 1e-12


@dataclass
class RenderSettings:
    background: tuple = (0.0, 0.0, 0.0)
    alpha_min: float = ALPHA_MIN
    t_min: float = T_MIN
    tile_size: int = TILE_SIZE
    near: float = NEAR_PLANE
    sh_degree: int | None = None  # active band limit; None uses the cloud's degree


@dataclass
class _Projection:
    valid: np.ndarray
    p_cam: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    opac: np.ndarray
    color: np.ndarray
    cov3d: np.ndarray
    R: np.ndarray
    s: np.ndarray
    dirs: np.ndarray
    dir_len: np.ndarray
    basis: np.ndarray
    basis_grad: np.ndarray
    unclamped: np.ndarray
    degree: int


@dataclass
class _ForwardState:
    view: CameraView
    n: int
    settings: RenderSettings
    proj: _Projection
    offsets: np.ndarray
    ids: np.ndarray
    last: np.ndarray


@dataclass
class RenderedImage:
    rgb: np.ndarray
    alpha: np.ndarray
    n_contrib: np.ndarray
    depth: np.ndarray
    state: object = field(default=None, repr=False)


@dataclass
class BlurConfig:
    """Sub-poses spanning an exposure; the rendered blur is their mean."""

    sub_poses: list
    n_eiw: int | None = None

    def __post_init__(self):
        self.sub_poses = list(self.sub_poses)
        if self.n_eiw is None:
            self.n_eiw = len(self.sub_poses)
        if self.n_eiw < 1 or len(self.sub_poses) != self.n_eiw:
            raise ValueError(f"need exactly n_eiw={self.n_eiw} sub-poses, got {len(self.sub_poses)}")
        times = [v.time for v in self.sub_poses]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("sub-poses must be time-ordered")

    @classmethod
    def from_exposure(cls, start: CameraView, end: CameraView, n_eiw: int) -> "BlurConfig":
        """Sub-poses at the midpoints of ``n_eiw`` equal windows between two poses."""
        mids = (np.arange(n_eiw) + 0.5) / n_eiw
        return cls([start.interpolate(end, float(t)) for t in mids], n_eiw)


def _settings(settings, overrides) -> RenderSettings:
    s = RenderSettings() if settings is None else settings
    if overrides:
        s = RenderSettings(**{**s.__dict__, **overrides})
    return s


def _preprocess(cloud: GaussianCloud, view: CameraView, st: RenderSettings) -> _Projection:
    n = len(cloud)
    degree = cloud.sh_degree if st.sh_degree is None else min(st.sh_degree, cloud.sh_degree)
    cov3d, R, s = batch_covariance(cloud.log_scales, cloud.rotations)
    W = view.R
    p = cloud.means @ W.T + view.translation
    z = p[:, 2]
    valid = z > st.near
    zs = np.where(valid, z, 1.0)
    x, y = p[:, 0], p[:, 1]
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = view.fx / zs
    J[:, 0, 2] = -view.fx * x / zs**2
    J[:, 1, 1] = view.fy / zs
    J[:, 1, 2] = -view.fy * y / zs**2
    T = J @ W
    cov2d = T @ cov3d @ np.transpose(T, (0, 2, 1))
    cov2d = 0.5 * (cov2d + np.transpose(cov2d, (0, 2, 1)))
    cov2d[:, 0, 0] += COV2D_REGULARIZER
    cov2d[:, 1, 1] += COV2D_REGULARIZER
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    valid &= det > DET_EPS
    det_s = np.where(valid, det, 1.0)
    conic = np.stack([c / det_s, -b / det_s, a / det_s], axis=1)
    mean2d = np.stack([view.fx * x / zs + view.cx, view.fy * y / zs + view.cy], axis=1)

    v = cloud.means - view.center
    dir_len = np.linalg.norm(v, axis=1)
    dirs = v / np.maximum(dir_len, 1e-12)[:, None]
    basis, basis_grad = sh_basis_grad(dirs, degree)
    k = sh_num_coeffs(degree)
    raw = np.einsum("nk,nkc->nc", basis, cloud.sh[:, :k, :]) + 0.5
    unclamped = raw >= 0.0
    color = np.maximum(raw, 0.0)
    return _Projection(valid, p, mean2d, cov2d, conic, z, sigmoid(cloud.opacity_logits), color,
                       cov3d, R, s, dirs, dir_len, basis, basis_grad, unclamped, degree)


def _extent(proj: _Projection, alpha_min: float) -> np.ndarray:
    """Half-size of the pixel box outside which alpha < alpha_min."""
    n = proj.opac.shape[0]
    if alpha_min <= 0.0:
        return np.full((n, 2), np.inf)
    with np.errstate(divide="ignore"):
        r2 = 2.0 * np.log(proj.opac / alpha_min)
    r2 = np.where(r2 > 0.0, r2, 0.0)
    ext = np.sqrt(r2[:, None] * np.stack([proj.cov2d[:, 0, 0], proj.cov2d[:, 1, 1]], axis=1)) + 1.0
    ext[proj.opac < alpha_min] = -1.0
    return ext


def render(cloud: GaussianCloud, view: CameraView, settings: RenderSettings | None = None,
           **overrides) -> RenderedImage:
    """Alpha-blend the cloud into ``view``; keyword overrides patch ``settings``."""
    if len(cloud) == 0:
        raise EmptyCloud("cannot render an empty cloud")
    st = _settings(settings, overrides)
    proj = _preprocess(cloud, view, st)
    ext = _extent(proj, st.alpha_min)
    keep = proj.valid & (ext[:, 0] >= 0)
    idx = np.nonzero(keep)[0]
    order = idx[np.lexsort((idx, proj.depth[idx]))].astype(np.int64)
    offsets, ids = _kernels.bin_tiles(order, proj.mean2d, ext, view.width, view.height, st.tile_size)
    bg = np.asarray(st.background, dtype=np.float64).reshape(3)
    rgb, alpha, depth_acc, n_contrib, last = _kernels.forward_tiles(
        offsets, ids, proj.mean2d, proj.conic, proj.opac, proj.color, proj.depth, bg,
        view.width, view.height, st.tile_size, st.alpha_min, st.t_min)
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(alpha > 0, depth_acc / alpha, 0.0)
    state = _ForwardState(view, len(cloud), st, proj, offsets, ids, last)
    return RenderedImage(rgb, alpha, n_contrib, depth, state)


def render_backward(cloud: GaussianCloud, view: CameraView, upstream: np.ndarray,
                    forward: RenderedImage | None = None) -> GradientBundle:
    """Gradient of ``sum(upstream * render(cloud, view).rgb)`` w.r.t. every parameter.

    ``forward`` must be the paired forward result for the same cloud and view.
    """
    state = getattr(forward, "state", None)
    if state is None:
        raise MissingForwardState("render_backward needs the RenderedImage of the paired forward pass")
    if state.n != len(cloud) or not _same_view(state.view, view):
        raise MissingForwardState("forward state was recorded for a different cloud or view")
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    if upstream.shape != (view.height, view.width, 3):
        raise ValueError(f"upstream shape {upstream.shape} != {(view.height, view.width, 3)}")
    st, proj = state.settings, state.proj
    out = GradientBundle.zeros_like(cloud)
    if state.ids.shape[0] == 0 or not np.any(upstream):
        return out
    bg = np.asarray(st.background, dtype=np.float64).reshape(3)
    per_entry = _kernels.backward_tiles(
        state.offsets, state.ids, state.last, proj.mean2d, proj.conic, proj.opac, proj.color,
        bg, upstream, view.width, view.height, st.tile_size, st.alpha_min)
    g = np.zeros((len(cloud), 9))
    np.add.at(g, state.ids, per_entry)
    _preprocess_backward(cloud, view, proj, g, out)
    out.visible[np.unique(state.ids)] = True
    return out


def _same_view(a: CameraView, b: CameraView) -> bool:
    if a is b:
        return True
    return (a.rotation == b.rotation and np.array_equal(a.translation, b.translation)
            and (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (b.fx, b.fy, b.cx, b.cy, b.width, b.height))


def _preprocess_backward(cloud, view, proj: _Projection, g, out: GradientBundle):
    vis = proj.valid
    d_mean2d, d_conic, d_opac, d_color = g[:, 0:2], g[:, 2:5], g[:, 5], g[:, 6:9]
    out.d_mean2d[:] = d_mean2d

    # conic = inverse(cov2d); the off-diagonal entry appears twice in the quadratic form
    Q = np.empty((len(cloud), 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = d_conic[:, 0], d_conic[:, 1] / 2, d_conic[:, 1] / 2, d_conic[:, 2]
    inv = np.empty_like(Q)
    inv[:, 0, 0], inv[:, 0, 1], inv[:, 1, 0], inv[:, 1, 1] = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 1], proj.conic[:, 2]
    d_cov2d = -inv @ Q @ inv

    W = view.R
    p = proj.p_cam
    z = np.where(vis, p[:, 2], 1.0)
    x, y = p[:, 0], p[:, 1]
    fx, fy = view.fx, view.fy
    J = np.zeros((len(cloud), 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / z**2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / z**2
    T = J @ W
    d_cov3d = np.transpose(T, (0, 2, 1)) @ d_cov2d @ T
    dT = 2.0 * d_cov2d @ T @ proj.cov3d
    dJ = dT @ W.T

    dp = np.zeros_like(p)
    dp[:, 0] = dJ[:, 0, 2] * (-fx / z**2) + d_mean2d[:, 0] * fx / z
    dp[:, 1] = dJ[:, 1, 2] * (-fy / z**2) + d_mean2d[:, 1] * fy / z
    dp[:, 2] = (dJ[:, 0, 0] * (-fx / z**2) + dJ[:, 0, 2] * (2 * fx * x / z**3)
                + dJ[:, 1, 1] * (-fy / z**2) + dJ[:, 1, 2] * (2 * fy * y / z**3)
                - d_mean2d[:, 0] * fx * x / z**2 - d_mean2d[:, 1] * fy * y / z**2)
    d_mean = dp @ W

    d_raw = d_color * proj.unclamped
    k = proj.basis.shape[1]
    out.d_sh[:, :k, :] = proj.basis[:, :, None] * d_raw[:, None, :]
    d_basis = np.einsum("nkc,nc->nk", cloud.sh[:, :k, :], d_raw)
    d_dir = np.einsum("nk,nkj->nj", d_basis, proj.basis_grad)
    d_dir -= proj.dirs * np.sum(proj.dirs * d_dir, axis=1, keepdims=True)
    d_mean += d_dir / np.maximum(proj.dir_len, 1e-12)[:, None]

    d_log_scale, d_rot = batch_covariance_vjp(d_cov3d, proj.R, proj.s, cloud.rotations)
    o = proj.opac
    d_logit = d_opac * o * (1.0 - o)

    mask = vis[:, None]
    out.d_mean[:] = np.where(mask, d_mean, 0.0)
    out.d_log_scale[:] = np.where(mask, d_log_scale, 0.0)
    out.d_rotation[:] = np.where(mask, d_rot, 0.0)
    out.d_opacity_logit[:] = np.where(vis, d_logit, 0.0)
    out.d_sh[~vis] = 0.0
    out.d_mean2d[~vis] = 0.0


def render_blur(cloud: GaussianCloud, config: BlurConfig, settings: RenderSettings | None = None,
                **overrides) -> RenderedImage:
    """Mean of sharp renders over the exposure sub-poses."""
    renders = [render(cloud, v, settings, **overrides) for v in config.sub_poses]
    n = config.n_eiw
    rgb = renders[0].rgb.copy()
    alpha = renders[0].alpha.copy()
    depth = renders[0].depth.copy()
    for r in renders[1:]:
        rgb += r.rgb
        alpha += r.alpha
        depth += r.depth
    if n > 1:
        rgb /= n
        alpha /= n
        depth /= n
    counts = np.max([r.n_contrib for r in renders], axis=0)
    return RenderedImage(rgb, alpha, counts, depth, state=renders)


def render_blur_backward(cloud: GaussianCloud, config: BlurConfig, upstream: np.ndarray,
                         forward: RenderedImage | None = None) -> GradientBundle:
    subs = getattr(forward, "state", None)
    if not isinstance(subs, list) or len(subs) != config.n_eiw:
        raise MissingForwardState("render_blur_backward needs the paired render_blur result")
    total = None
    for view, r in zip(config.sub_poses, subs):
        g = render_backward(cloud, view, upstream, r)
        total = g if total is None else total + g
    return total if config.n_eiw == 1 else total.scaled(1.0 / config.n_eiw)


def render_reference(cloud: GaussianCloud, view: CameraView, background=(0.0, 0.0, 0.0),
                     alpha_min: float = 0.0, t_min: float = 0.0, near: float = NEAR_PLANE,
                     sh_degree: int | None = None) -> np.ndarray:
    """Naive oracle: per-splat scalar projection, one global depth sort, no tiles.

    With the default thresholds every splat contributes to every pixel and
    blending never terminates early.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot render an empty cloud")
    degree = cloud.sh_degree if sh_degree is None else min(sh_degree, cloud.sh_degree)
    k = sh_num_coeffs(degree)
    items = []
    for i in range(len(cloud)):
        g = cloud[i]
        cov3d = covariance_from_factors(g.scale, g.rotation)
        try:
            m2, c2, depth = project_gaussian(g.mean, cov3d, view, near)
        except BehindCamera:
            continue
        if np.linalg.det(c2) <= DET_EPS:
            continue
        d = g.mean - view.center
        color = eval_sh(g.sh[:k], d / np.linalg.norm(d))
        items.append((depth, i, m2, np.linalg.inv(c2), g.opacity, color))
    items.sort(key=lambda it: (it[0], it[1]))

    ys, xs = np.mgrid[0:view.height, 0:view.width].astype(np.float64)
    rgb = np.zeros((view.height, view.width, 3))
    T = np.ones((view.height, view.width))
    live = np.ones_like(T, dtype=bool)
    for _, _, m2, Q, o, color in items:
        dx, dy = xs - m2[0], ys - m2[1]
        alpha = o * np.exp(-0.5 * (Q[0, 0] * dx * dx + Q[1, 1] * dy * dy) - Q[0, 1] * dx * dy)
        use = live & (alpha >= alpha_min)
        a = np.where(use, alpha, 0.0)
        rgb += color[None, None, :] * (a * T)[..., None]
        T = np.where(use, T * (1.0 - a), T)
        if t_min > 0.0:
            live &= ~(T < t_min)
    return rgb + T[..., None] * np.asarray(background, dtype=np.float64)[None, None, :]
