"""Training drivers: Adam, density control, progressive rounds, blur refinement."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.spatial import cKDTree

from .core_math import batch_quat_to_rotmat
from .errors import EmptyCloud, EmptyDataset, EmptyRefinementSet, NoSurvivors
from .events import BayerMask, EventCameraModel, EventStream, accumulate, dssim_range, slice_stream
from .gaussians import GaussianCloud, logit
from .losses import LossConfig, blur_loss, event_loss
from .render import RenderSettings, render, render_backward, render_blur, render_blur_backward

log = logging.getLogger(__name__)

PARAM_NAMES = ("means", "log_scales", "rotations", "opacity_logits", "sh")
GRAD_NAMES = dict(means="d_mean", log_scales="d_log_scale", rotations="d_rotation",
                  opacity_logits="d_opacity_logit", sh="d_sh")


@dataclass
class TrainConfig:
    iterations: int = 30_000
    lr_means: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    spatial_lr_scale: float = 1.0
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_gamma: float = 1e-3
    learn_gamma: bool = True
    densify_grad_threshold: float = 2e-4
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int = 15_000
    percent_dense: float = 0.01
    scene_extent: float = 1.0
    prune_opacity: float = 0.005
    opacity_reset_interval: int = 3000
    max_splats: int | None = None
    alpha_pro: float = 0.9
    rounds: int = 2
    carry_params: bool = False
    eta_alpha: float = 0.05
    refine_iterations: int = 200
    init_count: int = 100_000
    init_cube_scale: float = 0.2
    init_positive_z: bool = False
    sh_degree: int = 3
    sh_band_interval: int = 1000
    background: tuple = (0.0, 0.0, 0.0)
    lambda_dssim: float = 0.2
    gamma: float = 2.2
    log_floor: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        rates = [self.lr_means, self.lr_means_final, self.lr_sh, self.lr_opacity, self.lr_scale, self.lr_rotation]
        if min(rates) <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.alpha_pro < 1.0:
            raise ValueError("alpha_pro must lie in [0, 1)")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.init_count <= 0:
            raise ValueError("init_count must be positive")
        self.background = tuple(float(v) for v in np.broadcast_to(self.background, 3))

    def loss_config(self, gamma: float | None = None, dssim_range: float = 1.0) -> LossConfig:
        return LossConfig(lambda_dssim=self.lambda_dssim, gamma=self.gamma if gamma is None else gamma,
                          log_floor=self.log_floor, dssim_range=dssim_range)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class AdamState:
    """Adam moments per parameter array; rows track splats through density changes."""

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-15

    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params: dict, grads: dict, lrs: dict) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, lr in lrs.items():
            if lr == 0.0 or name not in grads:
                continue
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def keep_rows(self, mask: np.ndarray) -> None:
        for d in (self.m, self.v):
            for k in PARAM_NAMES:
                if k in d:
                    d[k] = d[k][mask]

    def append_rows(self, n: int) -> None:
        for d in (self.m, self.v):
            for k in PARAM_NAMES:
                if k in d:
                    d[k] = np.concatenate([d[k], np.zeros((n,) + d[k].shape[1:])])

    def reset_rows(self, name: str) -> None:
        self.m[name][:] = 0.0
        self.v[name][:] = 0.0

    def rows(self) -> int:
        return self.m["means"].shape[0]


# ---------------------------------------------------------------------------
# data


@dataclass
class EventDataset:
    """Sliced windows with the camera pose at each window's start and end."""

    windows: list
    start_views: list
    end_views: list
    model: EventCameraModel
    bayer: BayerMask
    dssim_range: float = 1.0

    def __post_init__(self):
        if not (len(self.windows) == len(self.start_views) == len(self.end_views)):
            raise ValueError("windows and endpoint views must align")

    def __len__(self):
        return len(self.windows)

    @property
    def width(self) -> int:
        return self.bayer.width

    @property
    def height(self) -> int:
        return self.bayer.height

    @classmethod
    def from_stream(cls, stream: EventStream, pose_track: list, model: EventCameraModel,
                    color: bool = True) -> "EventDataset":
        """Slice ``stream`` and look up endpoint poses on ``pose_track`` (times in seconds)."""
        from .sim import pose_at

        windows = slice_stream(stream, model)
        starts = [pose_at(pose_track, w.start_time * 1e-6) for w in windows]
        ends = [pose_at(pose_track, w.end_time * 1e-6) for w in windows]
        bayer = BayerMask(stream.height, stream.width, enabled=color)
        rng = dssim_range(windows, model, stream.width, stream.height)
        return cls(windows, starts, ends, model, bayer, rng)

    def frame(self, index: int, seed) -> "object":
        return accumulate(self.windows[index], self.model, seed, self.width, self.height)


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    round_boundaries: list = field(default_factory=list)
    gamma: float | None = None

    header = ("iter", "loss", "l1", "dssim", "num_splats", "gamma")

    def to_csv(self) -> str:
        lines = [",".join(self.header)]
        for r in self.rows:
            lines.append(f"{r[0]},{r[1]!r},{r[2]!r},{r[3]!r},{r[4]},{r[5]!r}")
        return "\n".join(lines) + "\n"

    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])


# ---------------------------------------------------------------------------
# initialization and density control


def init_scales(means: np.ndarray) -> np.ndarray:
    """Log-scale from the mean distance to the 3 nearest neighbours."""
    n = means.shape[0]
    if n == 1:
        return np.full((1, 3), np.log(0.01))
    k = min(4, n)
    dist, _ = cKDTree(means).query(means, k=k)
    d2 = np.mean(dist[:, 1:] ** 2, axis=1)
    d = np.sqrt(np.maximum(d2, 1e-7))
    return np.repeat(np.log(d)[:, None], 3, axis=1)


def cloud_from_means(means: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> GaussianCloud:
    n = means.shape[0]
    k = (cfg.sh_degree + 1) ** 2
    sh = np.zeros((n, k, 3))
    from .sim import dc_from_rgb
    sh[:, 0, :] = dc_from_rgb(rng.uniform(0.0, 1.0, size=(n, 3)))
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(means.copy(), init_scales(means), rot, np.full(n, float(logit(0.1))), sh)


def init_random_cloud(cfg: TrainConfig, rng: np.random.Generator | int | None = None) -> GaussianCloud:
    """``init_count`` splats uniform in the cube ``[-l, l]^3`` (optionally shifted to z > 0)."""
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    l = cfg.init_cube_scale
    means = rng.uniform(-l, l, size=(cfg.init_count, 3))
    if cfg.init_positive_z:
        means[:, 2] += l
    return cloud_from_means(means, cfg, rng)


def densify_and_prune(cloud: GaussianCloud, grad_stats: np.ndarray, cfg: TrainConfig,
                      adam: AdamState | None = None, rng: np.random.Generator | None = None) -> GaussianCloud:
    """Clone small / split large splats with large screen-space gradients, then prune.

    Split children are sampled inside the parent and shrink by 1.6. Raises
    :class:`EmptyCloud` if nothing survives pruning.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n = len(cloud)
    grad_stats = np.asarray(grad_stats, dtype=np.float64).reshape(n)
    selected = grad_stats > cfg.densify_grad_threshold
    if cfg.max_splats is not None:
        room = max(0, cfg.max_splats - n)
        if selected.sum() > room:
            keep_idx = np.argsort(-grad_stats, kind="stable")[:room]
            selected = np.zeros(n, dtype=bool)
            selected[keep_idx] = True
    big = np.max(cloud.scales, axis=1) > cfg.percent_dense * cfg.scene_extent
    clone = selected & ~big
    split = selected & big

    parts = [cloud]
    new_rows = 0
    if clone.any():
        parts.append(cloud.subset(clone))
        new_rows += int(clone.sum())
    if split.any():
        parent = cloud.subset(split)
        children = []
        for _ in range(2):
            offs = rng.normal(size=(len(parent), 3)) * parent.scales
            R = batch_quat_to_rotmat(parent.rotations)
            child = parent.copy()
            child.means = parent.means + np.einsum("nij,nj->ni", R, offs)
            child.log_scales = parent.log_scales - np.log(1.6)
            children.append(child)
        parts.extend(children)
        new_rows += 2 * len(parent)
    out = parts[0]
    for p in parts[1:]:
        out = out.concat(p)
    keep = np.ones(len(out), dtype=bool)
    keep[:n][split] = False
    keep &= out.opacities >= cfg.prune_opacity
    if not keep.any():
        raise EmptyCloud("densify_and_prune removed every splat")
    if adam is not None:
        adam.append_rows(new_rows)
        adam.keep_rows(keep)
    return out.subset(keep)


def progressive_filter(cloud: GaussianCloud, alpha_pro: float) -> np.ndarray:
    """Means of splats whose opacity exceeds ``alpha_pro``."""
    sel = cloud.opacities > alpha_pro
    if not sel.any():
        raise NoSurvivors(f"no splat has opacity above {alpha_pro}")
    return cloud.means[sel].copy()


# ---------------------------------------------------------------------------
# training


def _means_lr(cfg: TrainConfig, it: int, total: int) -> float:
    start = cfg.lr_means * cfg.spatial_lr_scale
    final = cfg.lr_means_final * cfg.spatial_lr_scale
    u = min(max(it / max(total, 1), 0.0), 1.0)
    return float(np.exp((1 - u) * np.log(start) + u * np.log(final)))


def _bundle_dict(bundle) -> dict:
    return {k: getattr(bundle, v) for k, v in GRAD_NAMES.items()}


def train_round(cloud: GaussianCloud, dataset: EventDataset, cfg: TrainConfig,
                training_log: TrainingLog | None = None, round_index: int = 0,
                gamma: float | None = None) -> GaussianCloud:
    """Minimize the event loss over ``cfg.iterations`` sampled windows.

    Returns a new cloud; the input is not modified. Per-iteration losses and
    the final gamma go to ``training_log`` when given.
    """
    if len(dataset) == 0:
        raise EmptyDataset("no event windows to train on")
    cloud = cloud.copy()
    if cfg.iterations <= 0:
        return cloud
    training_log = training_log if training_log is not None else TrainingLog()
    gamma = cfg.gamma if gamma is None else gamma
    rng = np.random.default_rng([cfg.seed, round_index, 1])
    adam = AdamState(cloud.params())
    g_m = g_v = 0.0
    n_win = len(dataset)
    order = rng.permutation(n_win)
    pos = 0
    grad_accum = np.zeros(len(cloud))
    grad_count = np.zeros(len(cloud))
    half = np.array([dataset.width / 2.0, dataset.height / 2.0])

    for it in range(cfg.iterations):
        if pos == n_win:
            order, pos = rng.permutation(n_win), 0
        w = int(order[pos])
        pos += 1
        active = min(cfg.sh_degree, it // max(cfg.sh_band_interval, 1))
        st = RenderSettings(background=cfg.background, sh_degree=active)
        frame = dataset.frame(w, [cfg.seed, round_index, it, w])
        v0, v1 = dataset.start_views[w], dataset.end_views[w]
        r0, r1 = render(cloud, v0, st), render(cloud, v1, st)
        lv = event_loss(r0, r1, frame, dataset.bayer, cfg.loss_config(gamma, dataset.dssim_range))
        g0 = render_backward(cloud, v0, lv.d_image_start, r0)
        g1 = render_backward(cloud, v1, lv.d_image_end, r1)
        grads = g0 + g1
        for gb in (g0, g1):
            norm = np.linalg.norm(gb.d_mean2d * half, axis=1)
            grad_accum += np.where(gb.visible, norm, 0.0)
            grad_count += gb.visible
        params = cloud.params()
        lrs = dict(means=_means_lr(cfg, it, cfg.iterations), log_scales=cfg.lr_scale,
                   rotations=cfg.lr_rotation, opacity_logits=cfg.lr_opacity, sh=cfg.lr_sh)
        adam.step(params, _bundle_dict(grads), lrs)
        if cfg.learn_gamma:
            t = adam.step_count
            g_m = adam.beta1 * g_m + (1 - adam.beta1) * lv.d_gamma
            g_v = adam.beta2 * g_v + (1 - adam.beta2) * lv.d_gamma**2
            step = cfg.lr_gamma * (g_m / (1 - adam.beta1**t)) / (np.sqrt(g_v / (1 - adam.beta2**t)) + adam.eps)
            gamma = max(gamma - step, 1e-3)
        training_log.rows.append((len(training_log.rows), lv.total, lv.l1_part, lv.dssim_part, len(cloud), gamma))

        done = it + 1
        if cfg.densify_from <= done < cfg.densify_until and done % cfg.densify_interval == 0:
            stats = grad_accum / np.maximum(grad_count, 1.0)
            try:
                cloud = densify_and_prune(cloud, stats, cfg, adam, rng)
            except EmptyCloud:
                log.warning("iteration %d: every splat fell below prune_opacity; skipping this pass", done)
            grad_accum = np.zeros(len(cloud))
            grad_count = np.zeros(len(cloud))
        if (cfg.opacity_reset_interval > 0 and done < cfg.densify_until
                and done % cfg.opacity_reset_interval == 0):
            cloud.opacity_logits = np.minimum(cloud.opacity_logits, logit(0.01))
            adam.reset_rows("opacity_logits")
    training_log.gamma = gamma
    return cloud


def train_progressive(dataset: EventDataset, cfg: TrainConfig, training_log: TrainingLog | None = None,
                      round_callback=None) -> GaussianCloud:
    """Multi-round training; each round restarts from the previous round's opaque means.

    ``round_callback(round_index, cloud)`` is invoked after every round.
    """
    training_log = training_log if training_log is not None else TrainingLog()
    rng = np.random.default_rng([cfg.seed, 7])
    cloud = init_random_cloud(cfg, rng)
    gamma = cfg.gamma
    for r in range(cfg.rounds):
        if r > 0:
            try:
                means = progressive_filter(cloud, cfg.alpha_pro)
            except NoSurvivors:
                log.warning("round %d: no splat above alpha_pro=%.3g, re-initializing randomly", r, cfg.alpha_pro)
                cloud = init_random_cloud(cfg, rng)
            else:
                if cfg.carry_params:
                    cloud = cloud.subset(cloud.opacities > cfg.alpha_pro)
                else:
                    cloud = cloud_from_means(means, cfg, rng)
        training_log.round_boundaries.append(len(training_log.rows))
        log.info("round %d: %d splats", r + 1, len(cloud))
        cloud = train_round(cloud, dataset, cfg, training_log, round_index=r, gamma=gamma)
        if cfg.carry_params and training_log.gamma is not None:
            gamma = training_log.gamma
        if round_callback is not None:
            round_callback(r, cloud)
    return cloud


def refine_appearance(cloud: GaussianCloud, blurred_frames: list, cfg: TrainConfig,
                      training_log: TrainingLog | None = None) -> GaussianCloud:
    """Fit opacity and SH to blurred photos; means, scales and rotations stay fixed.

    ``blurred_frames`` is a list of ``(image, BlurConfig)`` pairs.
    """
    if not blurred_frames:
        raise EmptyRefinementSet("no blurred frames given")
    cloud = cloud.copy()
    if cfg.refine_iterations <= 0:
        return cloud
    rng = np.random.default_rng([cfg.seed, 99])
    adam = AdamState(cloud.params())
    lcfg = cfg.loss_config()
    st = RenderSettings(background=cfg.background)
    lrs = dict(opacity_logits=cfg.lr_opacity * cfg.eta_alpha, sh=cfg.lr_sh)
    order, pos = rng.permutation(len(blurred_frames)), 0
    for it in range(cfg.refine_iterations):
        if pos == len(order):
            order, pos = rng.permutation(len(blurred_frames)), 0
        image, bc = blurred_frames[int(order[pos])]
        pos += 1
        rb = render_blur(cloud, bc, st)
        lv = blur_loss(rb, image, lcfg)
        g = render_blur_backward(cloud, bc, lv.d_blur_image, rb)
        params = cloud.params()
        adam.step(params, dict(opacity_logits=g.d_opacity_logit, sh=g.d_sh), lrs)
        if training_log is not None:
            training_log.rows.append((len(training_log.rows), lv.total, lv.l1_part, lv.dssim_part, len(cloud), 0.0))
    return cloud
