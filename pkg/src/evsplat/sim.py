"""Synthetic ground truth: toy scenes, trajectories, ideal events, blurred frames."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_math import SH_C0, CameraView, UnitQuaternion, sh_num_coeffs
from .errors import BadSpec, TooFewFrames
from .events import EVENT_DTYPE, BayerMask, EventCameraModel, EventStream
from .gaussians import GaussianCloud, logit
from .render import RenderSettings, render


@dataclass
class TrajectorySpec:
    kind: str = "orbit"
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 2.0
    start: tuple | None = None
    end: tuple | None = None
    n_views: int = 200
    elevation: float = 0.35  # radians above the xy plane
    duration: float = 1.0  # seconds
    phase: float = 0.0  # starting azimuth, radians
    intrinsics: dict = field(default_factory=lambda: dict(fx=40.0, fy=40.0, cx=23.5, cy=23.5, width=48, height=48))


def make_trajectory(spec: TrajectorySpec) -> list[CameraView]:
    """Views looking at ``spec.center``; timestamps uniform over ``duration``."""
    if spec.n_views < 2:
        raise BadSpec("a trajectory needs at least 2 views")
    if spec.duration <= 0:
        raise BadSpec("duration must be positive")
    center = np.asarray(spec.center, dtype=np.float64)
    views = []
    if spec.kind == "orbit":
        if spec.radius <= 0:
            raise BadSpec("orbit radius must be positive")
        for i in range(spec.n_views):
            az = spec.phase + 2.0 * np.pi * i / spec.n_views
            d = np.array([np.cos(spec.elevation) * np.cos(az), np.cos(spec.elevation) * np.sin(az),
                          np.sin(spec.elevation)])
            t = spec.duration * i / spec.n_views
            views.append(CameraView.look_at(center + spec.radius * d, center, time=t, **spec.intrinsics))
    elif spec.kind == "line":
        if spec.start is None or spec.end is None:
            raise BadSpec("line trajectories need start and end points")
        a, b = np.asarray(spec.start, float), np.asarray(spec.end, float)
        if np.linalg.norm(b - a) < 1e-12:
            raise BadSpec("line endpoints coincide")
        for i in range(spec.n_views):
            u = i / (spec.n_views - 1)
            views.append(CameraView.look_at((1 - u) * a + u * b, center, time=spec.duration * u,
                                            **spec.intrinsics))
    else:
        raise BadSpec(f"unknown trajectory kind {spec.kind!r}")
    return views


def pose_at(views: list[CameraView], time: float) -> CameraView:
    """Pose on a time-ordered view track at ``time`` (slerp between neighbours)."""
    times = np.array([v.time for v in views])
    k = int(np.searchsorted(times, time, side="right"))
    if k <= 0:
        return views[0].with_pose(views[0].rotation, views[0].translation, time)
    if k >= len(views):
        last = views[-1]
        return last.with_pose(last.rotation, last.translation, time)
    a, b = views[k - 1], views[k]
    return a.interpolate(b, (time - a.time) / (b.time - a.time))


def frames_to_events(frames, times, model: EventCameraModel, bayer: BayerMask | None = None,
                     floor: float = 1e-5, encoding_gamma: float = 1.0) -> EventStream:
    """Ideal threshold-crossing simulator.

    ``frames`` are linear-radiance images ``(H, W)`` or ``(H, W, 3)``;
    ``times`` their timestamps in seconds. Event timestamps (microseconds)
    interpolate linearly in log intensity between frames. With
    ``encoding_gamma`` g the sensor sees ``radiance ** (1 / g)``, as when
    events are emulated from display-encoded video.
    """
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    times = np.asarray(times, dtype=np.float64)
    if len(frames) < 2:
        raise TooFewFrames("need at least two frames")
    if len(times) != len(frames) or np.any(np.diff(times) <= 0):
        raise TooFewFrames("frame timestamps must be strictly increasing, one per frame")

    def log_of(f):
        if f.ndim == 3:
            if bayer is not None and bayer.enabled:
                f = np.take_along_axis(f, bayer.channels[..., None], axis=2)[..., 0]
            else:
                f = f.mean(axis=2)
        return (np.log(np.maximum(f, floor)) / encoding_gamma).ravel()

    h, w = frames[0].shape[:2]
    delta = model.threshold
    ref = log_of(frames[0])
    prev = ref.copy()
    chunks = []
    for k in range(1, len(frames)):
        cur = log_of(frames[k])
        diff = cur - ref
        n = np.floor(np.abs(diff) / delta + 1e-9).astype(np.int64)
        pix = np.nonzero(n)[0]
        if pix.size:
            counts = n[pix]
            rep = np.repeat(pix, counts)
            j = np.concatenate([np.arange(1, c + 1) for c in counts])
            sign = np.sign(diff[rep])
            level = ref[rep] + sign * j * delta
            span = cur[rep] - prev[rep]
            frac = np.clip((level - prev[rep]) / np.where(span == 0, 1.0, span), 0.0, 1.0)
            t_us = np.rint(1e6 * (times[k - 1] + frac * (times[k] - times[k - 1]))).astype(np.uint64)
            chunk = np.empty(rep.size, dtype=EVENT_DTYPE)
            chunk["t"], chunk["x"], chunk["y"], chunk["p"] = t_us, rep % w, rep // w, sign.astype(np.int8)
            chunks.append(chunk[np.argsort(chunk["t"], kind="stable")])
            ref[pix] += np.sign(diff[pix]) * n[pix] * delta
        prev = cur
    events = np.concatenate(chunks) if chunks else np.empty(0, EVENT_DTYPE)
    return EventStream(events, w, h)


def synthesize_blur(frames) -> np.ndarray:
    """Pixelwise mean of linear-radiance frames captured during one exposure."""
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if not frames:
        raise ValueError("need at least one frame")
    out = frames[0].copy()
    if all(np.array_equal(f, out) for f in frames[1:]):
        return out  # a static exposure is its own mean, without rounding drift
    for f in frames[1:]:
        out += f
    if len(frames) > 1:
        out /= len(frames)
    return out


def dc_from_rgb(rgb) -> np.ndarray:
    """DC SH coefficient that renders as ``rgb`` from every direction."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def toy_scene(sh_degree: int = 0) -> GaussianCloud:
    """Five well-separated splats with distinct colors around the origin."""
    means = np.array([
        [0.0, 0.0, 0.0],
        [0.45, 0.1, 0.1],
        [-0.35, 0.35, -0.1],
        [0.05, -0.45, 0.25],
        [-0.2, -0.15, -0.35],
    ])
    scales = np.array([
        [0.22, 0.16, 0.14],
        [0.10, 0.18, 0.12],
        [0.16, 0.10, 0.14],
        [0.14, 0.12, 0.08],
        [0.12, 0.16, 0.10],
    ])
    colors = np.array([
        [0.85, 0.25, 0.2],
        [0.2, 0.8, 0.3],
        [0.25, 0.35, 0.9],
        [0.9, 0.85, 0.2],
        [0.7, 0.3, 0.8],
    ])
    rots = np.stack([
        UnitQuaternion.from_axis_angle(ax, ang).as_array()
        for ax, ang in [((0, 0, 1), 0.3), ((1, 0, 0), 0.6), ((0, 1, 0), -0.4), ((1, 1, 0), 0.9), ((0, 1, 1), 0.2)]
    ])
    sh = np.zeros((5, sh_num_coeffs(sh_degree), 3))
    sh[:, 0, :] = dc_from_rgb(colors)
    return GaussianCloud(means, np.log(scales), rots, np.full(5, float(logit(0.95))), sh)


def render_frames(cloud: GaussianCloud, views, settings: RenderSettings | None = None) -> list[np.ndarray]:
    return [render(cloud, v, settings).rgb for v in views]
