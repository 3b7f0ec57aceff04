"""The five-splat toy benchmark used by the end-to-end checks and the CLI.

Events come from 512 frames rendered along an orbit; the trainer sees poses
from a 200-view track over the same orbit and is scored on 20 held-out views
placed between the training azimuths.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import CameraView
from .events import BayerMask, EventCameraModel, EventStream
from .gaussians import GaussianCloud
from .optim import EventDataset, TrainConfig
from .render import BlurConfig, RenderSettings
from .sim import TrajectorySpec, frames_to_events, make_trajectory, render_frames, synthesize_blur, toy_scene

TOY_SIZE = 48
TOY_BACKGROUND = (0.25, 0.25, 0.25)
TOY_INTRINSICS = dict(fx=55.0, fy=55.0, cx=23.5, cy=23.5, width=TOY_SIZE, height=TOY_SIZE)
TOY_ENCODING_GAMMA = 2.2


def toy_event_model() -> EventCameraModel:
    return EventCameraModel.for_sensor(TOY_SIZE, TOY_SIZE, threshold=0.1, window_event_count=80)


def toy_train_config(**overrides) -> TrainConfig:
    """Training schedule sized for the 48x48 toy (a few minutes per round on one core)."""
    base = dict(
        iterations=3000, rounds=2, init_count=300, init_cube_scale=0.7, sh_degree=1,
        background=TOY_BACKGROUND, densify_from=300, densify_until=2000, densify_interval=100,
        densify_grad_threshold=1e-3, opacity_reset_interval=1000, spatial_lr_scale=2.2,
        scene_extent=2.2, max_splats=800, alpha_pro=0.2, learn_gamma=True, seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def orbit(n_views: int, phase: float = 0.0) -> list[CameraView]:
    return make_trajectory(TrajectorySpec(n_views=n_views, radius=2.0, phase=phase, intrinsics=dict(TOY_INTRINSICS)))


@dataclass
class ToyProblem:
    scene: GaussianCloud
    settings: RenderSettings
    model: EventCameraModel
    stream: EventStream
    sim_views: list
    train_views: list
    dataset: EventDataset
    heldout_views: list
    heldout_images: list

    def blur_exposures(self, count: int = 10, span: float = 0.02) -> list:
        """``count`` exposure intervals of ``span`` seconds spread over the orbit."""
        starts = [(k + 0.5) / count * (1.0 - span) for k in range(count)]
        return [(t0, t0 + span) for t0 in starts]

    def blurred_frames(self, count: int = 10, n_eiw: int = 8, span: float = 0.02) -> list:
        """``count`` motion-blurred photos, each averaging ``n_eiw`` sub-renders over its exposure."""
        from .sim import pose_at

        out = []
        for t0, t1 in self.blur_exposures(count, span):
            bc = BlurConfig.from_exposure(pose_at(self.sim_views, t0), pose_at(self.sim_views, t1), n_eiw)
            image = synthesize_blur(render_frames(self.scene, bc.sub_poses, self.settings))
            out.append((image, bc))
        return out


def build_toy_problem(n_sim_frames: int = 512, n_train_views: int = 200, n_heldout: int = 20) -> ToyProblem:
    scene = toy_scene()
    settings = RenderSettings(background=TOY_BACKGROUND)
    sim_views = orbit(n_sim_frames)
    frames = render_frames(scene, sim_views, settings)
    model = toy_event_model()
    stream = frames_to_events(frames, [v.time for v in sim_views], model, BayerMask(TOY_SIZE, TOY_SIZE),
                              encoding_gamma=TOY_ENCODING_GAMMA)
    train_views = orbit(n_train_views)
    dataset = EventDataset.from_stream(stream, train_views, model)
    heldout = orbit(n_heldout, phase=np.pi / n_heldout)
    return ToyProblem(scene, settings, model, stream, sim_views, train_views, dataset, heldout,
                      render_frames(scene, heldout, settings))

