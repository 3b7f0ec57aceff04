import numpy as np
import pytest

from evsplat.errors import BadSpec, TooFewFrames
from evsplat.events import BayerMask, EventCameraModel, apply_bayer
from evsplat.render import RenderSettings, render
from evsplat.sim import (
    TrajectorySpec,
    frames_to_events,
    make_trajectory,
    pose_at,
    render_frames,
    synthesize_blur,
    toy_scene,
)

MODEL = EventCameraModel(threshold=0.2)


def signed_counts(stream, h, w):
    out = np.zeros((h, w))
    np.add.at(out, (stream.events["y"], stream.events["x"]), stream.events["p"].astype(float))
    return out


# -- trajectories ----------------------------------------------------------------------


def test_orbit_azimuths():
    views = make_trajectory(TrajectorySpec(n_views=4, elevation=0.0, radius=2.0))
    az = [np.degrees(np.arctan2(v.center[1], v.center[0])) % 360 for v in views]
    np.testing.assert_allclose(az, [0, 90, 180, 270], atol=1e-9)
    np.testing.assert_allclose([v.time for v in views], [0, 0.25, 0.5, 0.75])


def test_orbit_radius_exact():
    views = make_trajectory(TrajectorySpec(n_views=360, radius=2.0, center=(0.1, -0.2, 0.3)))
    d = [np.linalg.norm(v.center - np.array([0.1, -0.2, 0.3])) for v in views]
    assert np.max(np.abs(np.array(d) - 2.0)) <= 1e-12


def test_views_look_at_center():
    for v in make_trajectory(TrajectorySpec(n_views=12, center=(0.2, 0.1, 0.0))):
        p = v.R @ np.array([0.2, 0.1, 0.0]) + v.translation
        np.testing.assert_allclose(p[:2], 0, atol=1e-12)


def test_line_trajectory_and_bad_specs():
    views = make_trajectory(TrajectorySpec(kind="line", start=(0, -3, 0), end=(1, -3, 0), n_views=3, duration=2.0))
    np.testing.assert_allclose([v.time for v in views], [0, 1, 2])
    with pytest.raises(BadSpec):
        make_trajectory(TrajectorySpec(kind="line", start=(1, 1, 1), end=(1, 1, 1), n_views=3))
    with pytest.raises(BadSpec):
        make_trajectory(TrajectorySpec(n_views=1))
    with pytest.raises(BadSpec):
        make_trajectory(TrajectorySpec(kind="spiral"))


def test_pose_at_interpolates_and_clamps():
    views = make_trajectory(TrajectorySpec(n_views=8, duration=1.0))
    np.testing.assert_allclose(pose_at(views, 0.25).center, views[2].center, atol=1e-12)
    mid = pose_at(views, 0.0625)
    np.testing.assert_allclose(mid.center, (views[0].center + views[1].center) / 2, atol=1e-12)
    assert pose_at(views, -1.0).time == -1.0
    np.testing.assert_allclose(pose_at(views, 5.0).center, views[-1].center)


# -- frames to events --------------------------------------------------------------


def test_constant_frames_no_events():
    frames = [np.full((4, 4), 0.5)] * 3
    assert len(frames_to_events(frames, [0, 0.1, 0.2], MODEL)) == 0


def test_single_pixel_step():
    a, b = np.ones((3, 3)), np.ones((3, 3))
    a[1, 2], b[1, 2] = np.exp(0.4), np.exp(0.8)
    s = frames_to_events([a, b], [0.0, 1.0], MODEL)
    assert len(s) == 2
    assert set(s.events["p"]) == {1}
    assert set(zip(s.events["x"], s.events["y"])) == {(2, 1)}
    # timestamps interpolate within the interval
    assert list(s.events["t"]) == [500_000, 1_000_000]


def test_too_few_frames():
    with pytest.raises(TooFewFrames):
        frames_to_events([np.ones((2, 2))], [0.0], MODEL)
    with pytest.raises(TooFewFrames):
        frames_to_events([np.ones((2, 2))] * 2, [0.0, 0.0], MODEL)


def test_output_stream_is_valid(rng):
    frames = [rng.uniform(0.05, 1, (8, 8)) for _ in range(6)]
    s = frames_to_events(frames, np.arange(6) * 0.01, MODEL)
    s.validate()
    assert np.all(np.diff(s.events["t"].astype(np.int64)) >= 0)


def test_quantization_bound_random_sequences(rng):
    for _ in range(100):
        n = rng.integers(2, 8)
        frames = [rng.uniform(0.05, 1, (8, 8)) for _ in range(n)]
        s = frames_to_events(frames, np.sort(rng.uniform(0, 1, n)) + np.arange(n), MODEL)
        total = np.log(frames[-1]) - np.log(frames[0])
        resid = np.abs(total - MODEL.threshold * signed_counts(s, 8, 8))
        assert np.all(resid < MODEL.threshold)


def test_quantization_bound_color_and_gamma(rng):
    bayer = BayerMask(6, 6)
    for g in (1.0, 2.2):
        frames = [rng.uniform(0.05, 1, (6, 6, 3)) for _ in range(5)]
        s = frames_to_events(frames, np.arange(5.0), MODEL, bayer, encoding_gamma=g)
        total = (np.log(apply_bayer(frames[-1], bayer)) - np.log(apply_bayer(frames[0], bayer))) / g
        assert np.all(np.abs(total - MODEL.threshold * signed_counts(s, 6, 6)) < MODEL.threshold)


def test_halving_threshold_doubles_events(rng):
    for _ in range(20):
        frames = [rng.uniform(0.05, 1, (6, 6)) for _ in range(5)]
        n = len(frames_to_events(frames, np.arange(5.0), EventCameraModel(threshold=0.2)))
        n_half = len(frames_to_events(frames, np.arange(5.0), EventCameraModel(threshold=0.1)))
        assert n_half >= 2 * n - 36


# -- blur --------------------------------------------------------------------------


def test_synthesize_blur(rng):
    a, b = rng.random((4, 4, 3)), rng.random((4, 4, 3))
    np.testing.assert_array_equal(synthesize_blur([a]), a)
    np.testing.assert_array_equal(synthesize_blur([a, b]), (a + b) / 2)
    np.testing.assert_array_equal(synthesize_blur([a] * 5), a)
    with pytest.raises(ValueError):
        synthesize_blur([])


# -- toy scene ------------------------------------------------------------------------


def test_toy_scene_visible_from_orbit():
    scene = toy_scene()
    assert len(scene) == 5
    colors = 0.5 + 0.28209479177387814 * scene.sh[:, 0, :]
    assert len({tuple(np.round(c, 3)) for c in colors}) == 5
    views = make_trajectory(TrajectorySpec(n_views=8, intrinsics=dict(fx=40, fy=40, cx=23.5, cy=23.5,
                                                                       width=48, height=48)))
    for img in render_frames(scene, views, RenderSettings()):
        assert img.max() > 0.3


def test_toy_scene_renders_in_front_of_camera():
    scene = toy_scene(sh_degree=2)
    views = make_trajectory(TrajectorySpec(n_views=4))
    assert scene.sh.shape == (5, 9, 3)
    assert render(scene, views[0]).alpha.max() > 0.9
