"""Estimator-style wrapper: ``fit`` on events, ``predict`` renders, ``score`` aligned PSNR."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core_math import CameraView
from .errors import DimensionMismatch, InputError
from .events import EventCameraModel, EventStream
from .gaussians import GaussianCloud
from .metrics import evaluate
from .optim import EventDataset, TrainConfig, TrainingLog, refine_appearance, train_progressive
from .render import BlurConfig, RenderSettings, render

_OVERRIDES = ("iterations", "rounds", "lambda_dssim", "alpha_pro", "learn_gamma", "seed")


def check_views(views) -> list:
    if isinstance(views, CameraView):
        views = [views]
    views = list(getattr(views, "views", views))
    if not views:
        raise InputError("no camera views given")
    for k, v in enumerate(views):
        if not isinstance(v, CameraView):
            raise InputError(f"views[{k}] is {type(v).__name__}, not a CameraView")
    return views


def check_images(images, views) -> list:
    images = [np.asarray(getattr(im, "rgb", im), dtype=np.float64) for im in images]
    if len(images) != len(views):
        raise DimensionMismatch(f"{len(images)} images for {len(views)} views")
    for k, (im, v) in enumerate(zip(images, views)):
        if im.shape[:2] != (v.height, v.width):
            raise DimensionMismatch(f"images[{k}] is {im.shape[:2]}, view expects {(v.height, v.width)}")
    return images


def check_blurred(frames) -> list:
    out = []
    for k, item in enumerate(frames):
        try:
            image, bc = item
        except (TypeError, ValueError) as exc:
            raise InputError(f"blurred frame {k} is not an (image, BlurConfig) pair") from exc
        if not isinstance(bc, BlurConfig):
            raise InputError(f"blurred frame {k}: expected a BlurConfig, got {type(bc).__name__}")
        check_images([image], bc.sub_poses[:1])
        out.append((np.asarray(image, dtype=np.float64), bc))
    return out


class EventSplatter(BaseEstimator):
    """Reconstructs a Gaussian cloud from an event stream and a pose track.

    ``config`` holds the full training schedule; the keyword parameters, when
    not ``None``, override the matching fields.
    """

    def __init__(self, config: TrainConfig | None = None, iterations=None, rounds=None, lambda_dssim=None,
                 alpha_pro=None, learn_gamma=None, seed=None):
        self.config = config
        self.iterations = iterations
        self.rounds = rounds
        self.lambda_dssim = lambda_dssim
        self.alpha_pro = alpha_pro
        self.learn_gamma = learn_gamma
        self.seed = seed

    def train_config(self) -> TrainConfig:
        cfg = self.config if self.config is not None else TrainConfig()
        if not isinstance(cfg, TrainConfig):
            raise InputError(f"config must be a TrainConfig, got {type(cfg).__name__}")
        over = {k: getattr(self, k) for k in _OVERRIDES if getattr(self, k) is not None}
        return replace(cfg, **over) if over else cfg

    def fit(self, X, y=None, model: EventCameraModel | None = None, color: bool = True):
        """``X`` is an EventDataset, or an EventStream with ``y`` its pose track."""
        cfg = self.train_config()
        if isinstance(X, EventDataset):
            dataset = X
        elif isinstance(X, EventStream):
            if y is None:
                raise InputError("fitting on a raw event stream needs a pose track as y")
            model = model or EventCameraModel.for_sensor(X.width, X.height)
            dataset = EventDataset.from_stream(X, check_views(y), model, color=color)
        else:
            raise InputError(f"cannot fit on {type(X).__name__}")
        self.log_ = TrainingLog()
        self.round_clouds_ = []
        self.cloud_ = train_progressive(dataset, cfg, self.log_,
                                        lambda r, c: self.round_clouds_.append(c.copy()))
        self.gamma_ = self.log_.gamma
        self.n_splats_ = len(self.cloud_)
        return self

    def _settings(self) -> RenderSettings:
        return RenderSettings(background=self.train_config().background)

    def predict(self, views) -> list[np.ndarray]:
        check_is_fitted(self, "cloud_")
        st = self._settings()
        return [render(self.cloud_, v, st).rgb for v in check_views(views)]

    def evaluate(self, views, images, aligned: bool = True):
        views = check_views(views)
        return evaluate(self.predict(views), check_images(images, views), aligned=aligned)

    def score(self, views, images) -> float:
        """Mean log-aligned PSNR over the given views."""
        return self.evaluate(views, images).psnr_mean

    def refine(self, blurred_frames):
        """Fit appearance to ``(image, BlurConfig)`` pairs; geometry is left untouched."""
        check_is_fitted(self, "cloud_")
        self.cloud_ = refine_appearance(self.cloud_, check_blurred(blurred_frames), self.train_config())
        return self

    @classmethod
    def from_cloud(cls, cloud: GaussianCloud, config: TrainConfig | None = None) -> "EventSplatter":
        est = cls(config=config)
        est.cloud_ = cloud
        est.gamma_ = (config or TrainConfig()).gamma
        est.n_splats_ = len(cloud)
        return est

