"""Splat containers: a single Gaussian view, the cloud, and gradient bundles."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .core_math import UnitQuaternion, sh_num_coeffs


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Gaussian:
    mean: np.ndarray
    log_scale: np.ndarray
    rotation: UnitQuaternion
    opacity_logit: float
    sh: np.ndarray  # (K, 3)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


_PARAMS = ("means", "log_scales", "rotations", "opacity_logits", "sh")


@dataclass
class GaussianCloud:
    """Struct-of-arrays splat storage.

    ``rotations`` hold raw quaternions (scalar first); they are normalized
    whenever a rotation matrix is built. ``sh`` has shape ``(N, K, 3)``.
    """

    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = self.means.shape[0]
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        if self.sh.ndim != 3 or self.sh.shape[0] != n or self.sh.shape[2] != 3:
            raise ValueError(f"sh must have shape (N, K, 3), got {self.sh.shape}")
        if sh_num_coeffs(self.sh_degree) != self.sh.shape[1]:
            raise ValueError(f"{self.sh.shape[1]} SH coefficients is not a square count")

    @classmethod
    def empty(cls, sh_degree: int = 3) -> "GaussianCloud":
        k = sh_num_coeffs(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, k, 3)))

    @classmethod
    def from_gaussians(cls, gaussians, sh_degree: int | None = None) -> "GaussianCloud":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty(3 if sh_degree is None else sh_degree)
        return cls(
            np.stack([g.mean for g in gaussians]),
            np.stack([g.log_scale for g in gaussians]),
            np.stack([g.rotation.as_array() for g in gaussians]),
            np.array([g.opacity_logit for g in gaussians]),
            np.stack([np.asarray(g.sh, dtype=np.float64).reshape(-1, 3) for g in gaussians]),
        )

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.means[i].copy(), self.log_scales[i].copy(),
                        UnitQuaternion.from_array(self.rotations[i]),
                        float(self.opacity_logits[i]), self.sh[i].copy())

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f).copy() for f in _PARAMS))

    def subset(self, index) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f)[index] for f in _PARAMS))

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(*(np.concatenate([getattr(self, f), getattr(other, f)]) for f in _PARAMS))

    def params(self) -> dict:
        return {f: getattr(self, f) for f in _PARAMS}

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, f).ravel() for f in _PARAMS])

    def with_flat(self, vec: np.ndarray) -> "GaussianCloud":
        out, pos = [], 0
        for f in _PARAMS:
            arr = getattr(self, f)
            out.append(np.asarray(vec[pos:pos + arr.size]).reshape(arr.shape))
            pos += arr.size
        return GaussianCloud(*out)

    def equals(self, other: "GaussianCloud") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in _PARAMS)


@dataclass
class GradientBundle:
    """Per-splat gradients laid out like :class:`GaussianCloud`.

    ``d_mean2d`` carries the screen-space positional gradient (pixels) used
    for densification statistics; it is not an optimizable parameter.
    """

    d_mean: np.ndarray
    d_log_scale: np.ndarray
    d_rotation: np.ndarray
    d_opacity_logit: np.ndarray
    d_sh: np.ndarray
    d_mean2d: np.ndarray
    visible: np.ndarray

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud) -> "GradientBundle":
        n = len(cloud)
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
                   np.zeros_like(cloud.sh), np.zeros((n, 2)), np.zeros(n, dtype=bool))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.d_mean.ravel(), self.d_log_scale.ravel(), self.d_rotation.ravel(),
                               self.d_opacity_logit.ravel(), self.d_sh.ravel()])

    def by_param(self) -> dict:
        return dict(zip(_PARAMS, (self.d_mean, self.d_log_scale, self.d_rotation,
                                  self.d_opacity_logit, self.d_sh)))

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        vals = [getattr(self, f.name) + getattr(other, f.name) for f in fields(self) if f.name != "visible"]
        return GradientBundle(*vals, self.visible | other.visible)

    def scaled(self, k: float) -> "GradientBundle":
        vals = [getattr(self, f.name) * k for f in fields(self) if f.name != "visible"]
        return GradientBundle(*vals, self.visible.copy())
