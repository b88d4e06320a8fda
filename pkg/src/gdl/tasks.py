"""Toy tasks with closed-form ground truth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from .rng import rng_for


@dataclass(frozen=True)
class GmmTask:
    """K isotropic Gaussians with means evenly spaced on a circle of radius R."""

    K: int = 8
    R: float = 4.0
    std: float = 0.3

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("need at least two components")
        if self.R <= 0 or self.std < 0:
            raise ValueError("radius must be positive and std non-negative")

    dim = 2

    @property
    def angles(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.K) / self.K

    @property
    def means(self) -> np.ndarray:
        return self.R * np.stack([np.cos(self.angles), np.sin(self.angles)], axis=1)


def sample_gmm(task: GmmTask, count: int, seed: int = 0, purpose: str = "gmm"):
    """``count`` i.i.d. labelled draws, returned as ``(x0, y)``."""
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = rng_for(seed, purpose)
    y = rng.integers(task.K, size=count)
    x = task.means[y] + task.std * rng.standard_normal((count, 2))
    return x, y


def sample_component(task: GmmTask, k: int, count: int, seed: int = 0) -> np.ndarray:
    rng = rng_for(seed, f"component{k}")
    return task.means[k] + task.std * rng.standard_normal((count, 2))


def noisy_log_posterior(task: GmmTask, x, abar: float = 1.0) -> np.ndarray:
    """log p(y | x_t) when x_t = sqrt(abar) x_0 + sqrt(1 - abar) eps."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    var = abar * task.std ** 2 + (1.0 - abar)
    d2 = ((x[:, None, :] - np.sqrt(abar) * task.means[None]) ** 2).sum(-1)
    if var == 0:
        # degenerate mixture: hard nearest-mean assignment
        nearest = d2 == d2.min(axis=1, keepdims=True)
        return np.log(nearest / nearest.sum(axis=1, keepdims=True))
    return log_softmax(-d2 / (2.0 * var), axis=1)


def bayes_posterior(task: GmmTask, x) -> np.ndarray:
    """Exact class posterior p(y | x) of the clean mixture, rows sum to one."""
    return np.exp(noisy_log_posterior(task, x, 1.0))


def optimal_eps(task: GmmTask, x_t: np.ndarray, abar: float) -> np.ndarray:
    """E[eps | x_t] for the mixture marginal; the ideal noise predictor."""
    var = abar * task.std ** 2 + (1.0 - abar)
    w = np.exp(noisy_log_posterior(task, x_t, abar))
    centre = w @ (np.sqrt(abar) * task.means)
    score = -(x_t - centre) / var
    return -np.sqrt(1.0 - abar) * score


class GmmOracleModel:
    """Noise predictor that returns the closed-form optimum for a :class:`GmmTask`."""

    def __init__(self, task: GmmTask, sched):
        self.task = task
        self.sched = sched
        self.spec = type("Spec", (), {"input_dim": 2})()

    def predict_eps(self, x_t, t):
        return optimal_eps(self.task, np.asarray(x_t), self.sched.abar(t))


class TwoPointOracleModel:
    """Closed-form noise predictor for 1-D data uniform on ``{-1, +1}``."""

    def __init__(self, sched):
        self.sched = sched
        self.spec = type("Spec", (), {"input_dim": 1})()

    def predict_eps(self, x_t, t):
        a = self.sched.abar(t)
        x0_mean = np.tanh(np.sqrt(a) * x_t / (1.0 - a))
        return (x_t - np.sqrt(a) * x0_mean) / np.sqrt(1.0 - a)


class GaussianOracleModel:
    """Closed-form noise predictor for 1-D data ``N(mean, std^2)``."""

    def __init__(self, sched, mean: float = 0.5, std: float = 0.5):
        self.sched = sched
        self.mean, self.std = float(mean), float(std)
        self.spec = type("Spec", (), {"input_dim": 1})()

    def predict_eps(self, x_t, t):
        a = self.sched.abar(t)
        var = a * self.std ** 2 + 1.0 - a
        return np.sqrt(1.0 - a) * (x_t - np.sqrt(a) * self.mean) / var


@dataclass(frozen=True)
class DescriptorTask:
    """Radius/angle descriptor and a two-row soft assignment map over the GMM plane.

    Row 0 of the soft map assigns a point to ``K`` angular bins (logits
    proportional to the projection on each bin direction), row 1 to ``K``
    radial bins centred at ``j * 2R / K``.
    """

    gmm: GmmTask = GmmTask()
    sharpness: float = 2.0

    @property
    def m(self) -> int:
        return 2

    @property
    def map_shape(self) -> tuple:
        return (2, self.gmm.K)

    def target_descriptor(self, k: int) -> np.ndarray:
        return np.array([self.gmm.R, float(np.arctan2(np.sin(self.gmm.angles[k]), np.cos(self.gmm.angles[k])))])

    def target_map(self, k: int) -> np.ndarray:
        out = np.zeros(self.map_shape)
        out[0, k] = 1.0
        out[1, self.gmm.K // 2] = 1.0
        return out


def descriptor_eval(task: DescriptorTask, x) -> np.ndarray:
    """``(|x|, atan2(x2, x1))`` per row; the angle at the origin is 0."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return np.stack([np.hypot(x[:, 0], x[:, 1]), np.arctan2(x[:, 1], x[:, 0])], axis=1)


def soft_map_logits(task: DescriptorTask, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    g = task.gmm
    dirs = np.stack([np.cos(g.angles), np.sin(g.angles)], axis=1)
    ang = task.sharpness * x @ dirs.T
    spacing = 2.0 * g.R / g.K
    centres = spacing * np.arange(g.K)
    r = np.hypot(x[:, 0], x[:, 1])[:, None]
    rad = -((r - centres) ** 2) / (2.0 * (spacing / 2.0) ** 2)
    return np.stack([ang, rad], axis=1)


def descriptor_soft_map(task: DescriptorTask, x) -> np.ndarray:
    """``(n, 2, K)`` probability map; each row sums to one."""
    return softmax(soft_map_logits(task, x), axis=-1)
