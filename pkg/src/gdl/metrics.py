"""Evaluation: Fréchet distance between fitted Gaussians, target accuracy, confidence traces."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as tn
from .experts import ExpertBank
from .rng import rng_for
from .schedule import NoiseSchedule, q_sample
from .tensor import Tensor

REGULARIZER = 1e-8


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """Squared 2-Wasserstein distance between two Gaussians.

    ``Tr((cov_a cov_b)^(1/2))`` is evaluated as ``Tr((A^(1/2) cov_b A^(1/2))^(1/2))``
    with ``A = cov_a``, which is symmetric and has the same trace.
    """
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    ra = _psd_sqrt(cov_a)
    cross = _psd_sqrt(ra @ cov_b @ ra)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def fit_gaussian(samples) -> tuple:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    n, d = x.shape
    if n < d + 1:
        raise ValueError(f"need at least {d + 1} samples, got {n}")
    cov = np.cov(x, rowvar=False).reshape(d, d)
    if np.linalg.matrix_rank(cov) < d:
        cov = cov + REGULARIZER * np.eye(d)
    return x.mean(axis=0), cov


def frechet_gaussian(samples_a, samples_b) -> float:
    """Fréchet distance between Gaussians fitted to two sample sets.

    Singular covariances are regularised with ``1e-8 * I``.
    """
    return frechet_from_moments(*fit_gaussian(samples_a), *fit_gaussian(samples_b))


def target_accuracy(samples, y_target: int, oracle: Callable[[np.ndarray], np.ndarray]) -> float:
    """Fraction of samples whose oracle argmax equals ``y_target``."""
    x = np.asarray(samples, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("no samples")
    return float(np.mean(np.argmax(oracle(x), axis=1) == y_target))


def per_class_counts(samples, oracle, K: int) -> list:
    x = np.asarray(samples, dtype=np.float64)
    if len(x) == 0:
        return [0] * K
    return np.bincount(np.argmax(oracle(x), axis=1), minlength=K).tolist()


@dataclass
class TracePoint:
    t: int
    expert: Optional[int]
    confidence: float


@dataclass
class ConfidenceTrace:
    points: list = field(default_factory=list)

    @property
    def t(self) -> np.ndarray:
        return np.array([p.t for p in self.points])

    @property
    def confidence(self) -> np.ndarray:
        return np.array([p.confidence for p in self.points])

    def mean_over(self, lo: int, hi: int) -> float:
        sel = [p.confidence for p in self.points if lo <= p.t <= hi]
        if not sel:
            raise ValueError(f"no trace points in [{lo}, {hi}]")
        return float(np.mean(sel))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "expert", "confidence"])
            for p in self.points:
                w.writerow([p.t, "" if p.expert is None else p.expert, repr(p.confidence)])


def confidence_curve(model, sched: NoiseSchedule, x0: np.ndarray, y: Optional[np.ndarray],
                     t_grid: Sequence[int], routed: bool = True, kind: str = "true_class",
                     seed: int = 0) -> ConfidenceTrace:
    """Mean guidance-model confidence on held-out data corrupted to each ``t``.

    ``model`` is an :class:`ExpertBank` (routed per ``t`` when ``routed``,
    otherwise its backbone) or any callable returning logits. ``kind`` is
    ``"true_class"`` (probability of the label) or ``"max"`` (max softmax).
    """
    if kind not in ("true_class", "max"):
        raise ValueError("kind must be 'true_class' or 'max'")
    if kind == "true_class" and y is None:
        kind = "max"
    x0 = np.asarray(x0, dtype=np.float64)
    trace = ConfidenceTrace()
    for t in t_grid:
        t = int(t)
        if not 0 <= t <= sched.T:
            raise ValueError(f"timestep {t} outside [0, {sched.T}]")
        eps = rng_for(seed, f"confidence/{t}").standard_normal(x0.shape)
        x_t = q_sample(sched, x0, t, eps)
        n = None
        with tn.no_grad():
            if isinstance(model, ExpertBank):
                if routed and t >= 1:
                    n = model.expert_for(t)
                logits = model.forward(Tensor(x_t), n, t=t if model.spec.time_embed_dim else None).data
            else:
                logits = np.asarray(model(x_t, t))
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        conf = p[np.arange(len(p)), y].mean() if kind == "true_class" else p.max(axis=1).mean()
        trace.points.append(TracePoint(t, n, float(conf)))
    return trace


@dataclass
class MetricReport:
    frechet: float
    target_accuracy: float
    per_class: list
    per_class_frechet: list = field(default_factory=list)
    trace_path: Optional[str] = None
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"format_version": 1, **asdict(self)}, indent=2, sort_keys=False)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")
