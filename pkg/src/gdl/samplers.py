"""Reverse-process samplers: DDPM, DDIM, and every guidance variant.

Guided updates follow ``x_prev = <unguided update> - s * sigma * g`` where
``g`` is the gradient of the guidance loss with respect to ``x_t``. For a
strided DDIM jump ``t -> t_prev`` the guidance uses the standard deviation of
the DDPM posterior for that jump, which reduces to ``sigma_t`` when the jump
is a single step.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as tn
from .experts import ExpertBank
from .rng import rng_for
from .schedule import NoiseSchedule
from .tensor import Tensor

GUIDANCE_MODES = ("none", "naive_off_the_shelf", "single_noise_aware", "multi_expert",
                  "gradients_on_x0hat", "t_conditioned")
LOSS_KINDS = ("class_nll", "regression_l1", "dense_l1")
GRAD_SCALINGS = ("fixed", "norm_ratio")
SAMPLER_KINDS = ("ddpm", "ddim")


@dataclass
class GuidanceSpec:
    """One sampling run's guidance settings.

    ``target`` is a class index for ``class_nll``, a descriptor vector for
    ``regression_l1`` and a ``(rows, C)`` probability map for ``dense_l1``.
    """

    mode: str = "multi_expert"
    loss_kind: str = "class_nll"
    target: object = None
    scale: float = 7.5
    grad_scaling: str = "fixed"
    rho: float = 0.3

    def __post_init__(self):
        if self.mode not in GUIDANCE_MODES:
            raise ValueError(f"unknown guidance mode {self.mode!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.grad_scaling not in GRAD_SCALINGS:
            raise ValueError(f"unknown gradient scaling {self.grad_scaling!r}")
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.grad_scaling == "norm_ratio" and not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        if self.mode == "none":
            return
        if self.target is None:
            raise ValueError("guidance target is undefined")
        if self.loss_kind == "class_nll":
            if int(self.target) != self.target or self.target < 0:
                raise ValueError("class_nll needs a non-negative class index target")
            self.target = int(self.target)
        else:
            self.target = np.asarray(self.target, dtype=np.float64)
            if self.loss_kind == "dense_l1":
                if self.target.ndim != 2 or not np.allclose(self.target.sum(axis=-1), 1.0):
                    raise ValueError("dense_l1 needs a (rows, C) probability map target")
            elif self.target.ndim != 1:
                raise ValueError("regression_l1 needs a descriptor vector target")

    @property
    def active(self) -> bool:
        return self.mode != "none"


@dataclass
class SamplerConfig:
    kind: str = "ddim"
    steps: int = 25
    eta: float = 0.0
    seed: int = 0

    def validate(self, T: int) -> "SamplerConfig":
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"sampler kind must be one of {SAMPLER_KINDS}")
        if not 1 <= self.steps <= T:
            raise ValueError(f"steps must lie in [1, {T}]")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        return self


@dataclass
class StepRecord:
    t: int
    expert: Optional[int]
    confidence: float
    grad_norm: float


@dataclass
class SampleResult:
    x0: np.ndarray
    trace: list = field(default_factory=list)


# ---------------------------------------------------------------- unguided rules


def predict_x0(sched: NoiseSchedule, model, x_t, t: int, eps: Optional[np.ndarray] = None) -> np.ndarray:
    """Invert the forward marginal using the predicted noise."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")
    a = sched.abar(t)
    if a <= 0:
        raise ValueError("alpha_bar_t is zero; x0 cannot be recovered")
    if eps is None:
        eps = model.predict_eps(x_t, t)
    return (x_t - np.sqrt(1.0 - a) * eps) / np.sqrt(a)


def _ddpm_mean(sched: NoiseSchedule, x_t, t: int, eps) -> np.ndarray:
    beta = sched.beta_at(t)
    return (x_t - beta / np.sqrt(1.0 - sched.abar(t)) * eps) / np.sqrt(1.0 - beta)


def ddpm_step(sched: NoiseSchedule, model, x_t, t: int, z) -> np.ndarray:
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")
    x_t = np.asarray(x_t, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != x_t.shape:
        raise ValueError("noise z must match the shape of x_t")
    return _ddpm_mean(sched, x_t, t, model.predict_eps(x_t, t)) + sched.sigma(t) * z


def ddim_sigma(sched: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    a, ap = sched.abar(t), sched.abar(t_prev)
    return float(eta * np.sqrt((1.0 - ap) / (1.0 - a)) * np.sqrt(1.0 - a / ap))


def timestep_sequence(T: int, steps: int) -> list:
    """Uniform-stride timesteps from ``T`` down, e.g. 1000, 960, ..., 40 for 25 of 1000."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}]")
    return [int(round(T - i * T / steps)) for i in range(steps)]


# ---------------------------------------------------------------- guidance


def _check_bank(bank: Optional[ExpertBank], spec: GuidanceSpec) -> None:
    if bank is None:
        raise ValueError(f"guidance mode {spec.mode!r} needs a guidance model")
    if spec.mode == "single_noise_aware" and bank.n_experts != 1:
        raise ValueError("single_noise_aware guidance needs a one-expert bank")
    if spec.mode == "t_conditioned" and bank.spec.time_embed_dim == 0:
        raise ValueError("t_conditioned guidance needs a timestep-conditioned backbone")


def route(bank: ExpertBank, mode: str, t: int) -> Optional[int]:
    """Which expert the given guidance mode evaluates at timestep ``t``."""
    if mode in ("naive_off_the_shelf", "gradients_on_x0hat", "none"):
        return None
    if mode == "multi_expert":
        return bank.expert_for(t)
    return 1


def guidance_loss(out: Tensor, spec: GuidanceSpec) -> Tensor:
    """Per-sample guidance loss summed over the batch (rows stay independent)."""
    batch = out.shape[0]
    if spec.loss_kind == "class_nll":
        return tn.affine(tn.cross_entropy(out, np.full(batch, spec.target)), batch)
    if spec.loss_kind == "regression_l1":
        target = np.broadcast_to(spec.target, out.shape)
        return tn.affine(tn.l1_distance(out, Tensor(target)), batch)
    rows, classes = spec.target.shape
    probs = tn.softmax(tn.reshape(out, (batch, rows, classes)))
    target = np.broadcast_to(spec.target, probs.shape)
    return tn.affine(tn.l1_distance(probs, Tensor(target)), batch)


def guidance_gradient(sched: NoiseSchedule, bank: ExpertBank, spec: GuidanceSpec, x_t: np.ndarray,
                      t: int, eps: Optional[np.ndarray] = None, merge: bool = False):
    """Gradient of the guidance loss w.r.t. ``x_t`` on a fresh tape.

    Returns ``(g, expert, confidence)``; ``confidence`` is the mean
    guidance-model probability of the target class (NaN for other losses).
    Exactly one guidance forward/backward is performed.
    """
    _check_bank(bank, spec)
    n = route(bank, spec.mode, t)
    if merge and n is not None and bank.merged != n:
        if bank.merged is not None:
            bank.unmerge()
        bank.merge(n)
    elif not merge and bank.merged is not None:
        bank.unmerge()
    x = Tensor(x_t, requires_grad=True)
    with tn.GradTape():
        inp = x
        if spec.mode == "gradients_on_x0hat":
            a = sched.abar(t)
            inp = tn.affine(tn.sub(x, Tensor(np.sqrt(1.0 - a) * eps)), 1.0 / np.sqrt(a))
        out = bank.forward(inp, n, t=t if bank.spec.time_embed_dim else None)
        loss = guidance_loss(out, spec)
        tn.backward(loss)
    conf = float("nan")
    if spec.loss_kind == "class_nll":
        z = out.data - out.data.max(axis=-1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
        conf = float(p[:, spec.target].mean())
    g = np.zeros_like(x_t) if x.grad is None else x.grad
    return g, n, conf


def _apply_guidance(g: np.ndarray, update: np.ndarray, spec: GuidanceSpec, sigma: float) -> np.ndarray:
    """The increment ``s * sigma * g`` (to be subtracted), optionally norm-matched."""
    if spec.grad_scaling == "fixed":
        return spec.scale * sigma * g
    if spec.scale == 0 or sigma == 0:
        return np.zeros_like(g)
    axes = tuple(range(1, g.ndim))
    gn = np.sqrt((g * g).sum(axis=axes, keepdims=True))
    un = np.sqrt((update * update).sum(axis=axes, keepdims=True))
    factor = np.divide(spec.rho * un, gn, out=np.zeros_like(gn), where=gn > 0)
    return g * factor


def guided_step(sched: NoiseSchedule, model, bank: Optional[ExpertBank], spec: Optional[GuidanceSpec],
                x_t, t: int, z, merge: bool = False, record: Optional[list] = None) -> np.ndarray:
    """One ancestral step with the guidance increment subtracted."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")
    x_t = np.asarray(x_t, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != x_t.shape:
        raise ValueError("noise z must match the shape of x_t")
    eps = model.predict_eps(x_t, t)
    mean = _ddpm_mean(sched, x_t, t, eps)
    sigma = sched.sigma(t)
    out = mean + sigma * z
    if spec is None or not spec.active:
        if record is not None:
            record.append(StepRecord(t, None, float("nan"), 0.0))
        return out
    g, n, conf = guidance_gradient(sched, bank, spec, x_t, t, eps=eps, merge=merge)
    if record is not None:
        record.append(StepRecord(t, n, conf, _mean_norm(g)))
    if spec.scale == 0:
        return out
    return out - _apply_guidance(g, mean - x_t, spec, sigma)


def ddim_step(sched: NoiseSchedule, model, x_t, t: int, t_prev: int, eta: float, z,
              bank: Optional[ExpertBank] = None, spec: Optional[GuidanceSpec] = None,
              merge: bool = False, record: Optional[list] = None) -> np.ndarray:
    if not 0 <= t_prev < t <= sched.T:
        raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = model.predict_eps(x_t, t)
    x0_hat = predict_x0(sched, model, x_t, t, eps=eps)
    ap = sched.abar(t_prev)
    sig = ddim_sigma(sched, t, t_prev, eta)
    mean = np.sqrt(ap) * x0_hat + np.sqrt(max(1.0 - ap - sig * sig, 0.0)) * eps
    out = mean + sig * np.asarray(z, dtype=np.float64)
    if spec is None or not spec.active:
        if record is not None:
            record.append(StepRecord(t, None, float("nan"), 0.0))
        return out
    g, n, conf = guidance_gradient(sched, bank, spec, x_t, t, eps=eps, merge=merge)
    if record is not None:
        record.append(StepRecord(t, n, conf, _mean_norm(g)))
    if spec.scale == 0:
        return out
    return out - _apply_guidance(g, mean - x_t, spec, ddim_sigma(sched, t, t_prev, 1.0))


def _mean_norm(g: np.ndarray) -> float:
    return float(np.sqrt((g.reshape(g.shape[0], -1) ** 2).sum(axis=1)).mean())


def sample(sched: NoiseSchedule, model, bank: Optional[ExpertBank], spec: Optional[GuidanceSpec],
           cfg: SamplerConfig, batch: int, dim: Optional[int] = None, merge: bool = False) -> SampleResult:
    """Run a full reverse chain from seeded Gaussian noise.

    ``kind="ddpm"`` with ``steps == T`` uses the ancestral rule; fewer DDPM
    steps use the respaced posterior (a DDIM jump with ``eta = 1``).
    """
    cfg.validate(sched.T)
    if spec is not None and spec.active:
        _check_bank(bank, spec)
    dim = dim if dim is not None else getattr(getattr(model, "spec", None), "input_dim", 1)
    rng = rng_for(cfg.seed, "sample")
    x = rng.standard_normal((batch, dim))
    trace: list = []
    ts = timestep_sequence(sched.T, cfg.steps)
    try:
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            z = rng.standard_normal(x.shape)
            if t_prev == 0:
                z = np.zeros_like(z)
            if cfg.kind == "ddpm" and cfg.steps == sched.T:
                x = guided_step(sched, model, bank, spec, x, t, z, merge=merge, record=trace)
            else:
                eta = 1.0 if cfg.kind == "ddpm" else cfg.eta
                x = ddim_step(sched, model, x, t, t_prev, eta, z, bank, spec, merge=merge, record=trace)
    finally:
        if bank is not None and bank.merged is not None:
            bank.unmerge()
    return SampleResult(x, trace)
