"""Training loops: the noise predictor, guidance teachers, and expert banks."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as tn
from .experts import ExpertBank
from .networks import MLP, EpsilonModel
from .rng import rng_for
from .samplers import SamplerConfig, sample
from .schedule import NoiseSchedule, expert_range, q_sample
from .tensor import Tensor

logger = logging.getLogger(__name__)

KT_LOSS_KINDS = ("class_nll", "regression_l1", "dense_l1")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Optimisation settings shared by every loop.

    ``iterations`` counts optimiser steps in total; an expert bank splits
    them evenly across its experts. The learning rate and weight decay
    defaults are the large-model values; desk-scale runs usually raise the
    learning rate.
    """

    iterations: int = 2000
    batch_size: int = 128
    learning_rate: float = 1e-4
    weight_decay: float = 0.05
    seed: int = 0
    expert_count: int = 5
    dataset_size: int = 50000
    temperature: float = 1.0
    loss_kind: str = "class_nll"
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name in ("batch_size", "expert_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.dataset_size < 0:
            raise ValueError("learning_rate must be positive; weight_decay and dataset_size non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.loss_kind not in KT_LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {KT_LOSS_KINDS}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")

    def to_dict(self) -> dict:
        return asdict(self)


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr: float = 1e-4, weight_decay: float = 0.05,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.weight_decay, self.eps = lr, weight_decay, eps
        self.b1, self.b2 = betas
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.steps += 1
        c1 = 1.0 - self.b1 ** self.steps
        c2 = 1.0 - self.b2 ** self.steps
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            data = p.data * (1.0 - self.lr * self.weight_decay)
            p.data = data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _check_loss(loss: Tensor, step: int, what: str) -> float:
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingDiverged(f"{what}: non-finite loss {value} at step {step}")
    return value


def _optimise(params, cfg: TrainConfig, iterations: int, loss_fn: Callable[[int], Tensor], what: str) -> list:
    for p in params:
        p.requires_grad = True
    opt = AdamW(params, cfg.learning_rate, cfg.weight_decay)
    curve = []
    try:
        for step in range(iterations):
            if cfg.lr_schedule == "cosine":
                opt.lr = 0.5 * cfg.learning_rate * (1.0 + np.cos(np.pi * step / iterations))
            opt.zero_grad()
            with tn.GradTape():
                loss = loss_fn(step)
                curve.append(_check_loss(loss, step, what))
                tn.backward(loss)
            opt.step()
    finally:
        for p in params:
            p.requires_grad = False
            p.grad = None
    return curve


def train_epsilon(sched: NoiseSchedule, model: EpsilonModel, data: np.ndarray, cfg: TrainConfig) -> list:
    """Fit the noise predictor by regressing the injected noise; returns the loss curve."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data.reshape(-1, 1)
    if len(data) == 0:
        raise ValueError("training data is empty")
    rng = rng_for(cfg.seed, "train_epsilon")

    def loss_fn(step):
        idx = rng.integers(len(data), size=cfg.batch_size)
        t = rng.integers(1, sched.T + 1, size=cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size, data.shape[1]))
        x_t = q_sample(sched, data[idx], t, eps)
        return tn.mse(model.forward(Tensor(x_t), t), Tensor(eps))

    curve = _optimise(model.parameters(), cfg, cfg.iterations, loss_fn, "train_epsilon")
    if curve:
        logger.info("train_epsilon: final loss %.4f", np.mean(curve[-50:]))
    return curve


def train_teacher(net: MLP, x: np.ndarray, targets: np.ndarray, cfg: TrainConfig, loss_kind: str = "class_nll") -> list:
    """Train an off-the-shelf guidance network on clean data only.

    ``class_nll`` takes integer labels; ``regression_l1`` takes target vectors;
    ``dense_l1`` takes ``(n, rows, C)`` probability maps and is fitted by KL.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("training data is empty")
    rng = rng_for(cfg.seed, "train_teacher")

    def loss_fn(step):
        idx = rng.integers(len(x), size=cfg.batch_size)
        out = net.forward(Tensor(x[idx]))
        if loss_kind == "class_nll":
            return tn.cross_entropy(out, targets[idx])
        if loss_kind == "regression_l1":
            return tn.l1_distance(out, Tensor(targets[idx]))
        tgt = targets[idx]
        logp = tn.log_softmax(tn.reshape(out, tgt.shape))
        return tn.kl_divergence(Tensor(tgt), logp)

    return _optimise(net.parameters(), cfg, cfg.iterations, loss_fn, "train_teacher")


def supervised_loss(out: Tensor, target: np.ndarray, loss_kind: str) -> Tensor:
    if loss_kind == "class_nll":
        return tn.cross_entropy(out, target)
    if loss_kind == "regression_l1":
        return tn.l1_distance(out, Tensor(target))
    logp = tn.log_softmax(tn.reshape(out, target.shape))
    return tn.kl_divergence(Tensor(target), logp)


def kt_loss(teacher_out, student_out, loss_kind: str = "class_nll", temperature: float = 1.0,
            map_shape: Optional[tuple] = None) -> Tensor:
    """Knowledge-transfer loss between a detached teacher and a student.

    ``class_nll``: KL(softmax(teacher / temperature) || softmax(student)), the
    temperature applied to the teacher only. ``regression_l1`` and
    ``dense_l1``: mean absolute difference of the raw outputs.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    teacher = np.asarray(teacher_out.data if isinstance(teacher_out, Tensor) else teacher_out, dtype=np.float64)
    student = tn.as_tensor(student_out)
    if teacher.shape != student.shape:
        raise tn.ShapeError(f"teacher {teacher.shape} and student {student.shape} outputs differ")
    if loss_kind == "class_nll":
        z = teacher / temperature
        z = z - z.max(axis=-1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
        return tn.kl_divergence(Tensor(p), tn.log_softmax(student))
    if loss_kind in ("regression_l1", "dense_l1"):
        return tn.l1_distance(Tensor(teacher), student)
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def _bank_forward(bank: ExpertBank, x: np.ndarray, n: Optional[int], t) -> Tensor:
    return bank.forward(Tensor(x), n, t=t if bank.spec.time_embed_dim else None)


def _train_bank(sched: NoiseSchedule, bank: ExpertBank, x: np.ndarray, cfg: TrainConfig, what: str,
                loss_of: Callable, experts=None, on_draw: Optional[Callable] = None) -> dict:
    if bank.merged is not None:
        raise RuntimeError("unmerge the bank before training")
    if len(x) == 0:
        raise ValueError("training data is empty")
    experts = range(1, bank.n_experts + 1) if experts is None else experts
    per_expert = cfg.iterations // bank.n_experts
    curves = {}
    for n in experts:
        lo, hi = expert_range(bank.n_experts, bank.T, n)
        rng = rng_for(cfg.seed, f"{what}/expert{n}")

        def loss_fn(step, n=n, lo=lo, hi=hi, rng=rng):
            idx = rng.integers(len(x), size=cfg.batch_size)
            t = rng.integers(lo, hi + 1, size=cfg.batch_size)
            if on_draw is not None:
                on_draw(n, t)
            x_t = q_sample(sched, x[idx], t, rng.standard_normal((cfg.batch_size,) + x.shape[1:]))
            return loss_of(_bank_forward(bank, x_t, n, t), idx)

        curves[n] = _optimise(bank.trainable_parameters(n), cfg, per_expert, loss_fn, f"{what}[{n}]")
    return curves


def train_experts_supervised(sched: NoiseSchedule, bank: ExpertBank, x: np.ndarray, y: np.ndarray,
                             cfg: TrainConfig, experts=None, on_draw: Optional[Callable] = None) -> dict:
    """Fit each expert on labelled data corrupted to timesteps from its own range."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if cfg.loss_kind == "class_nll":
        y = y.astype(np.int64)
        if y.min(initial=0) < 0 or y.max(initial=0) >= bank.spec.output_dim:
            raise ValueError("labels must be valid class indices")
    return _train_bank(sched, bank, x, cfg, "supervised",
                       lambda out, idx: supervised_loss(out, y[idx], cfg.loss_kind), experts, on_draw)


def teacher_outputs(bank: ExpertBank, x: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Backbone predictions on clean inputs, outside any tape (the stop-gradient)."""
    if bank.merged is not None:
        raise RuntimeError("unmerge the bank before querying the teacher")
    with tn.no_grad():
        parts = [_bank_forward(bank, x[i:i + chunk], None, np.zeros(len(x[i:i + chunk]), dtype=np.int64)).data
                 for i in range(0, len(x), chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, bank.spec.output_dim))


def train_experts_data_free(sched: NoiseSchedule, bank: ExpertBank, x_tilde: np.ndarray, cfg: TrainConfig,
                            experts=None, on_draw: Optional[Callable] = None) -> dict:
    """Distil the backbone's clean-input predictions into each expert's noise range."""
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    targets = teacher_outputs(bank, x_tilde)
    return _train_bank(sched, bank, x_tilde, cfg, "data_free",
                       lambda out, idx: kt_loss(targets[idx], out, cfg.loss_kind, cfg.temperature),
                       experts, on_draw)


def generate_kt_dataset(sched: NoiseSchedule, model, count: int, cfg: TrainConfig,
                        sampler: Optional[SamplerConfig] = None, chunk: int = 5000) -> np.ndarray:
    """Unconditional samples from the diffusion model, used as unlabeled transfer data."""
    if count < 0:
        raise ValueError("count must be >= 0")
    sampler = sampler or SamplerConfig("ddim", 25, 0.0, cfg.seed)
    dim = model.spec.input_dim
    parts = []
    for i, start in enumerate(range(0, count, chunk)):
        part_cfg = SamplerConfig(sampler.kind, sampler.steps, sampler.eta, sampler.seed * 1_000_003 + i)
        parts.append(sample(sched, model, None, None, part_cfg, min(chunk, count - start), dim).x0)
    return np.concatenate(parts) if parts else np.zeros((0, dim))
