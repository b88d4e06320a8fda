"""Noise schedules, the closed-form forward process and expert timestep ranges."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VARIANCE_KINDS = ("posterior", "beta")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-timestep diffusion coefficients, indexed by timestep ``t`` in 1..T.

    Arrays are stored 0-based (``beta[t - 1]`` is beta_t); use the accessor
    methods, which also honour the alpha_bar_0 = 1 convention.
    """

    beta: np.ndarray
    variance: str = "posterior"
    alpha_bar: np.ndarray = field(init=False, repr=False)
    sigma2: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        beta = np.array(self.beta, dtype=np.float64).reshape(-1)
        if beta.size < 1:
            raise ValueError("schedule needs at least one timestep")
        if not np.all((beta > 0) & (beta < 1)):
            raise ValueError("every beta_t must lie in (0, 1)")
        if self.variance not in VARIANCE_KINDS:
            raise ValueError(f"variance must be one of {VARIANCE_KINDS}, got {self.variance!r}")
        beta.setflags(write=False)
        alpha_bar = np.cumprod(1.0 - beta)
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        if self.variance == "posterior":
            sigma2 = beta * (1.0 - prev) / (1.0 - alpha_bar)
        else:
            sigma2 = beta.copy()
        alpha_bar.setflags(write=False)
        sigma2.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "sigma2", sigma2)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def _check(self, t: int, allow_zero: bool = True) -> int:
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")
        return t

    def abar(self, t: int) -> float:
        t = self._check(t)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check(t, allow_zero=False) - 1])

    def sigma(self, t: int) -> float:
        return float(np.sqrt(self.sigma2[self._check(t, allow_zero=False) - 1]))

    def snr(self) -> np.ndarray:
        return np.sqrt(self.alpha_bar) / np.sqrt(1.0 - self.alpha_bar)


def make_linear_schedule(
    T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02, variance: str = "posterior"
) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T)), variance=variance)


def q_sample(sched: NoiseSchedule, x0, t, eps) -> np.ndarray:
    """Draw x_t from the closed-form marginal given x_0 and standard noise.

    ``t`` is a scalar timestep or one timestep per leading row of ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} differs from x0 shape {x0.shape}")
    t = np.asarray(t)
    if t.ndim == 0:
        a = sched.abar(int(t))
        return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps
    if np.any(t < 0) or np.any(t > sched.T):
        raise ValueError(f"timesteps outside [0, {sched.T}]")
    a = np.concatenate([[1.0], sched.alpha_bar])[t.astype(np.int64)]
    a = a.reshape(a.shape + (1,) * (x0.ndim - a.ndim))
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def expert_range(N: int, T: int, n: int) -> tuple[int, int]:
    """Inclusive timestep interval owned by expert ``n`` of ``N``.

    When N does not divide T the first ``T % N`` experts get one extra step.
    """
    if N < 1 or T < N:
        raise ValueError(f"need 1 <= N <= T, got N={N}, T={T}")
    if not 1 <= n <= N:
        raise ValueError(f"expert index {n} outside [1, {N}]")
    size, extra = divmod(T, N)
    lo = (n - 1) * size + min(n - 1, extra) + 1
    hi = lo + size - 1 + (1 if n <= extra else 0)
    return lo, hi


def expert_for_timestep(N: int, T: int, t: int) -> int:
    """The expert index whose range contains ``t`` (1 <= t <= T)."""
    if not 1 <= t <= T:
        raise ValueError(f"timestep {t} outside [1, {T}]")
    size, extra = divmod(T, N)
    boundary = extra * (size + 1)
    if t <= boundary:
        return (t - 1) // (size + 1) + 1
    return extra + (t - boundary - 1) // size + 1
