import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdl.schedule import (NoiseSchedule, expert_for_timestep, expert_range, make_linear_schedule,
                          q_sample)


def test_default_schedule_final_alpha_bar():
    sched = make_linear_schedule(1000, 1e-4, 0.02)
    # independent product, accumulated in a plain loop
    prod = 1.0
    for b in np.linspace(1e-4, 0.02, 1000):
        prod *= 1.0 - b
    assert sched.abar(1000) == pytest.approx(prod, rel=1e-12)
    assert prod == pytest.approx(4.0358e-5, rel=1e-3)
    assert np.sqrt(sched.abar(1000)) < 0.0065


def test_constant_beta_is_geometric():
    c = 0.01
    sched = NoiseSchedule(np.full(50, c))
    np.testing.assert_allclose(sched.alpha_bar, (1 - c) ** np.arange(1, 51), rtol=1e-12)


def test_single_step_schedule():
    sched = make_linear_schedule(1, 0.3, 0.3)
    np.testing.assert_array_equal(sched.alpha_bar, [0.7])
    assert sched.sigma2[0] == 0.0


def test_alpha_bar_zero_convention():
    assert make_linear_schedule(10).abar(0) == 1.0


def test_alpha_bar_and_snr_strictly_decrease():
    sched = make_linear_schedule(1000)
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all(np.diff(sched.snr()) < 0)
    np.testing.assert_allclose(sched.alpha_bar, np.cumprod(1 - sched.beta), atol=1e-12)


def test_posterior_variance_formula():
    sched = make_linear_schedule(100)
    for t in (2, 50, 100):
        expect = sched.beta_at(t) * (1 - sched.abar(t - 1)) / (1 - sched.abar(t))
        assert sched.sigma(t) ** 2 == pytest.approx(expect, rel=1e-14)


def test_beta_variance_switch():
    sched = make_linear_schedule(100, variance="beta")
    np.testing.assert_array_equal(sched.sigma2, sched.beta)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_ranges(args):
    with pytest.raises(ValueError):
        make_linear_schedule(*args)


def test_q_sample_t0_returns_x0():
    sched = make_linear_schedule(100)
    x0 = np.array([[1.0, -2.0]])
    np.testing.assert_array_equal(q_sample(sched, x0, 0, np.ones_like(x0)), x0)


def test_q_sample_zero_noise():
    sched = make_linear_schedule(100)
    x0 = np.array([[1.0, -2.0]])
    np.testing.assert_allclose(q_sample(sched, x0, 40, np.zeros_like(x0)), np.sqrt(sched.abar(40)) * x0)


def test_q_sample_rejects_out_of_range():
    sched = make_linear_schedule(100)
    with pytest.raises(ValueError):
        q_sample(sched, np.zeros(2), 101, np.zeros(2))
    with pytest.raises(ValueError):
        q_sample(sched, np.zeros((2, 1)), np.array([3, -1]), np.zeros((2, 1)))


def test_q_sample_per_row_timesteps():
    sched = make_linear_schedule(100)
    x0 = np.ones((3, 2))
    eps = np.zeros((3, 2))
    out = q_sample(sched, x0, np.array([0, 10, 100]), eps)
    np.testing.assert_allclose(out[:, 0], np.sqrt([1.0, sched.abar(10), sched.abar(100)]))


def test_q_sample_variance_monte_carlo():
    sched = make_linear_schedule(1000)
    rng = np.random.default_rng(0)
    m = 100_000
    for t in (1, 500, 1000):
        x = q_sample(sched, np.zeros(m), t, rng.standard_normal(m))
        var = 1 - sched.abar(t)
        # standard error of a Gaussian sample variance
        se = var * np.sqrt(2.0 / (m - 1))
        assert abs(x.var(ddof=1) - var) <= 3 * se


def test_expert_range_examples():
    assert expert_range(5, 1000, 1) == (1, 200)
    assert expert_range(5, 1000, 5) == (801, 1000)
    assert expert_range(1, 1000, 1) == (1, 1000)


def test_expert_range_rejects_bad_index():
    with pytest.raises(ValueError):
        expert_range(5, 1000, 0)
    with pytest.raises(ValueError):
        expert_range(5, 1000, 6)


def test_uneven_split_gives_extra_steps_first():
    assert [expert_range(3, 10, n) for n in (1, 2, 3)] == [(1, 4), (5, 7), (8, 10)]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 300), st.integers(1, 40))
def test_ranges_partition_and_inverse(T, N):
    if N > T:
        return
    owner = np.zeros(T + 1, dtype=int)
    for n in range(1, N + 1):
        lo, hi = expert_range(N, T, n)
        assert np.all(owner[lo:hi + 1] == 0)
        owner[lo:hi + 1] = n
    assert np.all(owner[1:] > 0)
    assert all(expert_for_timestep(N, T, t) == owner[t] for t in range(1, T + 1))
