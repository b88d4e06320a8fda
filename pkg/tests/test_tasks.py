import numpy as np
import pytest
from scipy.stats import multivariate_normal

from gdl.tasks import (DescriptorTask, GmmTask, bayes_posterior, descriptor_eval, descriptor_soft_map,
                       noisy_log_posterior, optimal_eps, sample_gmm)


def test_zero_std_samples_sit_on_means():
    task = GmmTask(std=0.0)
    x, y = sample_gmm(task, 100, seed=1)
    np.testing.assert_array_equal(x, task.means[y])


def test_class_frequencies_uniform():
    task = GmmTask()
    _, y = sample_gmm(task, 80_000, seed=3)
    p = 1 / task.K
    sd = np.sqrt(80_000 * p * (1 - p))
    assert np.all(np.abs(np.bincount(y, minlength=task.K) - 80_000 * p) <= 3 * sd)


def test_sampling_is_seeded():
    a = sample_gmm(GmmTask(), 50, seed=4)
    b = sample_gmm(GmmTask(), 50, seed=4)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_rejects_bad_task():
    with pytest.raises(ValueError):
        GmmTask(K=1)
    with pytest.raises(ValueError):
        sample_gmm(GmmTask(), -1)


def test_posterior_at_mean_is_confident():
    task = GmmTask()
    assert task.R / task.std >= 8
    p = bayes_posterior(task, task.means)
    assert np.all(np.argmax(p, axis=1) == np.arange(task.K))
    assert np.all(p.max(axis=1) > 0.99)


def test_posterior_uniform_at_centroid():
    task = GmmTask()
    np.testing.assert_allclose(bayes_posterior(task, [[0.0, 0.0]]), 1 / task.K, atol=1e-12)


def test_posterior_rows_sum_to_one():
    x = np.random.default_rng(0).normal(scale=6, size=(200, 2))
    np.testing.assert_allclose(bayes_posterior(GmmTask(), x).sum(axis=1), 1.0, atol=1e-12)


def test_posterior_entropy_monotone_along_ray():
    # ray through mean 0, slightly off-axis so one component dominates
    task = GmmTask()
    direction = np.array([np.cos(0.1), np.sin(0.1)])
    radii = np.linspace(task.R, 40.0, 200)
    p = bayes_posterior(task, radii[:, None] * direction)
    ent = -(p * np.log(np.clip(p, 1e-300, None))).sum(axis=1)
    assert np.all(np.diff(ent) <= 1e-15)


def test_posterior_matches_density_grid():
    task = GmmTask()
    g = np.linspace(-6, 6, 200)
    xx, yy = np.meshgrid(g, g)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    dens = np.stack([multivariate_normal(m, task.std ** 2 * np.eye(2)).pdf(pts) for m in task.means], axis=1)
    total = dens.sum(axis=1, keepdims=True)
    ok = total[:, 0] > 1e-250  # brute force underflows far from every mean
    ref = dens[ok] / total[ok]
    assert np.max(np.abs(bayes_posterior(task, pts[ok]) - ref)) <= 1e-9


def test_optimal_eps_matches_single_gaussian_case():
    task = GmmTask(K=2, R=1e-9, std=0.5)  # means collapse to one Gaussian
    abar = 0.3
    x = np.array([[0.7, -1.2]])
    var = abar * 0.25 + 1 - abar
    np.testing.assert_allclose(optimal_eps(task, x, abar), np.sqrt(1 - abar) * x / var, rtol=1e-6)


def test_noisy_posterior_at_pure_noise_is_flat():
    task = GmmTask()
    lp = noisy_log_posterior(task, [[3.0, 1.0]], abar=0.0)
    np.testing.assert_allclose(np.exp(lp), 1 / task.K, atol=1e-12)


def test_descriptor_examples():
    task = DescriptorTask()
    np.testing.assert_allclose(descriptor_eval(task, [[1.0, 0.0]]), [[1.0, 0.0]])
    np.testing.assert_allclose(descriptor_eval(task, [[0.0, 2.0]]), [[2.0, np.pi / 2]])
    np.testing.assert_array_equal(descriptor_eval(task, [[0.0, 0.0]]), [[0.0, 0.0]])


def test_soft_map_is_distribution():
    task = DescriptorTask()
    x = np.random.default_rng(0).normal(scale=4, size=(50, 2))
    m = descriptor_soft_map(task, x)
    assert m.shape == (50, 2, task.gmm.K)
    np.testing.assert_allclose(m.sum(axis=-1), 1.0, atol=1e-12)


def test_soft_map_symmetric_input_uniform_angular_row():
    task = DescriptorTask()
    np.testing.assert_allclose(descriptor_soft_map(task, [[0.0, 0.0]])[0, 0], 1 / task.gmm.K, atol=1e-15)


def test_target_map_is_peaked_at_component():
    task = DescriptorTask()
    for k in range(task.gmm.K):
        m = descriptor_soft_map(task, task.gmm.means[k:k + 1])[0]
        assert np.argmax(m[0]) == k
        assert np.argmax(m[1]) == np.argmax(task.target_map(k)[1])
