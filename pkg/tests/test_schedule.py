import numpy as np
import pytest

from npse.schedule import (ScheduleDegenerateError, diffuse, gaussian_diffused,
                           kernel_score, make_schedule)
from conftest import ZeroRng, central_diff


def test_default_schedule_invariants(sch):
    assert sch.T == 400
    assert np.isclose(sch.gamma[0], 1.0 - 1e-4)
    assert np.all(np.diff(sch.gamma) < 0)
    assert 0.0 < sch.gamma[-1] < 1e-3
    assert np.all((sch.alpha > 0) & (sch.alpha < 1))
    rel = np.abs(sch.gamma - np.cumprod(sch.alpha)) / sch.gamma
    assert rel.max() < 1e-10


def test_two_step_product():
    s = make_schedule(T=2, beta_min=0.5, beta_max=0.5, require_reference=False)
    assert np.allclose(s.gamma, [0.5, 0.25])
    assert np.allclose(s.alpha, [0.5, 0.5])


@pytest.mark.parametrize("kwargs", [
    dict(T=1), dict(T=0),
    dict(T=10, beta_min=0.0), dict(T=10, beta_min=-0.1),
    dict(T=10, beta_min=0.5, beta_max=0.4),
    dict(T=10, beta_min=0.5, beta_max=1.0),
])
def test_invalid_arguments(kwargs):
    with pytest.raises(ValueError):
        make_schedule(**kwargs)


def test_degenerate_schedule_rejected():
    with pytest.raises(ScheduleDegenerateError):
        make_schedule(T=2, beta_min=1e-4, beta_max=1e-4)


def test_level_bounds(sch):
    with pytest.raises(IndexError):
        sch.gamma_at(0)
    with pytest.raises(IndexError):
        sch.gamma_at(sch.T + 1)
    with pytest.raises(IndexError):
        diffuse(np.zeros(3), sch.T + 1, sch, np.random.default_rng(0))


def test_diffuse_zero_noise(sch):
    theta0 = np.array([1.0, -2.0, 0.5])
    theta_t, eps = diffuse(theta0, 100, sch, ZeroRng())
    assert np.allclose(eps, 0.0)
    assert np.allclose(theta_t, np.sqrt(sch.gamma_at(100)) * theta0)


def test_diffuse_zero_signal(sch, rng):
    theta_t, eps = diffuse(np.zeros(4), 250, sch, rng)
    assert np.allclose(theta_t, np.sqrt(1.0 - sch.gamma_at(250)) * eps)


def test_diffuse_monte_carlo_moments(sch):
    rng = np.random.default_rng(0)
    theta0 = np.array([0.7, -1.1])
    t = 180
    n = 100_000
    g = sch.gamma_at(t)
    draws, _ = diffuse(np.tile(theta0, (n, 1)), t, sch, rng)
    se_mean = np.sqrt((1 - g) / n)
    assert np.all(np.abs(draws.mean(0) - np.sqrt(g) * theta0) < 3 * se_mean)
    cov = np.cov(draws.T)
    se_var = (1 - g) * np.sqrt(2.0 / n)
    assert np.all(np.abs(np.diag(cov) - (1 - g)) < 3 * se_var)
    assert abs(cov[0, 1]) < 3 * (1 - g) / np.sqrt(n)


def test_kernel_score_mode_and_eps_identity(sch, rng):
    theta0 = rng.standard_normal(5)
    t = 37
    g = sch.gamma_at(t)
    assert np.allclose(kernel_score(np.sqrt(g) * theta0, theta0, t, sch), 0.0)
    theta_t, eps = diffuse(theta0, t, sch, rng)
    s = kernel_score(theta_t, theta0, t, sch)
    assert np.abs(s * (-np.sqrt(1 - g)) - eps).max() < 1e-12


@pytest.mark.parametrize("t", [1, 50, 399, 400])
def test_kernel_score_matches_finite_differences(sch, rng, t):
    theta0 = rng.standard_normal(3)
    theta_t, _ = diffuse(theta0, t, sch, rng)
    g = sch.gamma_at(t)

    def logpdf(th):
        return float(-0.5 * np.sum((th - np.sqrt(g) * theta0) ** 2) / (1 - g))

    s = kernel_score(theta_t, theta0, t, sch)
    for i in range(3):
        fd = central_diff(logpdf, theta_t, i)
        assert abs(fd - s[i]) / max(abs(fd), abs(s[i])) < 1e-6


def test_gaussian_diffused_standard_normal_fixed_point(sch):
    for t in (1, 123, 400):
        mu, C = gaussian_diffused(np.zeros(3), np.eye(3), t, sch)
        assert np.allclose(mu, 0.0)
        assert np.allclose(C, np.eye(3))


def test_gaussian_diffused_reference_limit(sch, rng):
    mu0 = rng.standard_normal(4)
    C0 = np.diag(rng.uniform(0.5, 2.0, 4))
    mu, C = gaussian_diffused(mu0, C0, sch.T, sch)
    assert np.linalg.norm(mu) < 0.05
    # operator norm distance to the identity below the gamma_T threshold scale
    assert np.linalg.norm(C - np.eye(4), ord=2) < 1e-3 * np.abs(C0 - np.eye(4)).max() + 1e-3


def test_gaussian_diffused_monte_carlo(sch):
    rng = np.random.default_rng(3)
    mu0 = np.array([1.0, -0.5])
    C0 = np.array([[0.8, 0.3], [0.3, 1.2]])
    t = 200
    n = 100_000
    chol = np.linalg.cholesky(C0)
    base = mu0 + rng.standard_normal((n, 2)) @ chol.T
    draws, _ = diffuse(base, t, sch, rng)
    mu, C = gaussian_diffused(mu0, C0, t, sch)
    sd = np.sqrt(np.diag(C))
    assert np.all(np.abs(draws.mean(0) - mu) < 3 * sd / np.sqrt(n))
    emp = np.cov(draws.T)
    for i in range(2):
        for j in range(2):
            se = np.sqrt((C[i, i] * C[j, j] + C[i, j] ** 2) / n)
            assert abs(emp[i, j] - C[i, j]) < 3 * se


def test_gaussian_diffused_rejects_bad_covariance(sch):
    with pytest.raises(ValueError):
        gaussian_diffused(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), 10, sch)
    with pytest.raises(ValueError):
        gaussian_diffused(np.zeros(2), np.array([[1.0, 0.5], [0.4, 1.0]]), 10, sch)
