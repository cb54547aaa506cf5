"""Noise schedule and Gaussian diffusion kernels.

The schedule owns the signal-retention ladder gamma_1 > ... > gamma_T and the
per-level ratios alpha_t. Level t = 0 means "target, no diffusion" and is
never an array index; gamma[t - 1] holds gamma_t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# gamma_T must sit below this for the reference N(0, I) to be usable.
GAMMA_FINAL_MAX = 1e-3

DEFAULT_T = 400
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.04


class ScheduleDegenerateError(ValueError):
    """Requested schedule does not decay below the reference threshold."""


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_min: float
    beta_max: float
    gamma: np.ndarray  # gamma[t-1] = gamma_t, strictly decreasing in (0, 1)
    alpha: np.ndarray  # alpha[0] = gamma_1, alpha[t-1] = gamma_t / gamma_{t-1}

    def gamma_at(self, t: int) -> float:
        _check_level(t, self.T)
        return float(self.gamma[t - 1])

    def alpha_at(self, t: int) -> float:
        _check_level(t, self.T)
        return float(self.alpha[t - 1])


def _check_level(t: int, T: int) -> None:
    if not 1 <= t <= T:
        raise IndexError(f"noise level t={t} outside 1..{T}")


def make_schedule(
    T: int = DEFAULT_T,
    beta_min: float = DEFAULT_BETA_MIN,
    beta_max: float = DEFAULT_BETA_MAX,
    require_reference: bool = True,
) -> NoiseSchedule:
    """Variance-preserving ladder with beta_t linearly spaced on t = 1..T.

    require_reference=False skips the gamma_T < 1e-3 check so short test
    ladders can be built; samplers assume it holds.
    """
    if T < 2:
        raise ValueError(f"need T >= 2 noise levels, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    beta = np.linspace(beta_min, beta_max, T)
    alpha = 1.0 - beta
    gamma = np.cumprod(alpha)
    if require_reference and gamma[-1] >= GAMMA_FINAL_MAX:
        raise ScheduleDegenerateError(
            f"gamma_T = {gamma[-1]:.3e} >= {GAMMA_FINAL_MAX}; raise T or the beta range"
        )
    gamma.setflags(write=False)
    alpha.setflags(write=False)
    return NoiseSchedule(T=T, beta_min=float(beta_min), beta_max=float(beta_max),
                         gamma=gamma, alpha=alpha)


def diffuse(theta0: np.ndarray, t: int, sch: NoiseSchedule,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw theta_t ~ N(sqrt(gamma_t) theta0, (1 - gamma_t) I); returns (theta_t, eps)."""
    g = sch.gamma_at(t)
    theta0 = np.asarray(theta0, dtype=float)
    eps = rng.standard_normal(theta0.shape)
    return np.sqrt(g) * theta0 + np.sqrt(1.0 - g) * eps, eps


def kernel_score(theta_t: np.ndarray, theta0: np.ndarray, t: int,
                 sch: NoiseSchedule) -> np.ndarray:
    """Score of the diffusion kernel at theta_t, i.e. -(theta_t - sqrt(gamma_t) theta0) / (1 - gamma_t)."""
    g = sch.gamma_at(t)
    theta_t = np.asarray(theta_t, dtype=float)
    theta0 = np.asarray(theta0, dtype=float)
    return -(theta_t - np.sqrt(g) * theta0) / (1.0 - g)


def gaussian_diffused(mu: np.ndarray, C: np.ndarray, t: int,
                      sch: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Moments of the diffusion of N(mu, C): (sqrt(gamma_t) mu, gamma_t C + (1 - gamma_t) I)."""
    g = sch.gamma_at(t)
    mu = np.asarray(mu, dtype=float)
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError("covariance must be a square matrix")
    if not np.allclose(C, C.T):
        raise ValueError("covariance must be symmetric")
    try:
        np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        raise ValueError("covariance must be positive definite") from None
    return np.sqrt(g) * mu, g * C + (1.0 - g) * np.eye(C.shape[0])
