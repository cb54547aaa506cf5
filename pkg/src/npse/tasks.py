"""Benchmark generative models in prior-reparameterized form.

Every task works in a space where the prior is standard normal; `transport`
maps working-space parameters z to the model's native parameters. Simulators
are exposed three ways: the single-call `simulate(z, rng)`, and the pair
(`trajectory_batch`, `observe`) that splits the deterministic part (shared
across repeated calls with one z, vectorizable over a batch of z) from the
observation noise. `log_likelihood` is exact and used only by oracles.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import gammaln, logsumexp

LOG_2PI = np.log(2.0 * np.pi)
POP_CLAMP_TOL = 1e-9  # integrator undershoot below this magnitude clamps to 0

SIR_POPULATION = 1_000_000.0
SIR_T_END = 160.0
SIR_BINOM_N = 1000
LV_T_END = 20.0
LV_X0 = (30.0, 1.0)
LV_OBS_SCALE = 0.1
ODE_STEPS = 1000
N_OBS_TIMES = 10

GG_SIGMA_DIAG = np.linspace(0.6, 1.4, 10)
GG_SIGMA_DIAG.setflags(write=False)


class SimulationRejected(RuntimeError):
    """Simulator draw invalid for this parameter (e.g. nonpositive population)."""


class IntegratorError(RuntimeError):
    """ODE state became non-finite."""


@dataclass(frozen=True)
class OdeState:
    times: np.ndarray   # (steps + 1,)
    states: np.ndarray  # (steps + 1, ..., state_dim)


@dataclass(frozen=True)
class TaskModel:
    name: str
    theta_dim: int
    x_dim: int
    simulate: Callable[[np.ndarray, np.random.Generator], np.ndarray]
    log_likelihood: Callable[[np.ndarray, np.ndarray], float]
    transport: Callable[[np.ndarray], np.ndarray]
    # deterministic simulator core for a batch of z; returns (curves, valid)
    trajectory_batch: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
    # noise model applied to one curve; one call = one simulator call
    observe: Callable[[np.ndarray, np.random.Generator], np.ndarray]
    # sum_i log p(x_i | z_b) for a batch of z and a set of observations
    log_likelihood_set_batch: Callable[[np.ndarray, np.ndarray], np.ndarray]


def _rk4_states(deriv, y0: np.ndarray, t_end: float, steps: int) -> np.ndarray:
    y = np.array(y0, dtype=float)
    out = np.empty((steps + 1,) + y.shape)
    out[0] = y
    dt = t_end / steps
    t = 0.0
    for i in range(steps):
        k1 = deriv(t, y)
        k2 = deriv(t + dt / 2, y + (dt / 2) * k1)
        k3 = deriv(t + dt / 2, y + (dt / 2) * k2)
        k4 = deriv(t + dt, y + dt * k3)
        y = y + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        t += dt
        out[i + 1] = y
    return out


def rk4_integrate(deriv, state0: np.ndarray, t_end: float, steps: int) -> OdeState:
    """Classical fixed-step fourth-order Runge-Kutta on [0, t_end]."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    states = _rk4_states(deriv, np.asarray(state0, dtype=float), t_end, steps)
    if not np.all(np.isfinite(states)):
        raise IntegratorError("non-finite state during integration")
    return OdeState(times=np.linspace(0.0, t_end, steps + 1), states=states)


def _obs_indices(steps: int = ODE_STEPS, n_obs: int = N_OBS_TIMES) -> np.ndarray:
    # 10 evenly spaced times excluding t=0, including t_end
    return (np.arange(1, n_obs + 1) * steps) // n_obs


def _clamp_small_negatives(a: np.ndarray, tol: float = POP_CLAMP_TOL) -> np.ndarray:
    return np.where((a < 0.0) & (a > -tol), 0.0, a)


def _simulate_from_parts(task_traj, task_obs):
    def simulate(z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        curves, valid = task_traj(np.asarray(z, dtype=float)[None, :])
        if not valid[0]:
            raise SimulationRejected("invalid trajectory for this parameter draw")
        return task_obs(curves[0], rng)
    return simulate


def _diag_normal_logpdf(x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    # sums over the trailing axis; broadcasts over leading axes
    return -0.5 * np.sum((x - mean) ** 2 / var + np.log(var) + LOG_2PI, axis=-1)


# ---------------------------------------------------------------------------
# multimodal: p(x|theta) = 0.5 N(x|theta, I/2) + 0.5 N(x|-theta, I/2)

def task_multimodal() -> TaskModel:
    d = 2
    var = 0.5

    def traj(Z):
        return Z, np.ones(len(Z), dtype=bool)

    def obs(z, rng):
        sign = 1.0 if rng.random() < 0.5 else -1.0
        return sign * z + np.sqrt(var) * rng.standard_normal(d)

    def loglik(z, x):
        z = np.asarray(z, dtype=float)
        x = np.asarray(x, dtype=float)
        v = np.full(d, var)
        lp = _diag_normal_logpdf(x, z, v)
        lm = _diag_normal_logpdf(x, -z, v)
        return float(np.logaddexp(lp, lm) + np.log(0.5))

    def loglik_batch(Z, X):
        v = np.full(d, var)
        lp = _diag_normal_logpdf(X[None, :, :], Z[:, None, :], v)
        lm = _diag_normal_logpdf(X[None, :, :], -Z[:, None, :], v)
        return (np.logaddexp(lp, lm) + np.log(0.5)).sum(axis=1)

    return TaskModel(name="multimodal", theta_dim=d, x_dim=d,
                     simulate=_simulate_from_parts(traj, obs),
                     log_likelihood=loglik, transport=lambda z: np.asarray(z, float),
                     trajectory_batch=traj, observe=obs,
                     log_likelihood_set_batch=loglik_batch)


# ---------------------------------------------------------------------------
# gg: N(x | theta, Sigma), Sigma diagonal from 0.6 to 1.4

def task_gg() -> TaskModel:
    d = 10
    var = np.array(GG_SIGMA_DIAG)
    std = np.sqrt(var)

    def traj(Z):
        return Z, np.ones(len(Z), dtype=bool)

    def obs(z, rng):
        return z + std * rng.standard_normal(d)

    def loglik(z, x):
        return float(_diag_normal_logpdf(np.asarray(x, float), np.asarray(z, float), var))

    def loglik_batch(Z, X):
        return _diag_normal_logpdf(X[None, :, :], Z[:, None, :], var).sum(axis=1)

    return TaskModel(name="gg", theta_dim=d, x_dim=d,
                     simulate=_simulate_from_parts(traj, obs),
                     log_likelihood=loglik, transport=lambda z: np.asarray(z, float),
                     trajectory_batch=traj, observe=obs,
                     log_likelihood_set_batch=loglik_batch)


# ---------------------------------------------------------------------------
# gmog: 0.5 N(x|theta, 2.25 Sigma) + 0.5 N(x|theta, Sigma/9)

GMOG_SCALES = (2.25, 1.0 / 9.0)


def task_gmog() -> TaskModel:
    d = 10
    base = np.array(GG_SIGMA_DIAG)

    def traj(Z):
        return Z, np.ones(len(Z), dtype=bool)

    def obs(z, rng):
        scale = GMOG_SCALES[0] if rng.random() < 0.5 else GMOG_SCALES[1]
        return z + np.sqrt(scale * base) * rng.standard_normal(d)

    def loglik(z, x):
        z = np.asarray(z, float)
        x = np.asarray(x, float)
        l0 = _diag_normal_logpdf(x, z, GMOG_SCALES[0] * base)
        l1 = _diag_normal_logpdf(x, z, GMOG_SCALES[1] * base)
        return float(np.logaddexp(l0, l1) + np.log(0.5))

    def loglik_batch(Z, X):
        l0 = _diag_normal_logpdf(X[None, :, :], Z[:, None, :], GMOG_SCALES[0] * base)
        l1 = _diag_normal_logpdf(X[None, :, :], Z[:, None, :], GMOG_SCALES[1] * base)
        return (np.logaddexp(l0, l1) + np.log(0.5)).sum(axis=1)

    return TaskModel(name="gmog", theta_dim=d, x_dim=d,
                     simulate=_simulate_from_parts(traj, obs),
                     log_likelihood=loglik, transport=lambda z: np.asarray(z, float),
                     trajectory_batch=traj, observe=obs,
                     log_likelihood_set_batch=loglik_batch)


# ---------------------------------------------------------------------------
# SIR epidemic: z -> (beta, gamma), binomial readouts of the infected count

def sir_transport(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return np.array([np.exp(np.log(0.4) + 0.5 * z[0]),
                     np.exp(np.log(0.125) + 0.2 * z[1])])


def _sir_infected_curves(Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched infected-fraction curves at the 10 observation times."""
    N = SIR_POPULATION
    beta = np.exp(np.log(0.4) + 0.5 * Z[:, 0])
    gam = np.exp(np.log(0.125) + 0.2 * Z[:, 1])

    def deriv(t, y):
        S, I = y[..., 0], y[..., 1]
        inf = beta * S * I / N
        rec = gam * I
        return np.stack([-inf, inf - rec, rec], axis=-1)

    y0 = np.broadcast_to(np.array([N - 1.0, 1.0, 0.0]), (len(Z), 3))
    states = _rk4_states(deriv, y0, SIR_T_END, ODE_STEPS)
    infected = states[_obs_indices(), :, 1].T  # (B, 10)
    infected = _clamp_small_negatives(infected)
    valid = np.all(np.isfinite(infected), axis=1) & np.all(infected >= 0.0, axis=1) \
        & np.all(infected <= N, axis=1)
    return infected / N, valid


def _binom_logpmf(x: np.ndarray, n: int, p: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    shape = np.broadcast_shapes(x.shape, p.shape)
    xo = np.broadcast_to(x, shape)
    po = np.broadcast_to(p, shape)
    out = np.full(shape, -np.inf)
    # interior: exact log-pmf via log-gamma
    ok = (po > 0.0) & (po < 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        interior = (gammaln(n + 1) - gammaln(xo + 1) - gammaln(n - xo + 1)
                    + xo * np.log(po) + (n - xo) * np.log1p(-po))
    out[ok] = interior[ok]
    out[(po == 0.0) & (xo == 0.0)] = 0.0
    out[(po == 1.0) & (xo == n)] = 0.0
    bad = (xo < 0) | (xo > n) | (xo != np.round(xo))
    out[bad] = -np.inf
    return out


def task_sir() -> TaskModel:
    def obs(curve, rng):
        return rng.binomial(SIR_BINOM_N, curve).astype(float)

    def loglik_batch(Z, X):
        p, valid = _sir_infected_curves(np.asarray(Z, dtype=float))
        lls = _binom_logpmf(X[None, :, :], SIR_BINOM_N, p[:, None, :]).sum(axis=(1, 2))
        lls[~valid] = -np.inf
        return lls

    def loglik(z, x):
        return float(loglik_batch(np.asarray(z, float)[None, :],
                                  np.asarray(x, float)[None, :])[0])

    return TaskModel(name="sir", theta_dim=2, x_dim=N_OBS_TIMES,
                     simulate=_simulate_from_parts(_sir_infected_curves, obs),
                     log_likelihood=loglik, transport=sir_transport,
                     trajectory_batch=_sir_infected_curves, observe=obs,
                     log_likelihood_set_batch=loglik_batch)


# ---------------------------------------------------------------------------
# Lotka-Volterra: 4 log-normal parameters, log-normal readouts of both species

LV_LOG_MEANS = np.array([-0.125, -3.0, -0.125, -3.0])
LV_LOG_SCALE = 0.5


def lv_transport(z: np.ndarray) -> np.ndarray:
    return np.exp(LV_LOG_MEANS + LV_LOG_SCALE * np.asarray(z, dtype=float))


def _lv_curves(Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched (X_1..X_10, Y_1..Y_10) population curves; valid iff all positive."""
    pars = np.exp(LV_LOG_MEANS + LV_LOG_SCALE * Z)  # (B, 4)
    a, b, g, dl = pars[:, 0], pars[:, 1], pars[:, 2], pars[:, 3]

    def deriv(t, y):
        X, Y = y[..., 0], y[..., 1]
        return np.stack([a * X - b * X * Y, -g * Y + dl * X * Y], axis=-1)

    y0 = np.broadcast_to(np.array(LV_X0), (len(Z), 2))
    with np.errstate(over="ignore", invalid="ignore"):
        states = _rk4_states(deriv, y0, LV_T_END, ODE_STEPS)
    at_obs = states[_obs_indices()]  # (10, B, 2)
    curves = np.concatenate([at_obs[:, :, 0].T, at_obs[:, :, 1].T], axis=1)  # (B, 20)
    curves = _clamp_small_negatives(curves)
    valid = np.all(np.isfinite(curves), axis=1) & np.all(curves > 0.0, axis=1)
    return curves, valid


def task_lv() -> TaskModel:
    def obs(curve, rng):
        return np.exp(np.log(curve) + LV_OBS_SCALE * rng.standard_normal(curve.shape))

    def loglik_batch(Z, X):
        curves, valid = _lv_curves(np.asarray(Z, dtype=float))
        out = np.full(len(Z), -np.inf)
        if np.any(valid) and np.all(X > 0.0):
            logx = np.log(X)  # (n, 20)
            logc = np.log(curves[valid])  # (Bv, 20)
            resid = logx[None, :, :] - logc[:, None, :]
            ll = (-0.5 * resid ** 2 / LV_OBS_SCALE ** 2
                  - np.log(LV_OBS_SCALE) - 0.5 * LOG_2PI) - logx[None, :, :]
            out[valid] = ll.sum(axis=(1, 2))
        return out

    def loglik(z, x):
        return float(loglik_batch(np.asarray(z, float)[None, :],
                                  np.asarray(x, float)[None, :])[0])

    return TaskModel(name="lv", theta_dim=4, x_dim=2 * N_OBS_TIMES,
                     simulate=_simulate_from_parts(_lv_curves, obs),
                     log_likelihood=loglik, transport=lv_transport,
                     trajectory_batch=_lv_curves, observe=obs,
                     log_likelihood_set_batch=loglik_batch)


TASKS: dict[str, Callable[[], TaskModel]] = {
    "multimodal": task_multimodal,
    "gg": task_gg,
    "gmog": task_gmog,
    "sir": task_sir,
    "lv": task_lv,
}


def get_task(name: str) -> TaskModel:
    try:
        return TASKS[name]()
    except KeyError:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None
