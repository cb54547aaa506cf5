"""Ground-truth posterior machinery used to judge the learned samplers.

Conjugate updates for the Gaussian task, exact 2^n branch expansion for the
two mixture-likelihood tasks, a random-walk Metropolis reference for the ODE
tasks, and analytic diffused-Gaussian scores for sampler-only tests.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .schedule import NoiseSchedule
from .tasks import GG_SIGMA_DIAG, GMOG_SCALES, TaskModel

LOG_2PI = np.log(2.0 * np.pi)

MIXTURE_MAX_OBS = 12  # 2^n components; beyond this fall back to rwm_posterior


class StepScaleError(RuntimeError):
    """Random-walk chain effectively stuck (acceptance below 1%)."""


@dataclass(frozen=True)
class GaussianDist:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if cov.shape != (mean.size, mean.size):
            raise ValueError("covariance shape does not match mean")
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("covariance must be positive definite") from None
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + rng.standard_normal((n, self.dim)) @ self._chol.T

    def logpdf(self, theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        resid = theta - self.mean
        y = np.linalg.solve(self._chol, resid.T)
        logdet = 2.0 * np.sum(np.log(np.diag(self._chol)))
        out = -0.5 * (np.sum(y * y, axis=0) + logdet + self.dim * LOG_2PI)
        return out if out.size > 1 else float(out[0])

    def score(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        resid = theta - self.mean
        return -np.linalg.solve(self.cov, resid.T).T


@dataclass(frozen=True)
class GaussianMixture:
    log_weights: np.ndarray           # normalized: logsumexp == 0
    components: list[GaussianDist]

    def __post_init__(self) -> None:
        lw = np.asarray(self.log_weights, dtype=float)
        object.__setattr__(self, "log_weights", lw)
        if abs(logsumexp(lw)) > 1e-12:
            raise ValueError("mixture weights must be normalized")
        if len(self.components) != lw.size:
            raise ValueError("weight/component count mismatch")
        object.__setattr__(self, "_means", np.stack([c.mean for c in self.components]))
        object.__setattr__(self, "_cov_diags",
                           np.stack([np.diag(c.cov) for c in self.components]))

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def component_means(self) -> np.ndarray:
        return self._means

    def mean(self) -> np.ndarray:
        w = np.exp(self.log_weights)
        return w @ self._means

    def cov(self) -> np.ndarray:
        w = np.exp(self.log_weights)
        mu = self.mean()
        out = np.zeros((self.dim, self.dim))
        for wi, c in zip(w, self.components):
            d = c.mean - mu
            out += wi * (c.cov + np.outer(d, d))
        return out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(len(self.components), size=n, p=np.exp(self.log_weights))
        out = np.empty((n, self.dim))
        for i in np.unique(idx):
            take = np.where(idx == i)[0]
            out[take] = self.components[i].sample(len(take), rng)
        return out

    def logpdf(self, theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        # components here always carry diagonal covariances
        resid = theta[:, None, :] - self._means[None, :, :]
        quad = np.sum(resid ** 2 / self._cov_diags[None, :, :], axis=2)
        logdet = np.sum(np.log(self._cov_diags), axis=1)
        comp_lp = -0.5 * (quad + logdet + self.dim * LOG_2PI)
        out = logsumexp(comp_lp + self.log_weights[None, :], axis=1)
        return out if out.size > 1 else float(out[0])


def standard_normal_logpdf(theta: np.ndarray) -> np.ndarray:
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    out = -0.5 * (np.sum(theta ** 2, axis=1) + theta.shape[1] * LOG_2PI)
    return out if out.size > 1 else float(out[0])


# ---------------------------------------------------------------------------
# conjugate Gaussian posterior for the gg task

def gg_posterior(observations: np.ndarray,
                 sigma_diag: np.ndarray | None = None) -> GaussianDist:
    """Posterior under a standard-normal prior and N(x | theta, diag(sigma)) likelihood."""
    X = np.atleast_2d(np.asarray(observations, dtype=float))
    if X.shape[0] < 1:
        raise ValueError("need at least one observation")
    sd = np.asarray(GG_SIGMA_DIAG if sigma_diag is None else sigma_diag, dtype=float)
    n = X.shape[0]
    prec = 1.0 + n / sd
    cov = 1.0 / prec
    mean = cov * (X.sum(axis=0) / sd)
    return GaussianDist(mean=mean, cov=np.diag(cov))


# ---------------------------------------------------------------------------
# exact mixture-expansion posteriors (multimodal and gmog, n <= 12)

def _branch_posterior(Y: np.ndarray, obs_vars: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sequential conjugate updates for every branch at once.

    Y: (K, n, d) effective observations per branch; obs_vars: (K, n, d)
    diagonal observation variances. Returns (means, var_diags, log_evidence).
    """
    K, n, d = Y.shape
    mean = np.zeros((K, d))
    var = np.ones((K, d))
    log_ev = np.zeros(K)
    for i in range(n):
        pred_var = var + obs_vars[:, i, :]
        resid = Y[:, i, :] - mean
        log_ev += -0.5 * np.sum(resid ** 2 / pred_var + np.log(pred_var) + LOG_2PI,
                                axis=1)
        gain = var / pred_var
        mean = mean + gain * resid
        var = var * obs_vars[:, i, :] / pred_var
    return mean, var, log_ev


def mixture_posterior(task: str | TaskModel, observations: np.ndarray) -> GaussianMixture:
    """Exact 2^n-component posterior for the mixture-likelihood tasks."""
    name = task if isinstance(task, str) else task.name
    X = np.atleast_2d(np.asarray(observations, dtype=float))
    n, d = X.shape
    if n > MIXTURE_MAX_OBS:
        raise ValueError(f"mixture expansion limited to n <= {MIXTURE_MAX_OBS}, got {n}")
    branches = np.array(list(itertools.product((0, 1), repeat=n)))
    K = branches.shape[0]
    if name == "multimodal":
        signs = np.where(branches == 0, 1.0, -1.0)  # (K, n)
        Y = signs[:, :, None] * X[None, :, :]
        obs_vars = np.full((K, n, d), 0.5)
    elif name == "gmog":
        scales = np.where(branches == 0, GMOG_SCALES[0], GMOG_SCALES[1])  # (K, n)
        Y = np.broadcast_to(X[None, :, :], (K, n, d)).copy()
        obs_vars = scales[:, :, None] * GG_SIGMA_DIAG[None, None, :]
    else:
        raise ValueError(f"no mixture expansion for task {name!r}")
    means, var_diags, log_ev = _branch_posterior(Y, obs_vars)
    log_w = log_ev + n * np.log(0.5)
    log_w = log_w - logsumexp(log_w)
    comps = [GaussianDist(mean=means[i], cov=np.diag(var_diags[i])) for i in range(K)]
    return GaussianMixture(log_weights=log_w, components=comps)


# ---------------------------------------------------------------------------
# random-walk Metropolis on the working-space posterior (exact likelihood)

@dataclass(frozen=True)
class RwmResult:
    samples: np.ndarray
    acceptance_rate: float
    step_scale: float


def _log_posterior(task: TaskModel, X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    prior = -0.5 * np.sum(Z ** 2, axis=1)
    return prior + task.log_likelihood_set_batch(Z, X)


def rwm_posterior(task: TaskModel, observations: np.ndarray, n_steps: int,
                  step_scale: float | None = None,
                  rng: np.random.Generator | None = None,
                  n_chains: int = 32, init: np.ndarray | None = None,
                  max_kept: int = 10_000) -> RwmResult:
    """Gaussian-proposal random-walk Metropolis; auto-tunes the step scale
    toward 30% acceptance during a 20% burn-in, pools thinned post-burn-in
    draws across chains."""
    if n_steps < 10_000:
        raise ValueError("need n_steps >= 10^4 for a trustworthy reference")
    if rng is None:
        rng = np.random.default_rng(0)
    X = np.atleast_2d(np.asarray(observations, dtype=float))
    d = task.theta_dim
    scale = float(step_scale) if step_scale is not None else 2.4 / np.sqrt(d)

    per_chain = int(np.ceil(n_steps / n_chains))
    burn = max(1, per_chain // 5)
    post = per_chain - burn
    thin = max(1, int(np.ceil(post * n_chains / max_kept)))

    if init is None:
        Z = 0.1 * rng.standard_normal((n_chains, d))
    else:
        Z = np.tile(np.asarray(init, dtype=float), (n_chains, 1))
    logp = _log_posterior(task, X, Z)

    kept = []
    accepted = 0
    window_acc = 0
    tune_every = 15
    for step in range(per_chain):
        prop = Z + scale * rng.standard_normal((n_chains, d))
        logp_prop = _log_posterior(task, X, prop)
        with np.errstate(invalid="ignore"):
            accept = np.log(rng.random(n_chains)) < logp_prop - logp
        Z = np.where(accept[:, None], prop, Z)
        logp = np.where(accept, logp_prop, logp)
        if step < burn:
            window_acc += int(accept.sum())
            if (step + 1) % tune_every == 0:
                rate = window_acc / (tune_every * n_chains)
                scale *= float(np.clip(np.exp(4.0 * (rate - 0.3)), 1.0 / 3.0, 3.0))
                window_acc = 0
        else:
            accepted += int(accept.sum())
            if (step - burn) % thin == 0:
                kept.append(Z.copy())
    acc_rate = accepted / max(1, post * n_chains)
    if acc_rate < 0.01:
        raise StepScaleError(f"acceptance rate {acc_rate:.4f} < 1%; retune step scale")
    samples = np.concatenate(kept, axis=0)
    return RwmResult(samples=samples, acceptance_rate=acc_rate, step_scale=scale)


# ---------------------------------------------------------------------------
# Eq-level identity check: joint posterior vs prior-weighted product of
# single-observation posteriors

def factorization_check(task: TaskModel, observations: np.ndarray,
                        rng: np.random.Generator | None = None,
                        n_probes: int = 100) -> float:
    """Max deviation (about its probe mean, the normalizer cancels) of
    log p(theta|x_1..n) - [(1-n) log p(theta) + sum_i log p(theta|x_i)]."""
    if rng is None:
        rng = np.random.default_rng(0)
    X = np.atleast_2d(np.asarray(observations, dtype=float))
    n = X.shape[0]
    if task.name == "gg":
        full = gg_posterior(X).logpdf
        singles = [gg_posterior(X[i:i + 1]).logpdf for i in range(n)]
    elif task.name in ("multimodal", "gmog"):
        full = mixture_posterior(task.name, X).logpdf
        singles = [mixture_posterior(task.name, X[i:i + 1]).logpdf for i in range(n)]
    else:
        raise ValueError(f"no tractable posterior for task {task.name!r}")
    probes = rng.standard_normal((n_probes, task.theta_dim))
    lhs = np.atleast_1d(full(probes))
    rhs = (1.0 - n) * np.atleast_1d(standard_normal_logpdf(probes))
    for s in singles:
        rhs = rhs + np.atleast_1d(s(probes))
    diff = lhs - rhs
    return float(np.max(np.abs(diff - diff.mean())))


# ---------------------------------------------------------------------------
# analytic scores of diffused Gaussians / posteriors (sampler-only tests)

def diffused_gaussian_scores(dists: list[GaussianDist], sch: NoiseSchedule):
    """Fused analytic score of the diffused N(m_j, C_j) per subset j.

    Requires diagonal covariances; returns f(thetas (B, d), t) -> (k, B, d)
    evaluating -(theta - sqrt(g) m_j) / (g c_j + 1 - g) elementwise.
    """
    M = np.stack([d.mean for d in dists])
    V = np.stack([np.diag(d.cov) for d in dists])
    for d in dists:
        if not np.allclose(d.cov, np.diag(np.diag(d.cov))):
            raise ValueError("diffused_gaussian_scores requires diagonal covariances")

    def fn(thetas: np.ndarray, t: int) -> np.ndarray:
        g = sch.gamma_at(t)
        var = g * V + (1.0 - g)  # (k, d)
        return -(thetas[None, :, :] - np.sqrt(g) * M[:, None, :]) / var[:, None, :]

    return fn
