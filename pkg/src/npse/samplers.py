"""Posterior sampling by composing per-subset scores.

Two samplers over the bridging densities: annealed Langevin dynamics, and the
Langevin-free composed ancestral sampler that merges the k per-subset reverse
transitions into one Gaussian step with a prior-correction term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .schedule import NoiseSchedule
from .score_net import ScoreNetwork, SubsetEvaluator

DIVERGENCE_LIMIT = 1e6

ANNEALED_LANGEVIN = "annealed_langevin"
COMPOSED_ANCESTRAL = "composed_ancestral"


class SamplerDivergedError(RuntimeError):
    def __init__(self, message: str, t: int | None = None, chain: int | None = None):
        super().__init__(message)
        self.t = t
        self.chain = chain


@dataclass(frozen=True)
class Partition:
    """Disjoint covering index groups over n observations, sizes in [1, m_max]."""
    subsets: list[np.ndarray]

    @property
    def k(self) -> int:
        return len(self.subsets)

    def sizes(self) -> list[int]:
        return [len(s) for s in self.subsets]


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = ANNEALED_LANGEVIN
    L: int = 5            # Langevin steps per noise level
    step_scale: float = 0.3
    n_samples: int = 1000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in (ANNEALED_LANGEVIN, COMPOSED_ANCESTRAL):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.kind == ANNEALED_LANGEVIN and self.L < 1:
            raise ValueError("annealed Langevin needs L >= 1")
        if self.step_scale <= 0:
            raise ValueError("step_scale must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def partition_observations(n: int, m_max: int) -> Partition:
    """Contiguous chunks [0..m), [m..2m), ... of the given observation order."""
    if n < 1:
        raise ValueError("need n >= 1 observations")
    if m_max < 1:
        raise ValueError("need m_max >= 1")
    subsets = [np.arange(lo, min(lo + m_max, n)) for lo in range(0, n, m_max)]
    return Partition(subsets=subsets)


def standard_normal_score(theta: np.ndarray) -> np.ndarray:
    return -np.asarray(theta, dtype=float)


def prior_weight(k: int, t: int, T: int) -> float:
    """Coefficient of the prior score in the bridging density at level t."""
    return (1.0 - k) * (T - t) / T


def langevin_step_size(t: int, sch: NoiseSchedule, a: float) -> float:
    """delta_t = a (1 - alpha_t) / sqrt(alpha_t)."""
    al = sch.alpha_at(t)
    return a * (1.0 - al) / np.sqrt(al)


def composed_score(net: ScoreNetwork, theta: np.ndarray, t: int,
                   observations: np.ndarray, partition: Partition,
                   prior_score: Callable[[np.ndarray], np.ndarray],
                   sch: NoiseSchedule) -> np.ndarray:
    """Score of the bridging density at level t for one parameter vector:
    prior_weight * prior_score(theta) + sum_j s_psi(theta, t, X_j)."""
    from .score_net import score as net_score
    X = np.atleast_2d(np.asarray(observations, dtype=float))
    if not 1 <= t <= sch.T:
        raise IndexError(f"noise level t={t} outside 1..{sch.T}")
    for idx in partition.subsets:
        if len(idx) > net.config.m_max:
            raise ValueError(f"subset size {len(idx)} exceeds m_max={net.config.m_max}")
    theta = np.asarray(theta, dtype=float)
    w = prior_weight(partition.k, t, sch.T)
    out = w * prior_score(theta) if w != 0.0 else np.zeros_like(theta)
    for idx in partition.subsets:
        out = out + net_score(net, theta, t, X[idx], sch)
    return out


# ---------------------------------------------------------------------------
# fused per-subset scorers: f(thetas (B, d), t) -> (k, B, d)

def network_subset_scores(net: ScoreNetwork, observations: np.ndarray,
                          partition: Partition, sch: NoiseSchedule,
                          n_chains: int):
    """Fast fused per-subset network scores over fixed observations."""
    X = np.atleast_2d(np.asarray(observations, dtype=float))
    ev = SubsetEvaluator(net, [X[idx] for idx in partition.subsets], n_chains,
                         sch=sch)

    def fn(thetas: np.ndarray, t: int) -> np.ndarray:
        return ev.predict(thetas, t) / (-np.sqrt(1.0 - sch.gamma_at(t)))

    return fn


def _as_fused(score_fns, k: int | None):
    """Accepts a list of per-subset callables or one fused callable."""
    if callable(score_fns):
        if k is None:
            raise ValueError("k is required with a fused per-subset scorer")
        return score_fns, k
    fns = list(score_fns)

    def fused(thetas: np.ndarray, t: int) -> np.ndarray:
        return np.stack([np.atleast_2d(f(thetas, t)) for f in fns])

    return fused, len(fns)


def make_composed_score_fn(subset_scores, k: int,
                           prior_score: Callable[[np.ndarray], np.ndarray],
                           sch: NoiseSchedule):
    """Batched composed score: prior term plus the sum of per-subset scores."""
    fused, k = _as_fused(subset_scores, k)

    def fn(thetas: np.ndarray, t: int) -> np.ndarray:
        out = fused(thetas, t).sum(axis=0)
        w = prior_weight(k, t, sch.T)
        if w != 0.0:
            out = out + w * prior_score(thetas)
        return out

    return fn


def _check_state(theta: np.ndarray, t: int, what: str) -> None:
    bad = ~np.all(np.isfinite(theta), axis=-1)
    if np.any(bad):
        chain = int(np.argmax(bad))
        raise SamplerDivergedError(f"non-finite {what} at level t={t}, chain {chain}",
                                   t=t, chain=chain)
    if np.max(np.abs(theta)) > DIVERGENCE_LIMIT:
        chain = int(np.argmax(np.max(np.abs(theta), axis=-1) > DIVERGENCE_LIMIT))
        raise SamplerDivergedError(f"|theta| exceeded {DIVERGENCE_LIMIT:g} at level "
                                   f"t={t}, chain {chain}", t=t, chain=chain)


def annealed_langevin(score_fn, k: int, theta_dim: int, sch: NoiseSchedule,
                      cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """Annealed Langevin over levels T-1..1 starting from N(0, I/k).

    score_fn(thetas (B, d), t) must return the full composed score of the
    bridging density (prior term included). Returns (n_samples, theta_dim).
    """
    if cfg.kind != ANNEALED_LANGEVIN:
        raise ValueError(f"config kind is {cfg.kind!r}")
    B = cfg.n_samples
    theta = rng.standard_normal((B, theta_dim)) / np.sqrt(k)
    for t in range(sch.T - 1, 0, -1):
        delta = langevin_step_size(t, sch, cfg.step_scale)
        half = 0.5 * delta
        root = np.sqrt(delta)
        for _ in range(cfg.L):
            s = score_fn(theta, t)
            if not np.all(np.isfinite(s)):
                _check_state(s, t, "score")
            theta += half * s
            theta += root * rng.standard_normal((B, theta_dim))
        _check_state(theta, t, "state")
    return theta


def composed_ancestral(score_fns, prior_score, sch: NoiseSchedule,
                       cfg: SamplerConfig, rng: np.random.Generator,
                       theta_dim: int, k: int | None = None) -> np.ndarray:
    """Langevin-free sampler: one Gaussian reverse transition per level that
    merges the k per-subset transitions, plus a prior mean correction.

    score_fns: list of per-subset callables (theta, t) -> (B, d), or a fused
    callable returning (k, B, d). For k = 1 this is the standard ancestral
    reverse step of a diffusion model.
    """
    if cfg.kind != COMPOSED_ANCESTRAL:
        raise ValueError(f"config kind is {cfg.kind!r}")
    fused, k = _as_fused(score_fns, k)
    if k < 1:
        raise ValueError("need k >= 1 subsets")
    B = cfg.n_samples
    theta = rng.standard_normal((B, theta_dim)) / np.sqrt(k)
    for t in range(sch.T - 1, 0, -1):
        al = sch.alpha_at(t)
        sqa = np.sqrt(al)
        denom = k - al * (k - 1)
        sum_s = fused(theta, t).sum(axis=0)
        # sum_j mu_j = k theta / sqa + ((1 - al) / sqa) sum_j s_j
        mu = (k * theta / sqa + ((1.0 - al) / sqa) * sum_s
              - (k - 1) * sqa * theta) / denom
        var = (1.0 - al) / denom
        w = prior_weight(k, t, sch.T)
        if w != 0.0:
            mu = mu + var * w * prior_score(theta)
        if not np.all(np.isfinite(mu)):
            _check_state(mu, t, "transition mean")
        theta = mu + np.sqrt(var) * rng.standard_normal((B, theta_dim))
    return theta


def run_sampler(score_fn_or_fns, k: int, theta_dim: int, sch: NoiseSchedule,
                cfg: SamplerConfig, prior_score=standard_normal_score) -> np.ndarray:
    """Dispatch on cfg.kind; the per-subset scorer is shared between kinds."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    if cfg.kind == ANNEALED_LANGEVIN:
        composed = make_composed_score_fn(score_fn_or_fns, k, prior_score, sch)
        return annealed_langevin(composed, k, theta_dim, sch, cfg, rng)
    return composed_ancestral(score_fn_or_fns, prior_score, sch, cfg, rng,
                              theta_dim, k=k)


def sample_posterior(net: ScoreNetwork, observations: np.ndarray,
                     sch: NoiseSchedule, cfg: SamplerConfig) -> np.ndarray:
    """End-to-end: partition observations by the network's m_max, build the
    fused subset scorer, run the configured sampler."""
    X = np.atleast_2d(np.asarray(observations, dtype=float))
    part = partition_observations(X.shape[0], net.config.m_max)
    fused = network_subset_scores(net, X, part, sch, cfg.n_samples)
    return run_sampler(fused, part.k, net.config.theta_dim, sch, cfg)
