"""Sample-quality metrics: squared MMD with a Gaussian kernel under the
median-distance bandwidth heuristic, and the classifier two-sample test."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist
from sklearn.model_selection import train_test_split
from sklearn.neural_network import MLPClassifier

BANDWIDTH_SUBSAMPLE = 2000
MMD_BLOCK = 512


class DegenerateBandwidthError(ValueError):
    """All pooled points coincide; the median pairwise distance is zero."""


@dataclass(frozen=True)
class MmdReport:
    mmd2: float
    bandwidth: float
    estimator: str  # "biased" | "unbiased"
    n_x: int
    n_y: int


@dataclass(frozen=True)
class C2stReport:
    accuracy: float
    n_train: int
    n_test: int
    classifier: str


def median_bandwidth(X: np.ndarray, Y: np.ndarray, seed: int = 0) -> float:
    """Median pairwise Euclidean distance over the pooled samples, subsampled
    to 2000 points (seeded) when larger."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    pool = np.concatenate([X, Y], axis=0)
    if pool.shape[0] < 2:
        raise ValueError("need at least two points in total")
    if pool.shape[0] > BANDWIDTH_SUBSAMPLE:
        rng = np.random.default_rng(seed)
        pool = pool[rng.choice(pool.shape[0], BANDWIDTH_SUBSAMPLE, replace=False)]
    med = float(np.median(pdist(pool)))
    if med <= 0.0:
        raise DegenerateBandwidthError("median pairwise distance is zero")
    return med


def _kernel_sums(X: np.ndarray, Y: np.ndarray, bw: float
                 ) -> tuple[float, float, float, float]:
    """Blockwise accumulation of kernel sums; returns (sum_XX incl. diagonal,
    sum_YY incl. diagonal, sum_XY, trace contribution is n since k(a,a)=1)."""
    c = -0.5 / bw ** 2

    def total(A, B):
        s = 0.0
        for lo in range(0, A.shape[0], MMD_BLOCK):
            d2 = cdist(A[lo:lo + MMD_BLOCK], B, "sqeuclidean")
            s += float(np.exp(c * d2).sum())
        return s

    return total(X, X), total(Y, Y), total(X, Y), 0.0


def mmd2(X: np.ndarray, Y: np.ndarray, bandwidth: float,
         estimator: str = "unbiased") -> MmdReport:
    """Squared MMD with kernel exp(-||a-b||^2 / (2 bandwidth^2)).

    biased: V-statistic with diagonal terms; unbiased: U-statistic with
    diagonal-excluded within-set means.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    if estimator not in ("biased", "unbiased"):
        raise ValueError(f"unknown estimator {estimator!r}")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n, m = X.shape[0], Y.shape[0]
    min_size = 2 if estimator == "unbiased" else 1
    if n < min_size or m < min_size:
        raise ValueError(f"need at least {min_size} samples per set")
    sxx, syy, sxy, _ = _kernel_sums(X, Y, bandwidth)
    if estimator == "biased":
        val = sxx / n ** 2 + syy / m ** 2 - 2.0 * sxy / (n * m)
    else:
        val = ((sxx - n) / (n * (n - 1)) + (syy - m) / (m * (m - 1))
               - 2.0 * sxy / (n * m))
    return MmdReport(mmd2=float(val), bandwidth=float(bandwidth),
                     estimator=estimator, n_x=n, n_y=m)


def c2st(X: np.ndarray, Y: np.ndarray, split_seed: int,
         train_seed: int = 0) -> C2stReport:
    """Classifier two-sample test: a three-hidden-layer width-64 feed-forward
    network (Adam, early stopping on a held-out slice of the training split)
    discriminates X (label 0) from Y (label 1); reports test accuracy on a
    stratified 70/30 split. 0.5 means indistinguishable sets."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[0] != Y.shape[0]:
        raise ValueError("c2st expects equally sized sample sets")
    if X.shape[0] < 200:
        raise ValueError("need at least 200 samples per set")
    data = np.concatenate([X, Y], axis=0)
    labels = np.concatenate([np.zeros(X.shape[0]), np.ones(Y.shape[0])])
    tr_x, te_x, tr_y, te_y = train_test_split(
        data, labels, test_size=0.3, stratify=labels, random_state=split_seed)
    mu = tr_x.mean(axis=0)
    sd = tr_x.std(axis=0)
    sd[sd == 0.0] = 1.0
    clf = MLPClassifier(hidden_layer_sizes=(64, 64, 64), activation="relu",
                        solver="adam", early_stopping=True, n_iter_no_change=15,
                        max_iter=300, random_state=train_seed)
    clf.fit((tr_x - mu) / sd, tr_y)
    acc = float(clf.score((te_x - mu) / sd, te_y))
    return C2stReport(accuracy=acc, n_train=len(tr_y), n_test=len(te_y),
                      classifier="mlp(64,64,64)+adam+early-stopping, z-scored inputs")
