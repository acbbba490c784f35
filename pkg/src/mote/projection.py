"""Exact t-SNE for projecting activation maps to two dimensions.

Gaussian input affinities are calibrated per point by bisection on the
precision until the row entropy matches ``log2(perplexity)``; the embedding
minimises KL(P || Q) with a Student-t kernel by gradient descent with
momentum, per-parameter gains and early exaggeration. All pairwise terms are
computed exactly, which is cheap at the dataset sizes used here.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from .exceptions import ConfigurationError, InputError, NumericError

log = logging.getLogger(__name__)

ENTROPY_TOL = 1e-5
_MACHINE_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float | str = "auto"
    early_exaggeration_factor: float = 12.0
    early_exaggeration_iters: int = 250
    seed: int = 0

    def __post_init__(self):
        if not self.perplexity > 0:
            raise ConfigurationError("perplexity must be positive")
        if self.early_exaggeration_factor < 1:
            raise ConfigurationError("early exaggeration factor must be >= 1")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be positive")
        if self.learning_rate != "auto" and not float(self.learning_rate) > 0:
            raise ConfigurationError("learning_rate must be positive or 'auto'")

    def step_size(self, n: int) -> float:
        """``"auto"`` keeps the exaggerated phase stable: n / (4 * exaggeration), at most 200."""
        if self.learning_rate == "auto":
            return min(200.0, n / (4.0 * self.early_exaggeration_factor))
        return float(self.learning_rate)


def squared_distances(X: np.ndarray) -> np.ndarray:
    sq = (X * X).sum(axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def _row_probs(d_row: np.ndarray, beta: float) -> tuple[np.ndarray, float]:
    """Conditional probabilities of one row and their entropy in bits."""
    shifted = d_row - d_row.min()
    p = np.exp(-shifted * beta)
    p /= p.sum()
    nz = p > 0
    return p, float(-(p[nz] * np.log2(p[nz])).sum())


def conditional_affinities(D2: np.ndarray, perplexity: float, tol: float = ENTROPY_TOL, max_iter: int = 200):
    """Row-stochastic ``p_{j|i}`` with calibrated precisions.

    Returns ``(P_cond, betas, entropies)``; each row's entropy lies within
    ``tol`` of ``log2(perplexity)`` unless bisection ran out of iterations.
    """
    n = D2.shape[0]
    target = np.log2(perplexity)
    P = np.zeros((n, n))
    betas = np.ones(n)
    entropies = np.zeros(n)
    for i in range(n):
        d = np.delete(D2[i], i)
        lo, hi = 0.0, np.inf
        beta = 1.0 / max(np.median(d), _MACHINE_EPS)
        for _ in range(max_iter):
            p, h = _row_probs(d, beta)
            if abs(h - target) <= tol:
                break
            if h > target:  # too flat: sharpen
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        else:
            warnings.warn(f"perplexity calibration for point {i} stopped at entropy {h:.6f} (target {target:.6f})")
        P[i, np.arange(n) != i] = p
        betas[i] = beta
        entropies[i] = h
    return P, betas, entropies


def _dedupe(X: np.ndarray, seed: int) -> tuple[np.ndarray, int]:
    """Jitter exact duplicate rows by ``1e-6`` times the data scale."""
    _, first, counts = np.unique(X, axis=0, return_index=True, return_counts=True)
    n_dup = int((counts - 1).sum())
    if n_dup == 0:
        return X, 0
    scale = float(np.abs(X).max()) or 1.0
    rng = np.random.default_rng(seed)
    return X + rng.normal(scale=1e-6 * scale, size=X.shape), n_dup


def pairwise_affinities(points, perplexity: float, seed: int = 0) -> np.ndarray:
    """Symmetric joint affinities ``P`` that sum to one.

    Exact duplicate points would make the bandwidth search degenerate; they
    are separated by a tiny deterministic jitter and a warning is emitted.
    """
    X = check_array(points, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise InputError("need at least two points")
    if perplexity >= n - 1:
        raise ConfigurationError(f"perplexity {perplexity} must be below n_points - 1 = {n - 1}")
    X, n_dup = _dedupe(X, seed)
    if n_dup:
        warnings.warn(f"{n_dup} duplicate points jittered before affinity calibration")
    Pc, _, _ = conditional_affinities(squared_distances(X - X.mean(axis=0)), perplexity)
    P = Pc + Pc.T
    return P / P.sum()


def student_t_affinities(Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(Q, num)`` where ``num = 1 / (1 + |y_i - y_j|^2)`` with a zero diagonal."""
    num = 1.0 / (1.0 + squared_distances(Y))
    np.fill_diagonal(num, 0.0)
    return num / num.sum(), num


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    Q, _ = student_t_affinities(Y)
    mask = P > 0
    return float((P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))).sum())


def kl_gradient(P: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """``dKL/dy_i = 4 sum_j (p_ij - q_ij)(y_i - y_j) / (1 + |y_i - y_j|^2)``."""
    Q, num = student_t_affinities(Y)
    W = (P - Q) * num
    return 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)


@dataclass
class Embedding2D:
    coords: np.ndarray
    kl: float
    restarts: int = 0


def tsne(points, config: TsneConfig = TsneConfig()) -> Embedding2D:
    X = check_array(points, dtype=np.float64)
    n = X.shape[0]
    if n < 3:
        raise InputError("t-SNE needs at least three points")
    # small inputs: clamp to n/4, but keep the entropy target positive
    perplexity = max(min(config.perplexity, n / 4.0), 1.5)
    P = pairwise_affinities(X, perplexity, seed=config.seed)
    P = np.maximum(P, 1e-12)
    P /= P.sum()

    rng = np.random.default_rng(config.seed)
    Y = rng.normal(scale=1e-4, size=(n, 2))
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    lr = config.step_size(n)
    prev_kl = np.inf
    restarts = 0
    bad_run = 0
    for it in range(config.iterations):
        exaggerating = it < config.early_exaggeration_iters
        Pe = P * config.early_exaggeration_factor if exaggerating else P
        momentum = 0.5 if it < config.early_exaggeration_iters else 0.8
        grad = kl_gradient(Pe, Y)
        same_sign = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.clip(gains, 0.01, None, out=gains)
        velocity = momentum * velocity - lr * gains * grad
        Y = Y + velocity
        Y -= Y.mean(axis=0)
        if not np.all(np.isfinite(Y)):
            raise NumericError(f"t-SNE produced non-finite coordinates at iteration {it}")
        if not exaggerating:
            kl = kl_divergence(P, Y)
            if kl > prev_kl + 1e-6:
                # momentum restart: drop the accumulated velocity
                velocity[:] = 0.0
                gains[:] = 1.0
                restarts += 1
                bad_run += 1
                if bad_run > 50:
                    raise NumericError(f"t-SNE diverging: KL increased for {bad_run} consecutive steps")
            else:
                bad_run = 0
            prev_kl = kl
    Y -= Y.mean(axis=0)
    return Embedding2D(Y, kl_divergence(P, Y), restarts)


class TSNE(BaseEstimator, TransformerMixin):
    """Scikit-learn style wrapper around :func:`tsne`.

    Like scikit-learn's own t-SNE there is no ``transform`` for unseen
    points; use ``fit_transform``.
    """

    def __init__(self, perplexity=30.0, n_iter=1000, learning_rate="auto", early_exaggeration=12.0,
                 early_exaggeration_iter=250, random_state=0):
        self.perplexity = perplexity
        self.n_iter = n_iter
        self.learning_rate = learning_rate
        self.early_exaggeration = early_exaggeration
        self.early_exaggeration_iter = early_exaggeration_iter
        self.random_state = random_state

    def _config(self) -> TsneConfig:
        return TsneConfig(self.perplexity, self.n_iter, self.learning_rate, self.early_exaggeration,
                          self.early_exaggeration_iter, int(self.random_state or 0))

    def fit(self, X, y=None):
        emb = tsne(X, self._config())
        self.embedding_ = emb.coords
        self.kl_divergence_ = emb.kl
        self.n_restarts_ = emb.restarts
        return self

    def fit_transform(self, X, y=None):
        return self.fit(X).embedding_
