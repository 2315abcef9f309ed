"""Exact GP regression for a single expert (zero mean function)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import NumericalError, UsageError
from .kernels import Hyperparameters, gram, gram_grads, jitter_cholesky

__all__ = ["GpPosterior", "fit", "lml", "predict", "predict_batch", "lml_grad"]

LOG_2PI = float(np.log(2.0 * np.pi))

# Number of predictive variances clamped from small negative round-off to 0.
clamp_count = 0


@dataclass(frozen=True)
class GpPosterior:
    X: np.ndarray
    y: np.ndarray
    hp: Hyperparameters
    chol_L: np.ndarray
    alpha: np.ndarray
    lml: float
    jitter: float = 0.0

    @property
    def n(self):
        return self.y.shape[0]


def _as_data(X, y, hp):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise UsageError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    if X.shape[0] < 1:
        raise UsageError("need at least one observation")
    if X.shape[1] != hp.dim:
        raise UsageError(f"X has {X.shape[1]} columns, hyperparameters expect {hp.dim}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise UsageError("non-finite training data")
    return X, y


def covariance(X, hp):
    """C = k(X, X) + sn2 * I."""
    C = gram(X, X, hp)
    C[np.diag_indices_from(C)] += hp.noise_var
    return C


def fit(X, y, hp, chol_L=None):
    """Factorize the training covariance and cache the solve vector.

    A precomputed factor of ``k(X, X) + sn2*I`` may be passed in ``chol_L``
    (used by the shared-Cholesky planner).
    """
    X, y = _as_data(X, y, hp)
    jitter = 0.0
    if chol_L is None:
        L, jitter = jitter_cholesky(covariance(X, hp))
    else:
        L = np.asarray(chol_L, dtype=float)
        if L.shape != (X.shape[0], X.shape[0]):
            raise UsageError("precomputed factor has the wrong shape")
    alpha = sla.cho_solve((L, True), y, check_finite=False)
    value = -0.5 * (y @ alpha) - np.log(np.diag(L)).sum() - 0.5 * y.shape[0] * LOG_2PI
    if not np.isfinite(value):
        raise NumericalError("non-finite log marginal likelihood")
    return GpPosterior(X, y, hp, L, alpha, float(value), jitter)


def lml(p):
    """-0.5 * (y' C^-1 y + log|C| + N log 2pi), from the cached factor."""
    return p.lml


def predict_batch(p, Xs, full_cov=False):
    """Posterior mean and latent variance at the rows of ``Xs``."""
    global clamp_count
    Xs = np.asarray(Xs, dtype=float)
    if Xs.ndim == 1:
        Xs = Xs[None, :]
    Ks = gram(Xs, p.X, p.hp)
    mean = Ks @ p.alpha
    V = sla.solve_triangular(p.chol_L, Ks.T, lower=True, check_finite=False)
    if full_cov:
        return mean, gram(Xs, Xs, p.hp) - V.T @ V
    var = p.hp.signal_var - (V * V).sum(0)
    neg = var < 0
    if np.any(neg):
        if np.any(var < -1e-8 * max(1.0, p.hp.signal_var)):
            raise NumericalError(f"negative predictive variance {var.min():.3e}")
        clamp_count += int(neg.sum())
        var = np.where(neg, 0.0, var)
    return mean, var


def predict(p, xstar):
    """Posterior mean and latent variance at a single point."""
    xstar = np.asarray(xstar, dtype=float).ravel()
    if xstar.shape != (p.hp.dim,):
        raise UsageError(f"query has dimension {xstar.shape[0]}, expected {p.hp.dim}")
    m, v = predict_batch(p, xstar[None, :])
    return float(m[0]), float(v[0])


def lml_grad(p):
    """Gradient of the log marginal likelihood w.r.t. ``p.hp.vector()``.

    Uses 0.5 * tr((a a' - C^-1) dC/dtheta) with dC taken w.r.t. the
    log-parameters.
    """
    n = p.n
    Cinv = sla.cho_solve((p.chol_L, True), np.eye(n), check_finite=False)
    W = np.outer(p.alpha, p.alpha) - Cinv
    K = gram(p.X, p.X, p.hp)
    return np.array([0.5 * np.sum(W * dC) for dC in gram_grads(p.X, p.hp, K)])
