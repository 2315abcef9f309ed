"""Squared-exponential ARD covariance and Gram matrices.

All hyperparameters live on the log scale so that unconstrained gradient
steps keep them positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import NumericalError, UsageError

__all__ = [
    "Hyperparameters",
    "se_ard",
    "gram",
    "gram_grads",
    "jitter_cholesky",
]


@dataclass(frozen=True)
class Hyperparameters:
    log_lengthscales: np.ndarray
    log_signal_var: float
    log_noise_var: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.log_lengthscales, dtype=float)).copy()
        ls.setflags(write=False)
        object.__setattr__(self, "log_lengthscales", ls)
        object.__setattr__(self, "log_signal_var", float(self.log_signal_var))
        object.__setattr__(self, "log_noise_var", float(self.log_noise_var))
        with np.errstate(over="ignore"):
            vals = np.exp(np.r_[ls, self.log_signal_var, self.log_noise_var])
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
            raise UsageError("hyperparameters must exponentiate to positive finite values")

    @classmethod
    def init(cls, dim, lengthscale=1.0, signal_var=1.0, noise_var=0.1):
        return cls(np.full(dim, np.log(lengthscale)), np.log(signal_var), np.log(noise_var))

    @classmethod
    def from_vector(cls, theta):
        theta = np.asarray(theta, dtype=float)
        return cls(theta[:-2], theta[-2], theta[-1])

    @property
    def dim(self):
        return self.log_lengthscales.shape[0]

    @property
    def lengthscales(self):
        return np.exp(self.log_lengthscales)

    @property
    def signal_var(self):
        return float(np.exp(self.log_signal_var))

    @property
    def noise_var(self):
        return float(np.exp(self.log_noise_var))

    def vector(self):
        """Flat parameter vector ``[log ell_1..D, log sf2, log sn2]``."""
        return np.r_[self.log_lengthscales, self.log_signal_var, self.log_noise_var]

    def to_dict(self):
        return {
            "log_lengthscales": self.log_lengthscales.tolist(),
            "log_signal_var": self.log_signal_var,
            "log_noise_var": self.log_noise_var,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["log_lengthscales"], d["log_signal_var"], d["log_noise_var"])

    def __eq__(self, other):
        if not isinstance(other, Hyperparameters):
            return NotImplemented
        return np.array_equal(self.vector(), other.vector())

    def __hash__(self):
        return hash(self.vector().tobytes())


def _check_matrix(X, hp, name):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != hp.dim:
        raise UsageError(f"{name} has shape {X.shape}, expected (n, {hp.dim})")
    if not np.all(np.isfinite(X)):
        raise UsageError(f"{name} contains non-finite values")
    return X


def se_ard(x, x2, hp):
    """k(x, x') = sf2 * exp(-0.5 * sum_d (x_d - x'_d)^2 / ell_d^2)."""
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if x.shape != (hp.dim,) or x2.shape != (hp.dim,):
        raise UsageError(f"expected vectors of length {hp.dim}, got {x.shape} and {x2.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(x2))):
        raise UsageError("non-finite covariate")
    r = (x - x2) / hp.lengthscales
    return hp.signal_var * float(np.exp(-0.5 * r @ r))


def _scaled_sqdist(X, X2, ell):
    A = X / ell
    B = X2 / ell
    if A.shape[1] == 1:
        return (A - B.T) ** 2
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def gram(X, X2, hp):
    """Cross-covariance matrix between the rows of ``X`` and ``X2``."""
    X = _check_matrix(X, hp, "X")
    X2 = _check_matrix(X2, hp, "X2")
    return hp.signal_var * np.exp(-0.5 * _scaled_sqdist(X, X2, hp.lengthscales))


def gram_grads(X, hp, K=None):
    """Derivatives of ``gram(X, X) + sn2*I`` w.r.t. each log-parameter.

    Returns a list ordered like ``hp.vector()``.
    """
    X = _check_matrix(X, hp, "X")
    if K is None:
        K = gram(X, X, hp)
    ell = hp.lengthscales
    grads = []
    for d in range(hp.dim):
        diff = (X[:, d, None] - X[None, :, d]) / ell[d]
        grads.append(K * diff * diff)
    grads.append(K)
    grads.append(hp.noise_var * np.eye(X.shape[0]))
    return grads


def jitter_cholesky(C, max_jitter=1e-2):
    """Lower Cholesky factor of ``C``, adding diagonal jitter on failure.

    Jitter starts at 1e-8 times the mean diagonal and grows tenfold up to
    ``max_jitter`` times the mean diagonal. Returns ``(L, jitter)``.
    """
    try:
        return sla.cholesky(C, lower=True, check_finite=False), 0.0
    except sla.LinAlgError:
        pass
    scale = float(np.mean(np.diag(C)))
    if not np.isfinite(scale) or scale <= 0:
        raise NumericalError("matrix diagonal is not positive")
    rel = 1e-8
    while rel <= max_jitter * (1 + 1e-12):
        jitter = rel * scale
        try:
            L = sla.cholesky(C + jitter * np.eye(C.shape[0]), lower=True, check_finite=False)
            return L, jitter
        except sla.LinAlgError:
            rel *= 10.0
    raise NumericalError("Cholesky failed after jitter escalation")
