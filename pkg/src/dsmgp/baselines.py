"""Expert-based comparators sharing the DSMGP partitions and kernel.

Experts are the leaves of one induced tree of a structure graph (the
first child at every sum), i.e. a single partition of the covariate
space into disjoint regions. Aggregation follows the usual gPoE and
rBCM precision-weighted products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gp
from .errors import NumericalError, UsageError
from .structure import LeafNode, SumNode

__all__ = [
    "ExpertEnsemble",
    "first_partition",
    "nle_predict",
    "gpoe_predict",
    "rbcm_predict",
    "ConstantModel",
    "LinearModel",
]


def first_partition(g):
    """Leaves of the induced tree that takes the first child at every sum."""
    out, stack = [], [g.root]
    while stack:
        i = stack.pop()
        node = g.nodes[i]
        if isinstance(node, LeafNode):
            out.append(i)
        elif isinstance(node, SumNode):
            stack.append(node.children[0])
        else:
            stack.extend(reversed(node.children))
    return out


@dataclass
class ExpertEnsemble:
    experts: list
    leaves: list
    graph: object
    aggregation: str = "gpoe"
    beta: str = "uniform"

    @classmethod
    def fit(cls, g, X, y, hp, aggregation="gpoe", beta=None):
        """One exact GP per region of ``g``'s first partition."""
        if aggregation not in ("nle", "gpoe", "rbcm"):
            raise UsageError(f"unknown aggregation {aggregation!r}")
        if beta is None:
            beta = "entropy" if aggregation == "rbcm" else "uniform"
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(y, dtype=float).ravel()
        leaves = first_partition(g)
        experts = []
        for i in leaves:
            idx = g.data_idx[i]
            h = hp[i] if isinstance(hp, dict) else hp
            experts.append(gp.fit(X[idx], y[idx], h))
        return cls(experts, leaves, g, aggregation, beta)

    @property
    def hp(self):
        return self.experts[0].hp

    def expert_moments(self, Xs, noise=False):
        """Arrays of shape (K, n) with each expert's mean and variance."""
        ms, vs = [], []
        for p in self.experts:
            m, v = gp.predict_batch(p, Xs)
            ms.append(m)
            vs.append(v + p.hp.noise_var if noise else v)
        return np.array(ms), np.array(vs)

    def predict(self, Xs, noise=False):
        if self.aggregation == "nle":
            return nle_predict(self, Xs, noise=noise)
        if self.aggregation == "gpoe":
            return gpoe_predict(self, Xs, beta=self.beta, noise=noise)
        return rbcm_predict(self, Xs, beta=self.beta, noise=noise)


def _queries(e, xstar):
    # scalars and single D-vectors give scalar output; 1-D input in 1-D is a batch
    Xs = np.asarray(xstar, dtype=float)
    single = Xs.ndim == 0 or (Xs.ndim == 1 and e.hp.dim > 1)
    if Xs.ndim < 2:
        Xs = Xs.reshape(1, -1) if single else Xs.reshape(-1, 1)
    if Xs.shape[1] != e.hp.dim:
        raise UsageError(f"queries have {Xs.shape[1]} columns, experts expect {e.hp.dim}")
    return Xs, single


def _out(m, v, single):
    if single:
        return float(m[0]), float(v[0])
    return m, v


def nle_predict(e, xstar, noise=False):
    """Prediction of the expert whose region holds each query."""
    Xs, single = _queries(e, xstar)
    pos = {leaf: k for k, leaf in enumerate(e.leaves)}
    which = np.empty(Xs.shape[0], dtype=int)
    for n, x in enumerate(Xs):
        i = e.graph.root
        while not isinstance(e.graph.nodes[i], LeafNode):
            node = e.graph.nodes[i]
            if isinstance(node, SumNode):
                i = node.children[0]
            else:
                i = node.children[int(node.child_index(x))]
        which[n] = pos[i]
    m, v = np.empty(Xs.shape[0]), np.empty(Xs.shape[0])
    for k in np.unique(which):
        sel = which == k
        p = e.experts[k]
        m[sel], v[sel] = gp.predict_batch(p, Xs[sel])
        if noise:
            v[sel] += p.hp.noise_var
    return _out(m, v, single)


def _prior_var(e, noise):
    return e.hp.signal_var + (e.hp.noise_var if noise else 0.0)


def _betas(rule, prior_var, V):
    K = V.shape[0]
    if isinstance(rule, str):
        if rule == "uniform":
            return np.full_like(V, 1.0 / K)
        if rule == "entropy":
            return 0.5 * (np.log(prior_var) - np.log(V))
        raise UsageError(f"unknown beta rule {rule!r}")
    b = np.asarray(rule, dtype=float)
    if b.ndim == 1:
        b = np.repeat(b[:, None], V.shape[1], axis=1)
    return b


def gpoe_predict(e, xstar, beta="uniform", noise=False):
    """Generalized product of experts: precision = sum_k beta_k / var_k."""
    Xs, single = _queries(e, xstar)
    M, V = e.expert_moments(Xs, noise=noise)
    if np.any(V <= 0):
        raise NumericalError("an expert has zero predictive variance")
    B = _betas(beta, _prior_var(e, noise), V)
    prec = (B / V).sum(0)
    var = 1.0 / prec
    mean = var * (B * M / V).sum(0)
    return _out(mean, var, single)


def rbcm_predict(e, xstar, prior_var=None, beta="entropy", noise=False):
    """Robust BCM: gPoE plus a (1 - sum beta) prior-precision correction.

    ``prior_var`` defaults to ``k(x, x)`` (plus the noise variance when
    ``noise`` is set); the entropy rule uses
    ``beta_k = 0.5 * (log prior_var - log var_k)``.
    """
    Xs, single = _queries(e, xstar)
    M, V = e.expert_moments(Xs, noise=noise)
    if np.any(V <= 0):
        raise NumericalError("an expert has zero predictive variance")
    s2 = _prior_var(e, noise) if prior_var is None else float(prior_var)
    B = _betas(beta, s2, V)
    prec = (B / V).sum(0) + (1.0 - B.sum(0)) / s2
    if np.any(prec <= 0):
        raise NumericalError("non-positive aggregated precision")
    var = 1.0 / prec
    mean = var * (B * M / V).sum(0)
    return _out(mean, var, single)


@dataclass
class ConstantModel:
    """Training mean as prediction; the training variance as inferred noise."""

    mean: float = 0.0
    noise_var: float = 1.0

    @classmethod
    def fit(cls, X, y):
        y = np.asarray(y, dtype=float).ravel()
        return cls(float(y.mean()), float(y.var()))

    def predict(self, Xs, noise=True):
        n = np.asarray(Xs).shape[0]
        return np.full(n, self.mean), np.full(n, self.noise_var)


@dataclass
class LinearModel:
    """Least squares with intercept; residual variance as inferred noise."""

    coef: np.ndarray = None
    noise_var: float = 1.0

    @classmethod
    def fit(cls, X, y):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        A = np.c_[np.ones(X.shape[0]), X]
        coef, *_ = np.linalg.lstsq(A, np.asarray(y, dtype=float).ravel(), rcond=None)
        resid = y - A @ coef
        return cls(coef, float(np.mean(resid ** 2)))

    def predict(self, Xs, noise=True):
        Xs = np.asarray(Xs, dtype=float)
        if Xs.ndim == 1:
            Xs = Xs[:, None]
        m = np.c_[np.ones(Xs.shape[0]), Xs] @ self.coef
        return m, np.full(Xs.shape[0], self.noise_var)
