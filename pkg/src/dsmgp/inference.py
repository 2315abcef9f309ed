"""Exact posterior inference and prediction over a DSMGP graph.

Every weight computation happens in log space. Prediction routes each
query through the products, so for a single point only one child of
each product is visited and the predictive distribution is a mixture
over the reachable leaves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import gp
from .errors import NumericalError, StateError, UsageError
from .structure import LeafNode, ProductNode, SumNode

__all__ = [
    "PredictiveMixture",
    "fit_leaves",
    "upward",
    "posterior_update",
    "log_marginal",
    "predict_moments",
    "predict_batch",
    "predictive_logdensity",
    "logdensity_batch",
]

LOG_2PI = gp.LOG_2PI
DEFAULT_CAP = 10**4


@dataclass
class PredictiveMixture:
    """Mixture predictive at one query point.

    ``components`` holds ``(log_weight, mean, var)`` triples, or is None
    when the reachable mixture exceeds the enumeration cap.
    """

    components: list
    mm_mean: float
    mm_var: float

    @classmethod
    def from_components(cls, components):
        lw = np.array([c[0] for c in components])
        m = np.array([c[1] for c in components])
        v = np.array([c[2] for c in components])
        w = np.exp(lw - logsumexp(lw))
        mean = float(w @ m)
        return cls(list(components), mean, float(w @ (m * m + v) - mean * mean))


def _check_data(g, X, y):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise UsageError("X and y disagree in length")
    if X.shape[1] != g.dim:
        raise UsageError(f"X has {X.shape[1]} columns, graph expects {g.dim}")
    return X, y


def fit_leaves(g, X, y, factors=None):
    """Fit the GP expert of every leaf; returns ``{leaf_id: GpPosterior}``.

    ``factors`` optionally maps leaf ids to ``(rows, L)`` pairs: a
    Cholesky factor for the leaf's observations taken in order ``rows``
    (see :func:`dsmgp.cholesky.execute`).
    """
    X, y = _check_data(g, X, y)
    out = {}
    for i in g.leaves:
        leaf = g.nodes[i]
        if leaf.hp is None:
            raise StateError(f"leaf {i} has no hyperparameters")
        idx, L = g.data_idx[i], None
        if factors is not None and i in factors:
            idx, L = factors[i]
        try:
            out[i] = gp.fit(X[idx], y[idx], leaf.hp, chol_L=L)
        except (NumericalError, UsageError) as exc:
            raise NumericalError(str(exc), node=i) from exc
    return out


def upward(g, leaf_lml, log_weights="prior"):
    """Bottom-up pass in log space.

    Returns ``(log_values, posterior_log_weights)`` where the second item
    maps each sum id to its renormalized child weights.
    """
    vals = np.empty(len(g.nodes))
    post = {}
    for i in reversed(range(len(g.nodes))):
        node = g.nodes[i]
        if isinstance(node, LeafNode):
            vals[i] = leaf_lml[i]
        elif isinstance(node, ProductNode):
            vals[i] = sum(vals[c] for c in node.children)
        else:
            lw = node.prior_log_weights if log_weights == "prior" else node.log_weights
            terms = lw + vals[node.children]
            z = logsumexp(terms)
            if not np.isfinite(z):
                raise NumericalError("sum node has no finite child likelihood", node=i)
            vals[i] = z
            post[i] = terms - z
    return vals, post


def posterior_update(g, X, y, factors=None):
    """Fit leaves and renormalize sum weights; returns ``(graph, log_Z)``.

    Weights are always updated starting from the prior, so calling this
    again after a hyperparameter change does not double count the data.
    """
    posts = fit_leaves(g, X, y, factors)
    out = g.copy()
    for i, p in posts.items():
        out.nodes[i] = LeafNode(out.nodes[i].hp, p)
    vals, post = upward(out, {i: p.lml for i, p in posts.items()})
    for i, lw in post.items():
        out.nodes[i].log_weights = lw
    out.log_values = vals
    return out, float(vals[out.root])


def log_marginal(g, X, y, factors=None):
    """log p(y | X) by a single upward pass, without touching ``g``."""
    posts = fit_leaves(g, X, y, factors)
    vals, _ = upward(g, {i: p.lml for i, p in posts.items()})
    return float(vals[g.root])


def _require_posterior(g):
    if g.log_values is None or any(g.nodes[i].posterior is None for i in g.leaves):
        raise StateError("posterior_update has not been applied to this graph")


def _reachable(g, x):
    """Reachable leaves of one query with their path log-weights."""
    out = []
    stack = [(g.root, 0.0)]
    while stack:
        i, lw = stack.pop()
        node = g.nodes[i]
        if isinstance(node, LeafNode):
            out.append((i, lw))
        elif isinstance(node, ProductNode):
            stack.append((node.children[int(node.child_index(x))], lw))
        else:
            for c, w in zip(reversed(node.children), reversed(node.log_weights)):
                if w > -np.inf:
                    stack.append((c, lw + w))
    return out


def _reachable_count(g, x):
    counts = {}
    for i in reversed(range(len(g.nodes))):
        node = g.nodes[i]
        if isinstance(node, LeafNode):
            counts[i] = 1
        elif isinstance(node, SumNode):
            counts[i] = sum(counts[c] for c in node.children)
        else:
            counts[i] = counts[node.children[int(node.child_index(x))]]
    return counts[g.root]


def predict_moments(g, xstar, cap=DEFAULT_CAP, noise=False):
    """Mixture predictive at ``xstar`` and its moment-matched Gaussian.

    With ``noise=True`` each component includes its leaf's noise variance
    (predictive for y rather than the latent function).
    """
    _require_posterior(g)
    x = np.asarray(xstar, dtype=float).ravel()
    if x.shape[0] != g.dim:
        raise UsageError(f"query has dimension {x.shape[0]}, expected {g.dim}")
    if _reachable_count(g, x) > cap:
        m, v = predict_batch(g, x[None, :], noise=noise)
        return PredictiveMixture(None, float(m[0]), float(v[0]))
    comps = []
    for i, lw in _reachable(g, x):
        p = g.nodes[i].posterior
        m, v = gp.predict(p, x)
        if noise:
            v += p.hp.noise_var
        comps.append((lw, m, v))
    return PredictiveMixture.from_components(comps)


def _leaf_queries(g, Xs):
    """Query index arrays per node, splitting at products."""
    q = [None] * len(g.nodes)
    q[g.root] = np.arange(Xs.shape[0])
    for i, node in enumerate(g.nodes):
        qi = q[i]
        if qi is None or isinstance(node, LeafNode):
            continue
        if isinstance(node, SumNode):
            for c in node.children:
                q[c] = qi
        else:
            which = node.child_index(Xs[qi])
            for k, c in enumerate(node.children):
                q[c] = qi[which == k]
    return q


def _combine(g, Xs, q, leaf_fn, width, reduce_sum):
    vals = [None] * len(g.nodes)
    for i in reversed(range(len(g.nodes))):
        node, qi = g.nodes[i], q[i]
        if qi is None:
            continue
        if isinstance(node, LeafNode):
            vals[i] = leaf_fn(i, qi) if qi.size else np.empty((0, width))
        elif isinstance(node, ProductNode):
            out = np.empty((qi.size, width))
            which = node.child_index(Xs[qi]) if qi.size else np.empty(0, dtype=int)
            for k, c in enumerate(node.children):
                out[which == k] = vals[c]
            vals[i] = out
        else:
            vals[i] = reduce_sum(node, [vals[c] for c in node.children])
    return vals[g.root]


def predict_batch(g, Xs, noise=False):
    """Moment-matched mean and variance at every row of ``Xs``."""
    _require_posterior(g)
    Xs = np.asarray(Xs, dtype=float)
    if Xs.ndim == 1:
        Xs = Xs[:, None]
    if Xs.shape[1] != g.dim:
        raise UsageError(f"queries have {Xs.shape[1]} columns, graph expects {g.dim}")
    q = _leaf_queries(g, Xs)

    def leaf(i, qi):
        p = g.nodes[i].posterior
        m, v = gp.predict_batch(p, Xs[qi])
        if noise:
            v = v + p.hp.noise_var
        return np.c_[m, m * m + v]

    def mix(node, kids):
        w = np.exp(node.log_weights)
        return sum(wk * k for wk, k in zip(w, kids))

    out = _combine(g, Xs, q, leaf, 2, mix)
    mean = out[:, 0]
    var = np.maximum(out[:, 1] - mean * mean, 0.0)
    return mean, var


def logdensity_batch(g, Xs, ys):
    """log p(y_n | x_n, D) under the full mixture (noise included)."""
    _require_posterior(g)
    Xs = np.asarray(Xs, dtype=float)
    if Xs.ndim == 1:
        Xs = Xs[:, None]
    ys = np.asarray(ys, dtype=float).ravel()
    if Xs.shape[0] != ys.shape[0]:
        raise UsageError("queries and targets disagree in length")
    q = _leaf_queries(g, Xs)

    def leaf(i, qi):
        p = g.nodes[i].posterior
        m, v = gp.predict_batch(p, Xs[qi])
        v = v + p.hp.noise_var
        r = ys[qi] - m
        return (-0.5 * (LOG_2PI + np.log(v) + r * r / v))[:, None]

    def mix(node, kids):
        stacked = np.stack([k[:, 0] for k in kids], axis=0) + node.log_weights[:, None]
        return logsumexp(stacked, axis=0)[:, None]

    out = _combine(g, Xs, q, leaf, 1, mix)
    return out[:, 0]


def predictive_logdensity(g, xstar, ystar, moment_matched=False):
    """log p(y* | x*, D); the exact mixture by default, or its Gaussian projection."""
    x = np.asarray(xstar, dtype=float).ravel()[None, :]
    if moment_matched:
        m, v = predict_batch(g, x, noise=True)
        r = float(ystar) - m[0]
        return float(-0.5 * (LOG_2PI + np.log(v[0]) + r * r / v[0]))
    return float(logdensity_batch(g, x, [ystar])[0])
