"""Gradient-based hyperparameter learning for DSMGPs.

Gradients of the model log marginal likelihood are a responsibility
weighted sum of per-leaf GP gradients. The responsibility of a leaf is
the posterior probability that it belongs to the selected induced tree,
obtained by a top-down pass over the posterior sum weights.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import gp
from .cholesky import execute, plan
from .errors import NumericalError, StateError, UsageError
from .inference import posterior_update
from .kernels import Hyperparameters
from .structure import LeafNode, SumNode

__all__ = [
    "OptimizerState",
    "OptimizeResult",
    "leaf_gradient_weights",
    "global_gradient",
    "finetune_gradient",
    "overlap_similarity",
    "optimize",
    "write_trace",
]


@dataclass
class OptimizerState:
    """RMSprop on the log-parameters (ascent)."""

    step: float = 0.05
    decay: float = 0.9
    eps: float = 1e-8
    acc: np.ndarray = None

    def update(self, grad):
        grad = np.asarray(grad, dtype=float)
        if self.acc is None:
            self.acc = np.zeros_like(grad)
        self.acc = self.decay * self.acc + (1.0 - self.decay) * grad * grad
        return self.step * grad / (np.sqrt(self.acc) + self.eps)


@dataclass
class OptimizeResult:
    graph: object
    hps: list
    log_marginal: float
    trace: list = field(default_factory=list)
    aborted: bool = False


def leaf_gradient_weights(g):
    """d log p(y|X) / d lml_L for every leaf, from a posterior-updated graph."""
    if g.log_values is None:
        raise StateError("upward values are missing; run posterior_update first")
    r = np.full(len(g.nodes), -np.inf)
    r[g.root] = 0.0
    for i, node in enumerate(g.nodes):
        if isinstance(node, LeafNode):
            continue
        if isinstance(node, SumNode):
            for c, lw in zip(node.children, node.log_weights):
                r[c] = r[i] + lw
        else:
            for c in node.children:
                r[c] = r[i]
    return {i: float(np.exp(r[i])) for i in g.leaves}


def _global_value_and_grad(g, X, y, hp, sharing=None):
    gh = g.with_hyperparameters(hp)
    factors = None if sharing is None else execute(sharing, gh, X)
    post, logz = posterior_update(gh, X, y, factors)
    weights = leaf_gradient_weights(post)
    grad = np.zeros(hp.vector().shape[0])
    for i, w in weights.items():
        if w > 0:
            grad += w * gp.lml_grad(post.nodes[i].posterior)
    return logz, grad, post


def global_gradient(g, X, y, hp_shared):
    """Gradient of log p(y|X) w.r.t. hyperparameters tied across all leaves."""
    return _global_value_and_grad(g, X, y, hp_shared)[1]


def _finetune_value_and_grad(g, X, y, hps, S):
    L = len(g.leaves)
    S = np.asarray(S, dtype=float)
    if S.shape != (L, L):
        raise UsageError(f"similarity matrix has shape {S.shape}, expected ({L}, {L})")
    post, logz = posterior_update(g.with_hyperparameters(list(hps)), X, y)
    leaves = post.leaves
    weights = leaf_gradient_weights(post)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    cache = {}

    def local(j, hp):
        # gradient of leaf j's evidence evaluated at parameters hp
        key = (j, hp)
        if key not in cache:
            pj = post.nodes[leaves[j]].posterior
            if hp != pj.hp:
                idx = post.data_idx[leaves[j]]
                pj = gp.fit(X[idx], y[idx], hp)
            cache[key] = gp.lml_grad(pj)
        return cache[key]

    grads = np.zeros((L, hps[0].vector().shape[0]))
    for i in range(L):
        for j in np.flatnonzero(S[i]):
            w = weights[leaves[j]]
            if w > 0:
                grads[i] += S[i, j] * w * local(j, hps[i])
    return logz, grads, post


def finetune_gradient(g, X, y, hp_per_leaf, S):
    """Per-leaf gradients coupled through the similarity matrix ``S``.

    Row ``i`` is ``sum_j S[i, j] * w_j * dlml_j/dtheta`` with leaf ``j``'s
    evidence evaluated at leaf ``i``'s parameters; ``w_j`` is the leaf
    responsibility from :func:`leaf_gradient_weights`.
    """
    return _finetune_value_and_grad(g, X, y, hp_per_leaf, S)[1]


def overlap_similarity(g):
    """S[i, j] = |D_i & D_j| / |D_i| over leaf data sets (not symmetric)."""
    leaves = g.leaves
    n = max((int(g.data_idx[i].max()) + 1 for i in leaves if g.data_idx[i].size), default=0)
    rows, cols = [], []
    for k, i in enumerate(leaves):
        rows.append(np.asarray(g.data_idx[i]))
        cols.append(np.full(g.data_idx[i].size, k))
    rows = np.concatenate(rows) if rows else np.array([], dtype=int)
    cols = np.concatenate(cols) if cols else np.array([], dtype=int)
    M = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, len(leaves)))
    inter = (M.T @ M).toarray()
    sizes = np.diag(inter).copy()
    S = np.zeros_like(inter)
    nz = sizes > 0
    S[nz] = inter[nz] / sizes[nz, None]
    S[np.diag_indices_from(S)] = 1.0
    return S


def optimize(g, X, y, mode="global", iters=1000, opt=None, hp0=None, S=None, callback=None,
             share=False):
    """Maximize log p(y|X) with RMSprop on log-parameters.

    ``mode="global"`` ties one parameter set across leaves; ``"finetune"``
    keeps one set per leaf coupled through ``S`` (overlap similarity by
    default). Starting values come from ``hp0`` or the graph's leaves.
    The returned graph holds the best parameters seen, posterior-updated.
    ``share=True`` (global mode) factorizes leaves through a Cholesky
    sharing plan computed once for the fixed structure.
    """
    if iters < 1:
        raise UsageError("iters must be at least 1")
    if mode not in ("global", "finetune"):
        raise UsageError(f"unknown mode {mode!r}")
    opt = opt if opt is not None else OptimizerState()
    L = len(g.leaves)
    if hp0 is None:
        hp0 = g.leaf_hyperparameters()
        if any(h is None for h in hp0):
            raise StateError("leaves have no starting hyperparameters")
        if mode == "global":
            hp0 = hp0[0]
    if mode == "global":
        if isinstance(hp0, (list, tuple)):
            hp0 = hp0[0]
        theta = hp0.vector()
    else:
        if isinstance(hp0, Hyperparameters):
            hp0 = [hp0] * L
        theta = np.stack([h.vector() for h in hp0])
        if S is None:
            S = overlap_similarity(g)
    sharing = plan(g.with_hyperparameters(hp0)) if share and mode == "global" else None

    def unpack(th):
        if mode == "global":
            return Hyperparameters.from_vector(th)
        return [Hyperparameters.from_vector(t) for t in th]

    trace = []
    best = None
    aborted = False
    t0 = time.perf_counter()
    for it in range(iters):
        try:
            hps = unpack(theta)
            if mode == "global":
                val, grad, post = _global_value_and_grad(g, X, y, hps, sharing)
            else:
                val, grad, post = _finetune_value_and_grad(g, X, y, hps, S)
        except (NumericalError, ValueError):
            aborted = True
            break
        if not (np.isfinite(val) and np.all(np.isfinite(grad))):
            aborted = True
            break
        trace.append((it, float(val), time.perf_counter() - t0))
        if best is None or val > best[0]:
            best = (float(val), theta.copy(), post)
        if callback is not None:
            callback(it, val, hps)
        theta = theta + opt.update(grad)

    if best is None:
        raise NumericalError("optimization produced no finite evaluation")
    val, th, post = best
    hps = unpack(th)
    return OptimizeResult(post, hps if mode == "finetune" else [hps] * L, val, trace, aborted)


def write_trace(path, trace):
    """Loss trace as CSV: iteration, log_marginal, seconds."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "log_marginal", "seconds"])
        for row in trace:
            w.writerow([row[0], repr(row[1]), f"{row[2]:.6f}"])
