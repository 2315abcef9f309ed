"""Sharing Cholesky factors between leaves with overlapping data.

Leaf index arrays are sorted in one canonical order, so two leaves whose
data overlap often share a contiguous run of rows. A consumer leaf whose
rows equal a slice ``a[k:k+m]`` of a source leaf ``a`` (plus possibly
extra trailing rows) gets its factor by

* taking the leading block of the source factor (``k == 0``),
* removing the first ``k`` rows through ``k`` stable rank-1 *updates*
  (``k > 0``), and
* continuing the factorization for any trailing rows.

Rank-1 downdates never appear; they are not numerically reliable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from numba import njit

from .errors import UsageError
from .gp import covariance
from .kernels import gram, jitter_cholesky

__all__ = [
    "chol_update",
    "chol_submatrix",
    "chol_drop_first",
    "chol_extend",
    "Task",
    "SharingPlan",
    "plan",
    "execute",
    "execute_naive",
    "shared_factors",
    "benchmark",
]


@njit(cache=True, fastmath=True)
def _update_upper(U, x):
    # U'U + x x' for upper-triangular U (rows contiguous), overwriting U and x.
    n = x.shape[0]
    for j in range(n):
        ujj = U[j, j]
        xj = x[j]
        r = np.sqrt(ujj * ujj + xj * xj)
        c = r / ujj
        s = xj / ujj
        ic = 1.0 / c
        sc = s * ic
        U[j, j] = r
        row = U[j]
        # x_new = c*x - s*u with u = (row + s*x)/c, i.e. x/c - (s/c)*row
        for i in range(j + 1, n):
            ri = row[i]
            xi = x[i]
            row[i] = (ri + s * xi) * ic
            x[i] = xi * ic - sc * ri


@njit(cache=True, fastmath=True)
def _rank_k_upper(U, X):
    # U'U + X'X for upper-triangular U, one row of U at a time so the row
    # stays in cache while all k vectors rotate into it. Overwrites X.
    k, n = X.shape
    for j in range(n):
        row = U[j]
        for t in range(k):
            xr = X[t]
            ujj = row[j]
            xj = xr[j]
            if xj == 0.0:
                continue
            r = np.sqrt(ujj * ujj + xj * xj)
            ic = ujj / r
            s = xj / ujj
            sc = s * ic
            row[j] = r
            for i in range(j + 1, n):
                ri = row[i]
                xi = xr[i]
                row[i] = (ri + s * xi) * ic
                xr[i] = xi * ic - sc * ri


def _drop_upper(U, k):
    # The trailing block of U'U is U22'U22 + U12'U12: a rank-k update.
    if k:
        _rank_k_upper(U[k:, k:], np.array(U[:k, k:], order="C"))


def chol_update(L, x):
    """Factor of ``L @ L.T + outer(x, x)``."""
    U = np.array(np.asarray(L, dtype=float).T, order="C")
    _update_upper(U, np.array(x, dtype=float))
    return U.T


def chol_submatrix(L_src, size):
    """Factor of the leading ``size x size`` block of the source matrix."""
    n = L_src.shape[0]
    if not 1 <= size <= n:
        raise UsageError(f"size {size} outside 1..{n}")
    return np.array(L_src[:size, :size])


def chol_drop_first(L_src, k):
    """Factor of the source matrix with its first ``k`` rows/columns removed.

    With ``C = [[a, b'], [b, C22]]`` and factor ``[[l11, 0], [l, L22]]``,
    ``C22 = L22 L22' + l l'``, so one rank-1 update of ``L22`` by the
    dropped column yields the factor of ``C22``.
    """
    n = L_src.shape[0]
    if not 1 <= k < n:
        raise UsageError(f"k={k} must satisfy 1 <= k < {n}")
    U = np.array(np.asarray(L_src, dtype=float).T, order="C")
    _drop_upper(U, k)
    return U[k:, k:].T


def _extend_upper(U11, C12, C22):
    U12 = sla.solve_triangular(U11, C12, trans="T", lower=False, check_finite=False)
    U22 = sla.cholesky(C22 - U12.T @ U12, lower=False, check_finite=False)
    m, p = U11.shape[0], U22.shape[0]
    out = np.zeros((m + p, m + p))
    out[:m, :m] = U11
    out[:m, m:] = U12
    out[m:, m:] = U22
    return out


def chol_extend(L11, C12, C22):
    """Factor of ``[[C11, C12], [C12', C22]]`` given the factor of ``C11``."""
    return _extend_upper(np.asarray(L11).T, C12, C22).T


@dataclass(frozen=True)
class Task:
    """How one leaf obtains its factor.

    ``kind`` is ``"direct"``, ``"submatrix"`` (leading block of
    ``source``) or ``"rank1-drop"`` (drop ``drop`` leading rows of
    ``source``). ``keep`` rows come from the source and ``extend``
    trailing rows are factorized afterwards. With ``reverse`` the leaf's
    rows are factorized in reversed canonical order.
    """

    leaf: int
    kind: str
    source: int = -1
    drop: int = 0
    keep: int = 0
    extend: int = 0
    reverse: bool = False


@dataclass
class SharingPlan:
    tasks: list = field(default_factory=list)

    def sources(self):
        return {t.leaf: t.source for t in self.tasks if t.kind != "direct"}

    def counts(self):
        out = {}
        for t in self.tasks:
            out[t.kind] = out.get(t.kind, 0) + 1
        return out


# Per-operation timings in seconds, fitted on a single desktop core; the
# planner only compares them against each other.
_CALL = 3.5e-5
_GRAM = 6e-9
_GRAM_DIM = 2e-9
_CHOL = 1.3e-11
_ROTATE = 7e-10
_COPY = 1e-9
_TRSM = 1e-10


def _gram_cost(a, b, dim):
    return (_GRAM + _GRAM_DIM * dim) * a * b


def _direct_cost(n, dim):
    return _CALL + _gram_cost(n, n, dim) + _CHOL * n ** 3


def _reuse_cost(k, m, p, dim):
    cost = 5e-6 + _COPY * (k + m) ** 2 + _ROTATE * k * m * m
    if p:
        cost += (2 * _CALL + _gram_cost(p, m + p, dim) + _TRSM * m * m * p
                 + _CHOL * p ** 3 + _COPY * (m + p) ** 2)
    return cost


def _common_run(a, b):
    """Offset ``k`` of ``b[0]`` in ``a`` and the length of the shared run."""
    k = int(np.searchsorted(a, b[0]))
    if k >= a.size or a[k] != b[0]:
        return -1, 0
    n = min(a.size - k, b.size)
    eq = a[k:k + n] == b[:n]
    m = n if eq.all() else int(np.argmin(eq))
    return k, m


def plan(g):
    """Cheapest-source sharing plan over leaves with identical hyperparameters.

    Leaves are visited from largest to smallest; each may reuse any leaf
    visited before it that was factorized in the same row orientation. A
    leaf factorized directly takes the orientation under which more of
    the remaining leaves start at its first row.
    """
    order = g.data_idx[g.root]
    rank = np.empty(order.size, dtype=np.int64)
    rank[order] = np.arange(order.size)
    dim = g.dim
    groups = {}
    for i in g.leaves:
        groups.setdefault(g.nodes[i].hp, []).append(i)

    tasks = []
    for leaves in groups.values():
        seqs = {}
        for i in leaves:
            r = rank[g.data_idx[i]]
            seqs[i, False] = r
            seqs[i, True] = -r[::-1]  # ascending in reversed order
        todo = sorted(leaves, key=lambda i: (-seqs[i, False].size, i))
        done = []
        for pos, b in enumerate(todo):
            n = seqs[b, False].size
            best = None
            best_cost = _direct_cost(n, dim)
            for a, rev in done:
                k, m = _common_run(seqs[a, rev], seqs[b, rev])
                if m == 0:
                    continue
                cost = _reuse_cost(k, m, n - m, dim)
                if cost < best_cost:
                    kind = "submatrix" if k == 0 else "rank1-drop"
                    best, best_cost = Task(b, kind, a, k, m, n - m, rev), cost
            if best is None:
                rest = todo[pos + 1:]
                fwd = sum(seqs[c, False][0] == seqs[b, False][0] for c in rest)
                bwd = sum(seqs[c, True][0] == seqs[b, True][0] for c in rest)
                best = Task(b, "direct", reverse=bool(bwd > fwd))
            tasks.append(best)
            done.append((b, best.reverse))
    return SharingPlan(tasks)


def task_rows(g, t):
    """Observation order the factor of task ``t`` refers to."""
    idx = g.data_idx[t.leaf]
    return idx[::-1] if t.reverse else idx


def execute(p, g, X):
    """Run a sharing plan; returns ``{leaf_id: (rows, lower factor)}``.

    Factors are held as upper-triangular row-major arrays while the plan
    runs so that the rank-1 updates walk contiguous memory.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    ups, jittered = {}, set()
    for t in p.tasks:
        hp = g.nodes[t.leaf].hp
        rows = task_rows(g, t)
        if t.kind == "direct" or t.source in jittered:
            L, jit = jitter_cholesky(covariance(X[rows], hp))
            if jit:
                jittered.add(t.leaf)
            ups[t.leaf] = L.T
            continue
        src = ups[t.source]
        if t.kind == "submatrix":
            U = src[:t.keep, :t.keep]
        else:
            n = t.drop + t.keep
            W = np.array(src[:n, :n], order="C")
            _drop_upper(W, t.drop)
            U = W[t.drop:, t.drop:]
        if t.extend:
            old, new = X[rows[:t.keep]], X[rows[t.keep:]]
            C22 = gram(new, new, hp)
            C22[np.diag_indices_from(C22)] += hp.noise_var
            U = _extend_upper(U, gram(old, new, hp), C22)
        ups[t.leaf] = U
    return {t.leaf: (task_rows(g, t), ups[t.leaf].T) for t in p.tasks}


def execute_naive(g, X):
    """Direct factorization of every leaf; same return layout as :func:`execute`."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    out = {}
    for i in g.leaves:
        idx = g.data_idx[i]
        out[i] = (idx, jitter_cholesky(covariance(X[idx], g.nodes[i].hp))[0])
    return out


def shared_factors(g, X):
    """Factors for every leaf via a fresh sharing plan (see :func:`execute`)."""
    return execute(plan(g), g, X)


def benchmark(partitions=(4, 9, 16, 25, 36, 49, 64), n=1000, seed=0, repeats=5, hp=None):
    """Naive versus shared factorization time on 1-D synthetic data.

    Each entry ``P`` uses ``sqrt(P)`` sum children and ``sqrt(P)``
    product children at depth one, giving ``P`` leaves. Returns rows of
    ``(partitions, naive_seconds, shared_seconds, max_rel_error)``, with
    times taken as the minimum over ``repeats``.
    """
    from .kernels import Hyperparameters
    from .structure import build

    rng = np.random.default_rng(seed)
    X = np.sort(rng.uniform(-3, 3, size=(n, 1)), axis=0)
    hp = hp or Hyperparameters.init(1, lengthscale=0.5, signal_var=1.0, noise_var=0.01)
    rows = []
    for P in partitions:
        k = int(round(np.sqrt(P)))
        if k * k != P:
            raise UsageError(f"partitions must be perfect squares, got {P}")
        g = build(X, K_S=k, K_P=k, R=1, minN=1, seed=seed).with_hyperparameters(hp)
        p = plan(g)
        execute(p, g, X)  # compile and warm caches
        naive, shared = np.inf, np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            execute_naive(g, X)
            naive = min(naive, time.perf_counter() - t0)
            t0 = time.perf_counter()
            got = execute(p, g, X)
            shared = min(shared, time.perf_counter() - t0)
        err = max(factor_error(L, X[rows], hp) for rows, L in got.values())
        rows.append((P, naive, shared, err))
    return rows


def factor_error(L, X, hp):
    """Relative Frobenius error of ``L L'`` against ``k(X, X) + sn2*I``."""
    C = covariance(X, hp)
    return float(np.linalg.norm(L @ L.T - C) / np.linalg.norm(C))
