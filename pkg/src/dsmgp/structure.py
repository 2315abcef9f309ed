"""Tree-shaped sum-product graphs over axis-aligned covariate regions.

Intervals along a split dimension are left-open and right-closed,
``(lower, upper]``, so a point lying exactly on a split point belongs to
the lower child. The root region is the training bounding box and is
closed on both sides.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import UsageError
from .kernels import Hyperparameters

__all__ = [
    "Region",
    "SumNode",
    "ProductNode",
    "LeafNode",
    "DsmgpGraph",
    "build",
    "default_kp",
    "validate",
    "count_induced_trees",
    "route",
    "route_leaf",
    "induced_tree",
    "to_json",
    "from_json",
    "graph_hash",
]

FORMAT_VERSION = 1


@dataclass(frozen=True)
class Region:
    lower: np.ndarray
    upper: np.ndarray
    closed_lower: np.ndarray

    @classmethod
    def bounding_box(cls, X):
        X = np.asarray(X, dtype=float)
        lo, hi = X.min(0), X.max(0)
        flat = hi <= lo
        lo = np.where(flat, lo - 0.5, lo)
        hi = np.where(flat, hi + 0.5, hi)
        return cls(lo, hi, np.ones(X.shape[1], dtype=bool))

    @property
    def dim(self):
        return self.lower.shape[0]

    def contains(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        above = (X > self.lower) | (self.closed_lower & (X == self.lower))
        return np.all(above & (X <= self.upper), axis=1)

    def split(self, d, splits):
        """Child regions obtained by cutting dimension ``d`` at ``splits``."""
        bounds = np.r_[self.lower[d], splits, self.upper[d]]
        out = []
        for k in range(len(bounds) - 1):
            lo, hi, cl = self.lower.copy(), self.upper.copy(), self.closed_lower.copy()
            lo[d], hi[d] = bounds[k], bounds[k + 1]
            if k > 0:
                cl[d] = False
            out.append(Region(lo, hi, cl))
        return out

    def same(self, other):
        return (
            np.array_equal(self.lower, other.lower)
            and np.array_equal(self.upper, other.upper)
            and np.array_equal(self.closed_lower, other.closed_lower)
        )

    def interiors_overlap(self, other):
        return bool(np.all((self.lower < other.upper) & (other.lower < self.upper)))

    def to_dict(self):
        return {
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "closed_lower": self.closed_lower.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["lower"], dtype=float),
            np.asarray(d["upper"], dtype=float),
            np.asarray(d["closed_lower"], dtype=bool),
        )


@dataclass
class SumNode:
    children: list
    prior_log_weights: np.ndarray
    # Posterior log-weights; equal to the prior until inference runs.
    log_weights: np.ndarray = None

    def __post_init__(self):
        self.prior_log_weights = np.asarray(self.prior_log_weights, dtype=float)
        if self.log_weights is None:
            self.log_weights = self.prior_log_weights.copy()
        self.log_weights = np.asarray(self.log_weights, dtype=float)


@dataclass
class ProductNode:
    children: list
    split_dim: int
    splits: np.ndarray

    def __post_init__(self):
        self.splits = np.asarray(self.splits, dtype=float)

    def child_index(self, x):
        return np.searchsorted(self.splits, x[..., self.split_dim], side="left")


@dataclass
class LeafNode:
    hp: Hyperparameters = None
    posterior: object = None


@dataclass
class DsmgpGraph:
    """Flat node list in breadth-first order (children have larger ids)."""

    nodes: list
    scope: list
    data_idx: list
    root: int = 0
    log_values: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.nodes)

    @property
    def leaves(self):
        return [i for i, n in enumerate(self.nodes) if isinstance(n, LeafNode)]

    @property
    def sums(self):
        return [i for i, n in enumerate(self.nodes) if isinstance(n, SumNode)]

    @property
    def products(self):
        return [i for i, n in enumerate(self.nodes) if isinstance(n, ProductNode)]

    @property
    def dim(self):
        return self.scope[self.root].dim

    def copy(self):
        """Copy with fresh node records; arrays and regions are shared."""
        nodes = []
        for n in self.nodes:
            if isinstance(n, SumNode):
                nodes.append(SumNode(list(n.children), n.prior_log_weights, n.log_weights.copy()))
            elif isinstance(n, ProductNode):
                nodes.append(ProductNode(list(n.children), n.split_dim, n.splits))
            else:
                nodes.append(LeafNode(n.hp, n.posterior))
        lv = None if self.log_values is None else self.log_values.copy()
        return replace(self, nodes=nodes, log_values=lv, meta=dict(self.meta))

    def with_hyperparameters(self, hp):
        """Copy with leaf hyperparameters set; ``hp`` is shared or a per-leaf list."""
        g = self.copy()
        leaves = g.leaves
        hps = list(hp) if isinstance(hp, (list, tuple)) else [hp] * len(leaves)
        if len(hps) != len(leaves):
            raise UsageError(f"{len(hps)} hyperparameter sets for {len(leaves)} leaves")
        for i, h in zip(leaves, hps):
            g.nodes[i] = LeafNode(h, None)
        g.log_values = None
        for i in g.sums:
            g.nodes[i].log_weights = g.nodes[i].prior_log_weights.copy()
        return g

    def leaf_hyperparameters(self):
        return [self.nodes[i].hp for i in self.leaves]

    def parents(self):
        par = [-1] * len(self.nodes)
        for i, n in enumerate(self.nodes):
            if not isinstance(n, LeafNode):
                for c in n.children:
                    par[c] = i
        return par


def default_kp(n, m, r):
    """Number of product children so that R levels reach about M points per leaf."""
    if r < 1:
        return 2
    return max(2, math.ceil((n / m) ** (1.0 / r) - 1e-12))


def canonical_order(X):
    """Lexicographic row order used for every node's index array."""
    X = np.asarray(X, dtype=float)
    return np.lexsort(X.T[::-1])


def _sample_splits(rng, col, n_splits):
    dmin, dmax = col.min(), col.max()
    dmed = np.median(col)
    v = dmax - dmin
    s = 0.5 * (v * rng.beta(2.0, 2.0, size=n_splits) + dmin) + 0.5 * dmed
    return np.sort(s)


def _assign(splits, col):
    return np.searchsorted(splits, col, side="left")


def _merge_empty(splits, col):
    """Drop split points until no child is empty.

    An empty child is merged into its preceding sibling; an empty first
    child is merged into the following one.
    """
    splits = np.asarray(splits)
    while splits.size:
        counts = np.bincount(_assign(splits, col), minlength=splits.size + 1)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            break
        k = empty[0]
        splits = np.delete(splits, k - 1 if k > 0 else 0)
    return splits


def build(X, K_S=4, K_P=None, R=2, minN=100, seed=0, hp=None, max_resample=10):
    """Random alternating sum/product structure over the rows of ``X``.

    Sums get ``K_S`` product children with uniform weights. Each product
    draws a split dimension with probability proportional to the
    per-dimension variance of its data and ``K_P - 1`` split points from
    ``0.5 * (v * Beta(2, 2) + min) + 0.5 * median``. A child becomes a
    leaf when it holds at most ``minN`` observations or after ``R``
    sum/product repetitions.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    N, D = X.shape
    if minN < 1:
        raise UsageError(f"minN must be positive, got {minN}")
    if K_P is None:
        K_P = default_kp(N, minN, R)
    if K_S < 1 or K_P < 2 or R < 0:
        raise UsageError(f"invalid structure settings K_S={K_S} K_P={K_P} minN={minN} R={R}")
    if N < 1:
        raise UsageError("empty dataset")
    if not np.all(np.isfinite(X)):
        raise UsageError("non-finite covariates")

    ss = np.random.SeedSequence(seed)
    root_region = Region.bounding_box(X)
    order = canonical_order(X)
    meta = {"K_S": int(K_S), "K_P": int(K_P), "R": int(R), "minN": int(minN), "seed": int(seed), "N": int(N)}

    nodes, scope, data_idx = [], [], []

    def new(node, region, idx):
        nodes.append(node)
        scope.append(region)
        data_idx.append(idx)
        return len(nodes) - 1

    if R == 0 or N <= minN:
        new(LeafNode(hp), root_region, order)
        return DsmgpGraph(nodes, scope, data_idx, 0, meta=meta)

    queue = [(new(None, root_region, order), "sum", 0)]
    head = 0
    while head < len(queue):
        nid, kind, depth = queue[head]
        head += 1
        region, idx = scope[nid], data_idx[nid]
        if kind == "sum":
            children = []
            for _ in range(K_S):
                cid = new(None, region, idx)
                children.append(cid)
                queue.append((cid, "product", depth))
            nodes[nid] = SumNode(children, np.full(K_S, -np.log(K_S)))
            continue

        rng = np.random.default_rng(ss.spawn(1)[0])
        Xn = X[idx]
        var = Xn.var(axis=0)
        p = var / var.sum() if var.sum() > 0 else np.full(D, 1.0 / D)
        d = int(rng.choice(D, p=p))
        col = Xn[:, d]
        for _ in range(max_resample + 1):
            splits = _sample_splits(rng, col, K_P - 1)
            counts = np.bincount(_assign(splits, col), minlength=K_P)
            if np.all(counts > 0):
                break
        else:
            splits = _merge_empty(splits, col)
        which = _assign(splits, col)
        children = []
        for k, creg in enumerate(region.split(d, splits)):
            cidx = idx[which == k]
            if cidx.size > minN and depth + 1 < R:
                cid = new(None, creg, cidx)
                queue.append((cid, "sum", depth + 1))
            else:
                cid = new(LeafNode(hp), creg, cidx)
            children.append(cid)
        nodes[nid] = ProductNode(children, d, splits)

    return DsmgpGraph(nodes, scope, data_idx, 0, meta=meta)


def validate(g, X=None):
    """List of invariant violations; empty when the graph is well formed.

    With covariates ``X`` the data assignment is checked against regions.
    """
    bad = []
    n = len(g.nodes)
    nparents = [0] * n
    for i, node in enumerate(g.nodes):
        if isinstance(node, LeafNode):
            continue
        for c in node.children:
            if not 0 <= c < n:
                bad.append(f"node {i}: child id {c} out of range")
                continue
            nparents[c] += 1
    for i in range(n):
        want = 0 if i == g.root else 1
        if nparents[i] != want:
            bad.append(f"node {i}: has {nparents[i]} parents, expected {want}")

    seen, stack = set(), [g.root]
    while stack:
        i = stack.pop()
        if i in seen:
            bad.append(f"node {i}: reached twice (cycle or shared child)")
            continue
        seen.add(i)
        node = g.nodes[i]
        if not isinstance(node, LeafNode):
            stack.extend(c for c in node.children if 0 <= c < n)
    for i in range(n):
        if i not in seen:
            bad.append(f"node {i}: unreachable from root")

    for i, region in enumerate(g.scope):
        if np.any(region.lower >= region.upper):
            bad.append(f"node {i}: empty region")

    for i, node in enumerate(g.nodes):
        if isinstance(node, SumNode):
            for name, lw in (("prior", node.prior_log_weights), ("posterior", node.log_weights)):
                if len(lw) != len(node.children):
                    bad.append(f"node {i}: {name} weight count mismatch")
                    continue
                total = np.logaddexp.reduce(lw) if len(lw) else -np.inf
                if abs(total) > 1e-12:
                    bad.append(f"node {i}: {name} log-weights sum to {total:.3e}")
            for c in node.children:
                if not g.scope[c].same(g.scope[i]):
                    bad.append(f"node {i}: completeness violated by child {c}")
                if not np.array_equal(g.data_idx[c], g.data_idx[i]):
                    bad.append(f"node {i}: child {c} holds different data")
        elif isinstance(node, ProductNode):
            ch = node.children
            for a in range(len(ch)):
                for b in range(a + 1, len(ch)):
                    if g.scope[ch[a]].interiors_overlap(g.scope[ch[b]]):
                        bad.append(f"node {i}: decomposability violated by children {ch[a]}, {ch[b]}")
            if not _tiles(g.scope[i], [g.scope[c] for c in ch], node.split_dim):
                bad.append(f"node {i}: children do not tile the parent region")
            parts = [g.data_idx[c] for c in ch]
            joined = np.concatenate(parts) if parts else np.array([], dtype=int)
            if joined.size != np.unique(joined).size:
                bad.append(f"node {i}: children share observations")
            if not np.array_equal(np.sort(joined), np.sort(g.data_idx[i])):
                bad.append(f"node {i}: children do not partition the parent data")

    if X is not None:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if not np.array_equal(np.sort(g.data_idx[g.root]), np.arange(X.shape[0])):
            bad.append(f"node {g.root}: root does not hold every observation")
        for i, region in enumerate(g.scope):
            inside = np.flatnonzero(region.contains(X))
            if not np.array_equal(np.sort(g.data_idx[i]), inside):
                bad.append(f"node {i}: data indices disagree with region membership")
    return bad


def _tiles(parent, kids, d):
    if not kids:
        return False
    for k in kids:
        others = np.arange(parent.dim) != d
        if not (np.array_equal(k.lower[others], parent.lower[others])
                and np.array_equal(k.upper[others], parent.upper[others])):
            return False
    kids = sorted(kids, key=lambda r: r.lower[d])
    if kids[0].lower[d] != parent.lower[d] or kids[-1].upper[d] != parent.upper[d]:
        return False
    return all(a.upper[d] == b.lower[d] for a, b in zip(kids, kids[1:]))


def count_induced_trees(g):
    """Exact number of induced trees (Python int, arbitrary precision)."""
    counts = [0] * len(g.nodes)
    for i in reversed(range(len(g.nodes))):
        node = g.nodes[i]
        if isinstance(node, LeafNode):
            counts[i] = 1
        elif isinstance(node, SumNode):
            counts[i] = sum(counts[c] for c in node.children)
        else:
            counts[i] = math.prod(counts[c] for c in node.children)
    return counts[g.root]


def route(g, xstar):
    """Map each product id to the child whose region holds ``xstar``.

    Points outside the root region fall into the nearest child.
    """
    x = np.asarray(xstar, dtype=float).ravel()
    if x.shape[0] != g.dim:
        raise UsageError(f"query has dimension {x.shape[0]}, expected {g.dim}")
    out = {}
    for i in g.products:
        node = g.nodes[i]
        out[i] = node.children[int(node.child_index(x))]
    return out


def route_leaf(g, xstar, choice=None):
    """Leaf reached by ``xstar`` when each sum picks ``choice[sum_id]`` (default 0)."""
    x = np.asarray(xstar, dtype=float).ravel()
    i = g.root
    while not isinstance(g.nodes[i], LeafNode):
        node = g.nodes[i]
        if isinstance(node, SumNode):
            i = node.children[0 if choice is None else choice.get(i, 0)]
        else:
            i = node.children[int(node.child_index(x))]
    return i


def induced_tree(g, choice=None):
    """Subgraph keeping child ``choice[sum_id]`` (default 0) of every sum.

    Returns ``(tree, old_ids)``; the tree's sums have one child of weight 1,
    so it is a pure partition model with ``K_S = 1``.
    """
    nodes, scope, data_idx, old_ids = [], [], [], []
    queue = [g.root]
    head = 0
    pending = []
    while head < len(queue):
        i = queue[head]
        head += 1
        node = g.nodes[i]
        old_ids.append(i)
        scope.append(g.scope[i])
        data_idx.append(g.data_idx[i])
        if isinstance(node, LeafNode):
            nodes.append(LeafNode(node.hp))
            continue
        kids = [node.children[0 if choice is None else choice.get(i, 0)]] if isinstance(node, SumNode) else node.children
        pending.append((len(nodes), node, len(queue), len(kids)))
        nodes.append(None)
        queue.extend(kids)
    for pos, node, start, k in pending:
        kids = list(range(start, start + k))
        if isinstance(node, SumNode):
            nodes[pos] = SumNode(kids, [0.0])
        else:
            nodes[pos] = ProductNode(kids, node.split_dim, node.splits)
    meta = dict(g.meta, K_S=1)
    return DsmgpGraph(nodes, scope, data_idx, 0, meta=meta), old_ids


def to_json(g):
    nodes = []
    for i, n in enumerate(g.nodes):
        rec = {"id": i, "region": g.scope[i].to_dict(), "data_idx": np.asarray(g.data_idx[i]).tolist()}
        if isinstance(n, SumNode):
            rec.update(kind="sum", children=list(n.children),
                       prior_log_weights=n.prior_log_weights.tolist(),
                       log_weights=n.log_weights.tolist())
        elif isinstance(n, ProductNode):
            rec.update(kind="product", children=list(n.children),
                       split_dim=int(n.split_dim), splits=n.splits.tolist())
        else:
            rec.update(kind="leaf", hp=None if n.hp is None else n.hp.to_dict())
        nodes.append(rec)
    doc = {"format": "dsmgp-graph", "version": FORMAT_VERSION, "root": g.root, "meta": g.meta, "nodes": nodes}
    return json.dumps(doc, sort_keys=True)


def from_json(text):
    doc = json.loads(text) if isinstance(text, str) else text
    if doc.get("format") != "dsmgp-graph" or doc.get("version") != FORMAT_VERSION:
        raise UsageError("not a version-1 dsmgp graph document")
    nodes, scope, data_idx = [], [], []
    for rec in sorted(doc["nodes"], key=lambda r: r["id"]):
        if rec["kind"] == "sum":
            nodes.append(SumNode(rec["children"], rec["prior_log_weights"], rec["log_weights"]))
        elif rec["kind"] == "product":
            nodes.append(ProductNode(rec["children"], rec["split_dim"], rec["splits"]))
        elif rec["kind"] == "leaf":
            hp = None if rec["hp"] is None else Hyperparameters.from_dict(rec["hp"])
            nodes.append(LeafNode(hp))
        else:
            raise UsageError(f"unknown node kind {rec['kind']!r}")
        scope.append(Region.from_dict(rec["region"]))
        data_idx.append(np.asarray(rec["data_idx"], dtype=np.int64))
    return DsmgpGraph(nodes, scope, data_idx, doc["root"], meta=doc.get("meta", {}))


def graph_hash(g):
    return hashlib.sha256(to_json(g).encode()).hexdigest()[:16]
