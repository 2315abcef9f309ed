import numpy as np
import pytest

from dsmgp.cholesky import (
    benchmark,
    chol_drop_first,
    chol_extend,
    chol_submatrix,
    chol_update,
    execute,
    execute_naive,
    factor_error,
    plan,
    task_rows,
)
from dsmgp.errors import UsageError
from dsmgp.gp import covariance
from dsmgp.inference import posterior_update
from dsmgp.kernels import Hyperparameters
from dsmgp.structure import DsmgpGraph, LeafNode, ProductNode, Region, SumNode, build

from oracles import random_spd, se_kernel
from problems import random_data


def rel(A, B):
    return np.linalg.norm(A - B) / np.linalg.norm(B)


@pytest.fixture
def spd():
    return lambda n, seed=0: random_spd(n, np.random.default_rng(seed))


def test_submatrix_full_and_unit(spd):
    C = spd(8)
    L = np.linalg.cholesky(C)
    np.testing.assert_array_equal(chol_submatrix(L, 8), L)
    assert chol_submatrix(L, 1)[0, 0] == pytest.approx(np.sqrt(C[0, 0]), rel=1e-15)


def test_submatrix_matches_direct(spd):
    C = spd(8, 1)
    got = chol_submatrix(np.linalg.cholesky(C), 5)
    assert rel(got, np.linalg.cholesky(C[:5, :5])) <= 1e-12
    with pytest.raises(UsageError):
        chol_submatrix(np.linalg.cholesky(C), 9)


def test_drop_first_matches_direct(spd):
    C = spd(12, 2)
    got = chol_drop_first(np.linalg.cholesky(C), 3)
    assert rel(got, np.linalg.cholesky(C[3:, 3:])) <= 1e-10
    assert rel(got @ got.T, C[3:, 3:]) <= 1e-10


def test_drop_all_but_last(spd):
    C = spd(6, 3)
    got = chol_drop_first(np.linalg.cholesky(C), 5)
    assert got.shape == (1, 1)
    assert got[0, 0] == pytest.approx(np.sqrt(C[5, 5]), rel=1e-12)


def test_drop_first_on_diagonal():
    d = np.arange(1.0, 7.0)
    got = chol_drop_first(np.diag(np.sqrt(d)), 2)
    np.testing.assert_allclose(got, np.diag(np.sqrt(d[2:])), rtol=1e-15)


def test_drop_first_rejects_bad_counts(spd):
    L = np.linalg.cholesky(spd(4))
    for k in (0, 4, 5):
        with pytest.raises(UsageError):
            chol_drop_first(L, k)


def test_drop_first_leaves_source_intact(spd):
    L = np.linalg.cholesky(spd(10, 4))
    before = L.copy()
    chol_drop_first(L, 4)
    np.testing.assert_array_equal(L, before)


def test_rank_one_update_matches_direct(spd):
    C = spd(9, 5)
    x = np.random.default_rng(6).normal(size=9)
    got = chol_update(np.linalg.cholesky(C), x)
    assert rel(got, np.linalg.cholesky(C + np.outer(x, x))) <= 1e-12


def test_extend_matches_direct(spd):
    C = spd(10, 7)
    got = chol_extend(np.linalg.cholesky(C[:6, :6]), C[:6, 6:], C[6:, 6:])
    assert rel(got, np.linalg.cholesky(C)) <= 1e-12


def test_kernel_matrix_drop_exact():
    rng = np.random.default_rng(8)
    X = np.sort(rng.uniform(0, 5, 12))[:, None]
    C = se_kernel(X, X, np.array([0.7]), 1.3) + 0.05 * np.eye(12)
    got = chol_drop_first(np.linalg.cholesky(C), 3)
    assert rel(got @ got.T, C[3:, 3:]) <= 1e-10


def test_single_tree_graph_plans_all_direct():
    X, _ = random_data(np.random.default_rng(9), 300, 1)
    g = build(X, K_S=1, K_P=4, R=2, minN=10, seed=0, hp=Hyperparameters.init(1))
    p = plan(g)
    assert {t.kind for t in p.tasks} == {"direct"}
    assert len(p.tasks) == len(g.leaves)


def hand_siblings(X, split_a, split_b, hp):
    """One sum over two products, each splitting 1-D data in two."""
    box = Region.bounding_box(X)
    order = np.argsort(X[:, 0], kind="stable")
    nodes, scope, idx = [SumNode([1, 2], np.log([0.5, 0.5]))], [box], [order]
    leaf_ids = 3
    for s in (split_a, split_b):
        nodes.append(ProductNode([leaf_ids, leaf_ids + 1], 0, [s]))
        scope.append(box)
        idx.append(order)
        leaf_ids += 2
    for s in (split_a, split_b):
        lo, hi = box.split(0, [s])
        left = order[X[order, 0] <= s]
        right = order[X[order, 0] > s]
        nodes += [LeafNode(hp), LeafNode(hp)]
        scope += [lo, hi]
        idx += [left, right]
    return DsmgpGraph(nodes, scope, idx)


def test_sibling_products_share_prefix_as_submatrix():
    X = np.linspace(0, 1, 60)[:, None]
    hp = Hyperparameters.init(1, 0.3, 1.0, 0.01)
    g = hand_siblings(X, 0.6, 0.3, hp)
    # leaves: 3 = [0, .6], 4 = (.6, 1], 5 = [0, .3], 6 = (.3, 1]
    p = plan(g)
    by_leaf = {t.leaf: t for t in p.tasks}
    assert by_leaf[5].kind in ("submatrix", "rank1-drop")
    assert by_leaf[5].source == 3
    assert by_leaf[4].source == 6 or by_leaf[4].kind == "direct"
    assert by_leaf[5].extend == 0
    got = execute(p, g, X)
    for leaf, (rows, L) in got.items():
        assert factor_error(L, X[rows], hp) <= 1e-10


def test_plan_is_topological_and_has_no_downdates():
    rng = np.random.default_rng(10)
    X = np.sort(rng.uniform(-3, 3, 400))[:, None]
    g = build(X, K_S=4, K_P=4, R=2, minN=10, seed=1, hp=Hyperparameters.init(1, 0.5))
    p = plan(g)
    seen = set()
    for t in p.tasks:
        assert t.kind in ("direct", "submatrix", "rank1-drop")
        if t.kind != "direct":
            assert t.source in seen
        seen.add(t.leaf)
    assert seen == set(g.leaves)
    assert p.counts().get("direct", 0) < len(g.leaves)


def test_plan_execution_equals_direct_factorization():
    rng = np.random.default_rng(11)
    for dim in (1, 2):
        X, _ = random_data(rng, 300, dim)
        g = build(X, K_S=3, K_P=3, R=2, minN=15, seed=2, hp=Hyperparameters.init(dim, 0.8))
        got = execute(plan(g), g, X)
        naive = execute_naive(g, X)
        for leaf, (rows, L) in got.items():
            assert np.array_equal(np.sort(rows), np.sort(g.data_idx[leaf]))
            C = covariance(X[rows], g.nodes[leaf].hp)
            assert rel(L @ L.T, C) <= 1e-10
            # same matrix up to row order
            _, Ln = naive[leaf]
            assert abs(np.log(np.diag(L)).sum() - np.log(np.diag(Ln)).sum()) <= 1e-9


def test_shared_factors_give_same_posterior():
    rng = np.random.default_rng(12)
    X = np.sort(rng.uniform(-3, 3, 250))[:, None]
    y = np.sin(X[:, 0]) + 0.1 * rng.standard_normal(250)
    g = build(X, K_S=3, K_P=3, R=2, minN=10, seed=3, hp=Hyperparameters.init(1, 0.7, 1.0, 0.05))
    a, za = posterior_update(g, X, y)
    b, zb = posterior_update(g, X, y, execute(plan(g), g, X))
    assert za == pytest.approx(zb, rel=1e-11)
    for s in a.sums:
        np.testing.assert_allclose(a.nodes[s].log_weights, b.nodes[s].log_weights, atol=1e-9)


def test_different_hyperparameters_are_never_shared():
    rng = np.random.default_rng(13)
    X = np.sort(rng.uniform(-3, 3, 200))[:, None]
    g = build(X, K_S=3, K_P=2, R=1, minN=10, seed=4)
    hps = [Hyperparameters.init(1, 0.5 + 0.1 * k) for k in range(len(g.leaves))]
    g = g.with_hyperparameters(hps)
    assert {t.kind for t in plan(g).tasks} == {"direct"}


def test_task_rows_follow_orientation():
    X = np.linspace(0, 1, 40)[:, None]
    g = hand_siblings(X, 0.6, 0.3, Hyperparameters.init(1))
    for t in plan(g).tasks:
        rows = task_rows(g, t)
        want = g.data_idx[t.leaf][::-1] if t.reverse else g.data_idx[t.leaf]
        np.testing.assert_array_equal(rows, want)


def test_benchmark_rows_are_exact():
    rows = benchmark(partitions=(4, 9), n=200, repeats=1)
    assert [r[0] for r in rows] == [4, 9]
    assert all(r[1] > 0 and r[2] > 0 and r[3] <= 1e-10 for r in rows)
    with pytest.raises(UsageError):
        benchmark(partitions=(5,), n=50, repeats=1)
