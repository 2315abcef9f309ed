import math

import numpy as np
import pytest

from dsmgp import gp
from dsmgp.errors import UsageError
from dsmgp.kernels import Hyperparameters

from oracles import central_diff, gp_dense, hp_tuple


@pytest.fixture
def problem():
    rng = np.random.default_rng(3)
    X = rng.uniform(-3, 3, size=(25, 2))
    y = np.cos(X[:, 0]) * X[:, 1] + 0.1 * rng.standard_normal(25)
    hp = Hyperparameters(np.array([0.3, -0.2]), 0.2, -2.5)
    return X, y, hp


def test_fit_and_predict_match_dense_oracle(problem):
    X, y, hp = problem
    Xs = np.random.default_rng(4).uniform(-3, 3, size=(9, 2))
    lml, m, v = gp_dense(X, y, *hp_tuple(hp), Xs)
    p = gp.fit(X, y, hp)
    mean, var = gp.predict_batch(p, Xs)
    assert p.lml == pytest.approx(lml, rel=1e-11)
    np.testing.assert_allclose(mean, m, rtol=1e-9, atol=1e-11)
    np.testing.assert_allclose(var, v, rtol=1e-8, atol=1e-11)


def test_single_point_closed_form():
    hp = Hyperparameters.init(1, lengthscale=1.0, signal_var=2.0, noise_var=0.5)
    p = gp.fit([[0.0]], [1.5], hp)
    c = 2.5
    assert p.lml == pytest.approx(-0.5 * 1.5**2 / c - 0.5 * math.log(c) - 0.5 * math.log(2 * math.pi))
    m, v = gp.predict(p, [0.0])
    assert m == pytest.approx(2.0 * 1.5 / c)
    assert v == pytest.approx(2.0 - 4.0 / c)


def test_far_query_reverts_to_prior(problem):
    X, y, hp = problem
    m, v = gp.predict(gp.fit(X, y, hp), [1e3, 1e3])
    assert m == pytest.approx(0.0, abs=1e-12)
    assert v == pytest.approx(hp.signal_var, rel=1e-12)


def test_lml_gradient_matches_central_differences(problem):
    X, y, hp = problem
    f = lambda th: gp.fit(X, y, Hyperparameters.from_vector(th)).lml
    want = central_diff(f, hp.vector(), h=1e-5)
    got = gp.lml_grad(gp.fit(X, y, hp))
    np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-6)


def test_signal_gradient_vanishes_at_grid_maximizer():
    rng = np.random.default_rng(5)
    X = rng.uniform(0, 5, size=(30, 1))
    y = np.sin(X[:, 0]) + 0.2 * rng.standard_normal(30)
    grid = np.linspace(-2.0, 2.0, 4001)
    vals = [gp.fit(X, y, Hyperparameters(np.array([0.0]), s, np.log(0.05))).lml for s in grid]
    best = grid[int(np.argmax(vals))]
    g = gp.lml_grad(gp.fit(X, y, Hyperparameters(np.array([0.0]), best, np.log(0.05))))
    assert abs(g[1]) < 1e-2


def test_precomputed_factor_is_used(problem):
    X, y, hp = problem
    ref = gp.fit(X, y, hp)
    again = gp.fit(X, y, hp, chol_L=ref.chol_L)
    assert again.lml == ref.lml
    with pytest.raises(UsageError):
        gp.fit(X, y, hp, chol_L=np.eye(3))


def test_full_covariance_diagonal_agrees(problem):
    X, y, hp = problem
    p = gp.fit(X, y, hp)
    Xs = X[:4] + 0.01
    m1, v1 = gp.predict_batch(p, Xs)
    m2, cov = gp.predict_batch(p, Xs, full_cov=True)
    np.testing.assert_allclose(m1, m2)
    np.testing.assert_allclose(v1, np.diag(cov), atol=1e-12)


@pytest.mark.parametrize(
    "X, y",
    [
        (np.zeros((3, 2)), np.zeros(2)),
        (np.zeros((0, 2)), np.zeros(0)),
        (np.array([[np.inf, 0.0]]), np.zeros(1)),
        (np.zeros((2, 3)), np.zeros(2)),
    ],
)
def test_fit_rejects_bad_data(X, y):
    with pytest.raises(UsageError):
        gp.fit(X, y, Hyperparameters.init(2))


def test_duplicate_inputs_without_noise_use_jitter():
    hp = Hyperparameters(np.array([0.0]), 0.0, np.log(1e-300))
    p = gp.fit(np.zeros((3, 1)), np.ones(3), hp)
    assert p.jitter > 0
