"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` (the lines are also shown
without ``-s``). Criteria 5, 6 and 8 need the Kin40k and Airfoil CSVs in
the directory named by ``DSMGP_DATA_DIR`` (``kin40k.csv``, ``airfoil.csv``,
target in the last column, optional ``<name>.csv.split.json`` sidecar).
"""

import math
import os

import numpy as np
import pytest

from dsmgp import gp
from dsmgp.baselines import ExpertEnsemble, gpoe_predict, rbcm_predict
from dsmgp.cholesky import benchmark, execute, plan
from dsmgp.data import load_csv, split, standardize
from dsmgp.experiment import PROTOCOLS, ExperimentConfig, run
from dsmgp.gp import covariance
from dsmgp.hyperopt import finetune_gradient, global_gradient, optimize
from dsmgp.inference import log_marginal, logdensity_batch, posterior_update, predict_batch
from dsmgp.kernels import Hyperparameters
from dsmgp.structure import build, count_induced_trees

from oracles import brute_force, central_diff, gp_dense, hp_tuple
from problems import interior_queries, random_data, random_hp, random_problem

HERE = os.path.dirname(__file__)
DATA_DIR = os.environ.get("DSMGP_DATA_DIR", "")


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail

    return emit


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


def dataset_path(name):
    path = os.path.join(DATA_DIR, f"{name}.csv") if DATA_DIR else ""
    return path if path and os.path.exists(path) else None


def test_criterion_1_single_leaf_equals_gp(report):
    rng = np.random.default_rng(100)
    worst = 0.0
    for _ in range(20):
        n, dim = int(rng.integers(5, 201)), int(rng.integers(1, 4))
        X, y = random_data(rng, n, dim)
        hp = random_hp(rng, dim)
        Xs = rng.uniform(-2, 2, size=(30, dim))
        post, logz = posterior_update(build(X, R=0, hp=hp), X, y)
        m, v = predict_batch(post, Xs)
        lml, m0, v0 = gp_dense(X, y, *hp_tuple(hp), Xs)
        worst = max(worst, rel_err(logz, lml), rel_err(m, m0), rel_err(v, v0))
    report(1, worst <= 1e-8, f"max relative error {worst:.2e} over 20 instances (tol 1e-8)")


def test_criterion_2_induced_tree_oracle(report):
    rng = np.random.default_rng(200)
    worst, trees = 0.0, []
    for trial in range(100):
        g, X, y = random_problem(rng, max_trees=100, per_leaf_hp=bool(trial % 2))
        Xs = interior_queries(g, rng, 4)
        ys = rng.normal(size=4)
        ref = brute_force(g, X, y, Xs, ys)
        trees.append(ref["n_trees"])
        post, logz = posterior_update(g, X, y)
        m, v = predict_batch(post, Xs, noise=True)
        errs = [
            abs(logz - ref["log_marginal"]) / max(1.0, abs(ref["log_marginal"])),
            np.max(np.abs(m - ref["mean"])),
            np.max(np.abs(v - ref["var"])),
            np.max(np.abs(logdensity_batch(post, Xs, ys) - ref["logdensity"])),
        ]
        errs += [np.max(np.abs(np.exp(post.nodes[s].log_weights) - w)) for s, w in ref["weights"].items()]
        worst = max(worst, *errs)
    report(2, worst <= 1e-10,
           f"max error {worst:.2e} over 100 graphs with {min(trees)}..{max(trees)} trees (tol 1e-10)")


def test_criterion_3_gradients(report):
    rng = np.random.default_rng(300)
    worst_g = worst_f = 0.0
    for _ in range(50):
        g, X, y = random_problem(rng, max_trees=30)
        hp = random_hp(rng, g.dim)

        def f_glob(th):
            return log_marginal(g.with_hyperparameters(Hyperparameters.from_vector(th)), X, y)

        fd = central_diff(f_glob, hp.vector(), h=1e-5)
        worst_g = max(worst_g, np.linalg.norm(global_gradient(g, X, y, hp) - fd) / np.linalg.norm(fd))

        L = len(g.leaves)
        hps = [random_hp(rng, g.dim) for _ in range(L)]

        def f_leaf(th):
            return log_marginal(g.with_hyperparameters([Hyperparameters.from_vector(t) for t in th]), X, y)

        fd = central_diff(f_leaf, np.stack([h.vector() for h in hps]), h=1e-5)
        got = finetune_gradient(g, X, y, hps, np.eye(L))
        worst_f = max(worst_f, np.linalg.norm(got - fd) / np.linalg.norm(fd))

    exact = True
    for _ in range(20):
        g, X, y = random_problem(rng)
        hp = random_hp(rng, g.dim)
        L = len(g.leaves)
        ft = finetune_gradient(g, X, y, [hp] * L, np.ones((L, L)))
        gl = global_gradient(g, X, y, hp)
        exact &= all(np.array_equal(row, gl) for row in ft)
    ok = worst_g <= 1e-4 and worst_f <= 1e-4 and exact
    report(3, ok, f"global rel err {worst_g:.1e}, finetune rel err {worst_f:.1e} over 50 instances "
                  f"(tol 1e-4); all-ones S equals global bitwise: {exact}")


def test_criterion_4_shared_cholesky(report):
    rng = np.random.default_rng(400)
    worst = 0.0
    for trial in range(10):
        dim = 1 + trial % 2
        X, _ = random_data(rng, 400, dim)
        hp = random_hp(rng, dim)
        g = build(X, K_S=3, K_P=3, R=2, minN=10, seed=trial, hp=hp)
        for rows, L in execute(plan(g), g, X).values():
            Ld = np.linalg.cholesky(covariance(X[rows], hp))
            worst = max(worst, np.linalg.norm(L - Ld) / np.linalg.norm(Ld))
    rows = benchmark(partitions=(49, 64), n=1000, repeats=5)
    ratios = {P: shared / naive for P, naive, shared, _ in rows}
    worst = max(worst, *(r[3] for r in rows))
    ok = worst <= 1e-10 and all(r <= 0.6 for r in ratios.values())
    detail = ", ".join(f"P={P} ratio {r:.2f}" for P, r in ratios.items())
    report(4, ok, f"max factor error {worst:.1e} (tol 1e-10); {detail} (tol 0.6)")


def _protocol_runs(path, name, methods, **over):
    out = {}
    for method in methods:
        cfg = ExperimentConfig(data=path, method=method, **{**PROTOCOLS[name], **over})
        res, _ = run(cfg)
        if res["status"] != "ok":
            raise RuntimeError(f"{method}: {res['error']}")
        out[method] = res["metrics"]
    return out


@pytest.mark.slow
def test_criterion_5_kin40k_curve(report):
    path = dataset_path("kin40k")
    if path is None:
        report(5, False, "kin40k.csv not found in DSMGP_DATA_DIR; criterion not evaluated")
    rmse = {}
    for M in (100, 1000):
        res = _protocol_runs(path, "kin40k", ("dsmgp", "gpoe", "rbcm"), M=M)
        rmse[M] = {k: v["rmse"] for k, v in res.items()}
    r = rmse[100]
    order = r["dsmgp"] < r["rbcm"] < r["gpoe"]
    beats = all(v["dsmgp"] <= min(v["gpoe"], v["rbcm"]) for v in rmse.values())
    band = abs(rmse[100]["dsmgp"] - 0.32) <= 0.05 and abs(rmse[1000]["dsmgp"] - 0.16) <= 0.05
    report(5, order and beats, f"RMSE {rmse}; ordering at M=100 {order}; within band {band}")


@pytest.mark.slow
def test_criterion_6_airfoil(report):
    path = dataset_path("airfoil")
    if path is None:
        report(6, False, "airfoil.csv not found in DSMGP_DATA_DIR; criterion not evaluated")
    res = _protocol_runs(path, "airfoil", ("dsmgp", "gpoe", "rbcm"))
    d = res["dsmgp"]
    ok = d["mae"] <= 0.40 and d["nlpd"] <= 0.75 and d["nlpd"] < min(res["gpoe"]["nlpd"], res["rbcm"]["nlpd"])
    report(6, ok, f"dsmgp MAE {d['mae']:.3f} NLPD {d['nlpd']:.3f}; "
                  f"gPoE NLPD {res['gpoe']['nlpd']:.3f}; rBCM NLPD {res['rbcm']['nlpd']:.3f}")


def test_criterion_7_motorcycle(report):
    d = standardize(load_csv(os.path.join(HERE, "data", "mcycle.csv")))
    X, y = d.X, d.y
    full = build(X, R=0, hp=Hyperparameters.init(1))
    hp = optimize(full, X, y, iters=500).hps[0]
    p = PROTOCOLS["motorcycle"]
    g = build(X, K_S=p["K_S"], R=p["R"], minN=p["M"], seed=0).with_hyperparameters(hp)
    Xs = np.linspace(X.min(), X.max(), 1000)[:, None]
    m0, _ = gp.predict_batch(gp.fit(X, y, hp), Xs)
    post, _ = posterior_update(g, X, y)
    msd = {"dsmgp": float(np.mean((predict_batch(post, Xs)[0] - m0) ** 2))}
    e = ExpertEnsemble.fit(g, X, y, hp, aggregation="gpoe")
    msd["gpoe"] = float(np.mean((gpoe_predict(e, Xs, beta="uniform")[0] - m0) ** 2))
    msd["rbcm"] = float(np.mean((rbcm_predict(e, Xs, beta="entropy")[0] - m0) ** 2))
    ok = msd["dsmgp"] < msd["gpoe"] and msd["dsmgp"] < msd["rbcm"]
    detail = ", ".join(f"{k} {v:.4f}" for k, v in msd.items())
    report(7, ok, f"MSD to full-GP mean on 1000-point grid: {detail}")


def _airfoil_protocol_count(X):
    p = PROTOCOLS["airfoil"]
    return count_induced_trees(build(X, K_S=p["K_S"], R=p["R"], minN=p["M"], seed=0))


def test_criterion_8_mixture_size(report):
    target = 5.44e2
    path = dataset_path("airfoil")
    if path is None:
        # same row count and width as the Airfoil training split, for context only
        Xsyn = np.random.default_rng(0).normal(size=(1053, 5))
        report(8, False, "airfoil.csv not found in DSMGP_DATA_DIR; criterion not evaluated "
                         f"(shape-matched synthetic inputs give {_airfoil_protocol_count(Xsyn)})")
    tr, _ = split(load_csv(path), 0.7, 0)
    trs = standardize(tr)
    n = _airfoil_protocol_count(trs.X)
    ok = abs(math.log10(n / target)) <= 1.0
    report(8, ok, f"{n} induced trees vs {target:.0f} (within one order of magnitude: {ok})")
