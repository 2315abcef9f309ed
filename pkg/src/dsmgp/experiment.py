"""End-to-end experiment runs: data, structure, training, evaluation, outputs."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import itertools
import json
import os
import tempfile
import time
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import gp
from ._version import __version__
from .baselines import ExpertEnsemble
from .cholesky import plan as sharing_plan
from .cholesky import shared_factors
from .data import gaussian_logdensity, load_csv, metrics, split, standardize, synth_hetero
from .errors import UsageError
from .hyperopt import OptimizerState, _global_value_and_grad, optimize
from .inference import logdensity_batch, posterior_update, predict_batch
from .kernels import Hyperparameters
from .structure import build, count_induced_trees, from_json, graph_hash, induced_tree, to_json

__all__ = [
    "METHODS",
    "PROTOCOLS",
    "ExperimentConfig",
    "parse_config",
    "load_config",
    "load_dataset",
    "run",
    "run_and_write",
    "sweep",
    "predict_queries",
    "atomic_write",
]

METHODS = ("dsmgp", "gp", "nle", "gpoe", "rbcm")

# Structure settings of the named benchmark protocols.
PROTOCOLS = {
    "airfoil": {"K_S": 4, "M": 100, "R": 2},
    "kin40k": {"K_S": 4, "M": 100, "R": 2},
    "motorcycle": {"K_S": 4, "R": 1, "M": 7},
}


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment. ``M`` is the leaf size threshold (observations per expert).

    ``data`` is a CSV path or ``synth:hetero:<n>``. ``target_column`` may
    list several comma-separated columns; each is then run as a separate
    single-output problem (with the others dropped) and scores are averaged.
    """

    data: str = ""
    target_column: str | None = None
    method: str = "dsmgp"
    K_S: int = 4
    K_P: int | None = None
    M: int = 100
    R: int = 2
    seed: int = 0
    split_frac: float = 0.7
    mode: str = "global"
    iters: int = 1000
    step: float = 0.05
    decay: float = 0.9
    eps: float = 1e-8
    surrogate: bool = True
    share_cholesky: bool = True
    lengthscale: float = 1.0
    signal_var: float = 1.0
    noise_var: float = 0.1
    beta: str | None = None
    timing_iters: int = 0
    timing_warmup: int = 3
    out_dir: str | None = None
    sweep_K_S: tuple = ()
    sweep_M: tuple = ()
    workers: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise UsageError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.mode not in ("global", "finetune"):
            raise UsageError(f"mode must be global or finetune, got {self.mode!r}")
        for name in ("K_S", "M", "iters", "workers"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be positive")
        if self.K_P is not None and self.K_P < 2:
            raise UsageError("K_P must be at least 2")
        if self.R < 0 or self.timing_warmup < 0:
            raise UsageError("R and timing_warmup must be non-negative")
        if self.timing_iters and self.timing_iters < 20:
            raise UsageError("timing_iters must be 0 (off) or at least 20")
        if self.beta not in (None, "uniform", "entropy"):
            raise UsageError(f"beta must be uniform or entropy, got {self.beta!r}")

    def to_dict(self):
        return dataclasses.asdict(self)

    def identity(self):
        """Settings that determine the numbers (output location excluded)."""
        d = self.to_dict()
        for k in ("out_dir", "workers", "sweep_K_S", "sweep_M"):
            d.pop(k)
        return d

    def hash(self):
        blob = json.dumps(self.identity(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _convert(name, text):
    hint = typing.get_type_hints(ExperimentConfig)[name]
    text = text.strip()
    if hint is tuple:
        return tuple(int(v) for v in text.split(",") if v.strip())
    if text.lower() in ("none", "") and type(None) in typing.get_args(hint):
        return None
    base = [t for t in typing.get_args(hint) if t is not type(None)] or [hint]
    base = base[0]
    if base is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{name}: expected a boolean, got {text!r}")
    try:
        return base(text)
    except ValueError:
        raise UsageError(f"{name}: cannot parse {text!r} as {base.__name__}") from None


def parse_config(lines, base=None):
    """Flat ``key = value`` lines ('#' starts a comment) over ``base``."""
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    values = {} if base is None else base.to_dict()
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"line {n}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "protocol":
            values.update(PROTOCOLS[val])
            continue
        if key not in known:
            raise UsageError(f"line {n}: unknown key {key!r}")
        values[key] = _convert(key, val)
    return ExperimentConfig(**values)


def load_config(path, overrides=()):
    with open(path, encoding="utf-8") as fh:
        cfg = parse_config(fh)
    return parse_config(overrides, cfg)


def atomic_write(path, text):
    """Write via a temporary file in the same directory, then rename."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def load_dataset(cfg, target=None):
    if cfg.data.startswith("synth:hetero"):
        parts = cfg.data.split(":")
        n = int(parts[2]) if len(parts) > 2 else 500
        return synth_hetero(n, cfg.seed)
    if not cfg.data:
        raise UsageError("no dataset given")
    targets = _targets(cfg)
    drop = [t for t in targets if t != target] if target is not None else []
    return load_csv(cfg.data, target_column=target, drop=drop)


def _targets(cfg):
    if cfg.target_column is None:
        return []
    return [t.strip() for t in str(cfg.target_column).split(",") if t.strip()]


class _Stage:
    """Records the pipeline stage that is running when an error escapes."""

    def __init__(self):
        self.name = "init"

    def __call__(self, name):
        self.name = name
        return self


def _initial_hp(cfg, dim):
    return Hyperparameters.init(dim, cfg.lengthscale, cfg.signal_var, cfg.noise_var)


def _opt(cfg):
    return OptimizerState(step=cfg.step, decay=cfg.decay, eps=cfg.eps)


def _graph_for(cfg, X):
    if cfg.method == "gp":
        return build(X, K_S=1, R=0, minN=X.shape[0], seed=cfg.seed)
    return build(X, K_S=cfg.K_S, K_P=cfg.K_P, R=cfg.R, minN=cfg.M, seed=cfg.seed)


def _train(cfg, g, X, y, hp0):
    """Returns (per-leaf hyperparameter list of ``g``, trace, final log marginal)."""
    leaves = g.leaves
    if cfg.method == "gp":
        res = optimize(g, X, y, "global", cfg.iters, _opt(cfg), hp0=hp0)
        return res.hps, res.trace, res.log_marginal
    trace = []
    if cfg.surrogate or cfg.method != "dsmgp":
        tree, _ = induced_tree(g)
        res = optimize(tree, X, y, "global", cfg.iters, _opt(cfg), hp0=hp0)
        hp0 = res.hps[0]
        trace = res.trace
        if cfg.method != "dsmgp" or cfg.mode == "global":
            return [hp0] * len(leaves), trace, res.log_marginal
    share = cfg.share_cholesky and cfg.mode == "global"
    res = optimize(g, X, y, cfg.mode, cfg.iters, _opt(cfg), hp0=hp0, share=share)
    return res.hps, trace + res.trace, res.log_marginal


def _time_iterations(cfg, g, X, y, hps):
    """Mean seconds per hyperparameter-optimization iteration (objective + gradient)."""
    from .hyperopt import _finetune_value_and_grad, overlap_similarity

    if cfg.method == "gp" or cfg.mode == "global" or cfg.method != "dsmgp":
        graph = g if cfg.method in ("gp", "dsmgp") else induced_tree(g)[0]
        hp = hps[0]
        sharing = None
        if cfg.method == "dsmgp" and cfg.share_cholesky:
            sharing = sharing_plan(graph.with_hyperparameters(hp))

        def step():
            _global_value_and_grad(graph, X, y, hp, sharing)
    else:
        S = overlap_similarity(g)

        def step():
            _finetune_value_and_grad(g, X, y, hps, S)

    for _ in range(cfg.timing_warmup):
        step()
    t0 = time.perf_counter()
    for _ in range(cfg.timing_iters):
        step()
    return (time.perf_counter() - t0) / cfg.timing_iters


def _evaluate(cfg, g, hps, Xtr, ytr, Xte, yte):
    """Test predictions and scores; returns (record, prediction rows)."""
    rec = {}
    if cfg.method == "dsmgp":
        gh = g.with_hyperparameters(hps)
        tied = all(h == hps[0] for h in hps)
        factors = shared_factors(gh, Xtr) if cfg.share_cholesky and tied else None
        post, logz = posterior_update(gh, Xtr, ytr, factors)
        mean, var = predict_batch(post, Xte, noise=True)
        ld = logdensity_batch(post, Xte, yte)
        rmse, mae, nlpd = metrics(mean, ld, yte, kind="logdens")
        rec.update(log_marginal=logz, graph_hash=graph_hash(post))
        rec["metrics"] = {"rmse": rmse, "mae": mae, "nlpd": nlpd}
        return rec, (mean, var, ld)
    if cfg.method == "gp":
        p = gp.fit(Xtr, ytr, hps[0])
        mean, var = gp.predict_batch(p, Xte)
        var = var + hps[0].noise_var
        rmse, mae, nlpd = metrics(mean, var, yte)
        rec.update(log_marginal=p.lml, graph_hash=graph_hash(g.with_hyperparameters(hps)))
        rec["metrics"] = {"rmse": rmse, "mae": mae, "nlpd": nlpd}
        return rec, (mean, var, gaussian_logdensity(yte, mean, var))

    rules = ["uniform", "entropy"] if cfg.method != "nle" else ["uniform"]
    primary = cfg.beta or ("entropy" if cfg.method == "rbcm" else "uniform")
    by_rule, out = {}, None
    for rule in rules:
        e = ExpertEnsemble.fit(g, Xtr, ytr, hps[0], aggregation=cfg.method, beta=rule)
        mean, var = e.predict(Xte, noise=True)
        rmse, mae, nlpd = metrics(mean, var, yte)
        by_rule[rule] = {"rmse": rmse, "mae": mae, "nlpd": nlpd}
        if cfg.method == "nle" or rule == primary:
            out = (mean, var, gaussian_logdensity(yte, mean, var))
    rec["metrics"] = by_rule["uniform"] if cfg.method == "nle" else by_rule[primary]
    if cfg.method != "nle":
        rec["metrics_by_beta"] = by_rule
        rec["beta"] = primary
    rec["graph_hash"] = graph_hash(g.with_hyperparameters(hps))
    return rec, out


def _run_target(cfg, target, stage):
    stage("load")
    d = load_dataset(cfg, target)
    stage("split")
    tr, te = split(d, cfg.split_frac, cfg.seed)
    stage("standardize")
    tr, te = standardize(tr, te)
    stage("build")
    g = _graph_for(cfg, tr.X)
    hp0 = _initial_hp(cfg, tr.dim)
    stage("optimize")
    hps, trace, lm_train = _train(cfg, g, tr.X, tr.y, hp0)
    stage("evaluate")
    rec, (mean, var, ld) = _evaluate(cfg, g, hps, tr.X, tr.y, te.X, te.y)
    rec.update(
        target=tr.columns[-1] if tr.columns else "y",
        n_train=tr.n,
        n_test=te.n,
        dim=tr.dim,
        n_leaves=len(g.leaves),
        induced_trees=count_induced_trees(g) if cfg.method == "dsmgp" else 1,
        train_objective=lm_train,
        hyperparameters=[h.to_dict() for h in _distinct(hps)],
    )
    seconds = None
    if cfg.timing_iters:
        stage("timing")
        seconds = _time_iterations(cfg, g, tr.X, tr.y, hps)
    pred_rows = [
        [repr(float(v)) for v in x] + [repr(float(a)), repr(float(b)), repr(float(c))]
        for x, a, b, c in zip(te.X, mean, var, ld)
    ]
    cols = [f"x{j}" for j in range(te.dim)]
    extras = {
        "graph": to_json(g.with_hyperparameters(hps)),
        "predictions": _csv_text(cols + ["mm_mean", "mm_var", "logdensity"], pred_rows),
        "trace": _csv_text(["iteration", "log_marginal", "seconds"],
                           [[i, repr(v), f"{s:.6f}"] for i, v, s in trace]),
        "seconds_per_iteration": seconds,
    }
    return rec, extras


def _distinct(hps):
    seen, out = set(), []
    for h in hps:
        if h not in seen:
            seen.add(h)
            out.append(h)
    return out


def run(cfg):
    """Run one configuration; returns ``(result, artifacts)``.

    ``result`` is the JSON-ready record (no wall-clock values, so equal
    configurations give identical records). ``artifacts`` maps each
    target to its serialized graph, prediction CSV, trace CSV and timing.
    On failure ``result["status"]`` is ``"error"`` and ``result["error"]``
    names the stage; targets finished before the failure are kept.
    """
    result = {
        "format": "dsmgp-result",
        "library_version": __version__,
        "config": cfg.identity(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "method": cfg.method,
        "targets": [],
        "status": "ok",
    }
    artifacts = {}
    stage = _Stage()
    try:
        for target in _targets(cfg) or [None]:
            rec, extras = _run_target(cfg, target, stage)
            result["targets"].append(rec)
            artifacts[rec["target"]] = extras
    except Exception as exc:  # recorded, not swallowed: the caller sees status
        result["status"] = "error"
        result["error"] = {"stage": stage.name, "type": type(exc).__name__, "message": str(exc)}
    done = result["targets"]
    if done:
        keys = done[0]["metrics"].keys()
        result["metrics"] = {k: float(np.mean([r["metrics"][k] for r in done])) for k in keys}
    return result, artifacts


def _write_outputs(cfg, result, artifacts, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    atomic_write(os.path.join(out_dir, "result.json"), json.dumps(result, indent=2, sort_keys=True) + "\n")
    multi = len(artifacts) > 1
    timing = []
    for name, a in artifacts.items():
        suffix = f"-{name}" if multi else ""
        atomic_write(os.path.join(out_dir, f"graph{suffix}.json"), a["graph"])
        atomic_write(os.path.join(out_dir, f"predictions{suffix}.csv"), a["predictions"])
        atomic_write(os.path.join(out_dir, f"trace{suffix}.csv"), a["trace"])
        if a["seconds_per_iteration"] is not None:
            timing.append([name, cfg.method, cfg.timing_iters, cfg.timing_warmup,
                           f"{a['seconds_per_iteration']:.6g}"])
    if timing:
        atomic_write(os.path.join(out_dir, "timing.csv"),
                     _csv_text(["target", "method", "iterations", "warmup", "seconds_per_iteration"], timing))


def run_and_write(cfg, out_dir=None):
    """:func:`run` plus the result JSON and CSV artifacts in ``out_dir``."""
    out_dir = out_dir or cfg.out_dir
    result, artifacts = run(cfg)
    if out_dir:
        _write_outputs(cfg, result, artifacts, out_dir)
    return result


def _sweep_one(args):
    cfg, out_dir = args
    res = run_and_write(cfg, out_dir)
    return cfg.K_S, cfg.M, res


def sweep(cfg, out_dir=None):
    """Run the (K_S, M) grid; returns rows (K_S, M, status, rmse, mae, nlpd, induced_trees)."""
    out_dir = out_dir or cfg.out_dir
    ks = cfg.sweep_K_S or (cfg.K_S,)
    ms = cfg.sweep_M or (cfg.M,)
    jobs = []
    for k, m in itertools.product(ks, ms):
        sub = dataclasses.replace(cfg, K_S=k, M=m, sweep_K_S=(), sweep_M=())
        jobs.append((sub, os.path.join(out_dir, f"K_S={k}_M={m}") if out_dir else None))
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            done = list(ex.map(_sweep_one, jobs))
    else:
        done = [_sweep_one(j) for j in jobs]
    rows = []
    for k, m, res in done:
        met = res.get("metrics", {})
        trees = res["targets"][0]["induced_trees"] if res["targets"] else ""
        rows.append([k, m, res["status"], met.get("rmse", ""), met.get("mae", ""), met.get("nlpd", ""), trees])
    if out_dir:
        atomic_write(os.path.join(out_dir, "sweep.csv"),
                     _csv_text(["K_S", "M", "status", "rmse", "mae", "nlpd", "induced_trees"], rows))
    return rows


def _load_run(run_dir, target=None):
    with open(os.path.join(run_dir, "result.json"), encoding="utf-8") as fh:
        result = json.load(fh)
    if result.get("status") != "ok":
        raise UsageError(f"{run_dir}: run did not finish successfully")
    cfg = ExperimentConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in result["config"].items()})
    names = [t["target"] for t in result["targets"]]
    if target is None:
        if len(names) > 1:
            raise UsageError(f"{run_dir}: several targets {names}; choose one")
        target = names[0]
    elif target not in names:
        raise UsageError(f"{run_dir}: no target {target!r}")
    suffix = f"-{target}" if len(names) > 1 else ""
    with open(os.path.join(run_dir, f"graph{suffix}.json"), encoding="utf-8") as fh:
        g = from_json(fh.read())
    return cfg, g, (target if _targets(cfg) else None)


def predict_queries(run_dir, queries_path, out_path=None, target=None):
    """Predict at the rows of a query CSV with a trained run.

    The query CSV has the training inputs' columns, optionally followed by
    the target. Inputs are scaled with the training statistics; outputs
    are reported in the original target units. Returns the CSV text.
    """
    cfg, g, tcol = _load_run(run_dir, target)
    d = load_dataset(cfg, tcol)
    tr, _ = split(d, cfg.split_frac, cfg.seed)
    tr_s = standardize(tr)
    st = tr_s.standardization
    with open(queries_path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    try:
        Q = np.array([[float(c) for c in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise UsageError(f"{queries_path}: {exc}") from None
    if Q.ndim != 2 or Q.shape[0] == 0:
        raise UsageError(f"{queries_path}: no query rows")
    D = tr.dim
    if Q.shape[1] not in (D, D + 1):
        raise UsageError(f"{queries_path}: expected {D} input columns (plus optional target)")
    Xq = st.transform_x(Q[:, :D])
    yq = st.transform_y(Q[:, D]) if Q.shape[1] == D + 1 else None
    hps = g.leaf_hyperparameters()

    if cfg.method in ("dsmgp", "gp"):
        post, _ = posterior_update(g, tr_s.X, tr_s.y)
        mean, var = predict_batch(post, Xq, noise=True)
        ld = logdensity_batch(post, Xq, yq) if yq is not None else None
    else:
        e = ExpertEnsemble.fit(g, tr_s.X, tr_s.y, hps[0], aggregation=cfg.method, beta=cfg.beta)
        mean, var = e.predict(Xq, noise=True)
        ld = gaussian_logdensity(yq, mean, var) if yq is not None else None
    scale = st.y_std
    out_rows = []
    for n in range(Q.shape[0]):
        dens = "" if ld is None else repr(float(ld[n] - np.log(scale)))
        out_rows.append([repr(float(v)) for v in Q[n, :D]] + [
            repr(float(st.inverse_y(mean[n]))), repr(float(var[n] * scale * scale)), dens])
    header = list(rows[0][:D]) + ["mm_mean", "mm_var", "logdensity"]
    text = _csv_text(header, out_rows)
    if out_path:
        atomic_write(out_path, text)
    return text
