"""Command line entry point: ``dsmgp {train,predict,benchmark,sweep,chol-bench}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import cholesky
from .errors import NumericalError, StateError, UsageError
from .experiment import (
    METHODS,
    ExperimentConfig,
    _csv_text,
    atomic_write,
    load_config,
    parse_config,
    predict_queries,
    run_and_write,
    sweep,
)

# flag name -> config key
_FLAGS = {
    "data": "data",
    "target_column": "target_column",
    "method": "method",
    "K_S": "K_S",
    "K_P": "K_P",
    "M": "M",
    "R": "R",
    "seed": "seed",
    "iters": "iters",
    "mode": "mode",
    "protocol": "protocol",
    "workers": "workers",
    "timing_iters": "timing_iters",
}


def _config_args(p):
    p.add_argument("--config", help="flat key=value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("--data", help="dataset CSV or synth:hetero:<n>")
    p.add_argument("--target-column", dest="target_column",
                   help="target column name or index; comma-separate several outputs")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--K_S", "--ks", dest="K_S", type=int, help="children per sum node")
    p.add_argument("--K_P", "--kp", dest="K_P", type=int, help="children per product node")
    p.add_argument("--M", "--min-n", dest="M", type=int, help="max observations per leaf")
    p.add_argument("--R", "--depth", dest="R", type=int, help="sum/product repetitions")
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int, help="optimizer iterations")
    p.add_argument("--mode", choices=("global", "finetune"))
    p.add_argument("--protocol", choices=("airfoil", "kin40k", "motorcycle"))
    p.add_argument("--timing-iters", dest="timing_iters", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", required=True, help="output directory")


def _build_config(a):
    lines = []
    for flag, key in _FLAGS.items():
        v = getattr(a, flag, None)
        if v is not None:
            lines.append(f"{key}={v}")
    lines += a.set
    if a.config:
        cfg = load_config(a.config, lines)
    else:
        cfg = parse_config(lines)
    return dataclasses.replace(cfg, out_dir=a.out)


def _report(res):
    met = res.get("metrics")
    if met:
        print(f"{res['method']}: " + " ".join(f"{k}={v:.4f}" for k, v in met.items()))
    if res["status"] != "ok":
        err = res["error"]
        print(f"error in stage {err['stage']}: {err['type']}: {err['message']}", file=sys.stderr)
        return 1
    return 0


def cmd_train(a):
    return _report(run_and_write(_build_config(a)))


def cmd_predict(a):
    text = predict_queries(a.run, a.queries, a.out, target=a.target)
    if not a.out:
        sys.stdout.write(text)
    return 0


def cmd_benchmark(a):
    base = _build_config(a)
    methods = a.methods.split(",") if a.methods else list(METHODS)
    rows, status = [], 0
    for m in methods:
        cfg = dataclasses.replace(base, method=m.strip())
        res = run_and_write(cfg, os.path.join(a.out, cfg.method))
        status |= _report(res)
        if res["status"] != "ok":
            rows.append([cfg.method, "", "", "", "", res["status"]])
            continue
        per_rule = res["targets"][0].get("metrics_by_beta")
        if per_rule and len(res["targets"]) == 1:
            for rule, met in per_rule.items():
                rows.append([cfg.method, rule, met["rmse"], met["mae"], met["nlpd"], "ok"])
        else:
            met = res["metrics"]
            rows.append([cfg.method, "", met["rmse"], met["mae"], met["nlpd"], "ok"])
    atomic_write(os.path.join(a.out, "benchmark.csv"),
                 _csv_text(["method", "beta", "rmse", "mae", "nlpd", "status"], rows))
    return status


def cmd_sweep(a):
    rows = sweep(_build_config(a))
    for r in rows:
        print(" ".join(str(v) for v in r))
    return int(any(r[2] != "ok" for r in rows))


def cmd_chol_bench(a):
    parts = tuple(int(v) for v in a.partitions.split(","))
    rows = cholesky.benchmark(parts, n=a.n, seed=a.seed, repeats=a.repeats)
    text = _csv_text(["partitions", "naive", "shared"],
                     [[p, f"{nv:.6f}", f"{sh:.6f}"] for p, nv, sh, _ in rows])
    if a.out:
        atomic_write(a.out, text)
    else:
        sys.stdout.write(text)
    worst = max(r[3] for r in rows)
    print(f"max relative factor error {worst:.2e}", file=sys.stderr)
    return 0


def make_parser():
    p = argparse.ArgumentParser(prog="dsmgp", description="Deep structured mixtures of GP experts")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit one configuration and score the test split")
    _config_args(t)
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("predict", help="predict at query points with a trained run")
    q.add_argument("--run", required=True, help="output directory of a train run")
    q.add_argument("--queries", required=True, help="CSV of query inputs (optional target last)")
    q.add_argument("--target", help="target name for multi-output runs")
    q.add_argument("--out", help="prediction CSV (stdout when omitted)")
    q.set_defaults(func=cmd_predict)

    b = sub.add_parser("benchmark", help="run several methods on the same partitions")
    _config_args(b)
    b.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    b.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("sweep", help="grid over K_S and M (set sweep_K_S / sweep_M)")
    _config_args(s)
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("chol-bench", help="naive versus shared Cholesky timing")
    c.add_argument("--partitions", default="4,9,16,25,36,49,64")
    c.add_argument("--n", type=int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--repeats", type=int, default=5)
    c.add_argument("--out", help="timing CSV (stdout when omitted)")
    c.set_defaults(func=cmd_chol_bench)
    return p


def main(argv=None):
    a = make_parser().parse_args(argv)
    try:
        return a.func(a)
    except (UsageError, FileNotFoundError, KeyError) as exc:
        print(f"dsmgp: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, StateError) as exc:
        print(f"dsmgp: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
