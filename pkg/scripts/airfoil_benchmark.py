"""Airfoil benchmark: RMSE, MAE and NLPD for every method on one split.

Needs a local copy of the data (five inputs then the sound level).
Usage: python scripts/airfoil_benchmark.py --data airfoil.csv [--out airfoil_benchmark]
"""

import argparse

from dsmgp import cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", required=True)
    ap.add_argument("--iters", type=int, default=1000)
    ap.add_argument("--out", default="airfoil_benchmark")
    a = ap.parse_args()
    raise SystemExit(cli.main([
        "benchmark", "--protocol", "airfoil", "--data", a.data, "--iters", str(a.iters),
        "--methods", "gp,nle,gpoe,rbcm,dsmgp", "--out", a.out,
    ]))


if __name__ == "__main__":
    main()
