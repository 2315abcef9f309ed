"""Test RMSE against expert size on Kin40k for DSMGP, gPoE and rBCM.

Needs a local copy of the data (inputs then target per row).
Usage: python scripts/kin40k_curve.py --data kin40k.csv [--M 100,1000] [--out kin40k.csv]
"""

import argparse

from dsmgp.experiment import PROTOCOLS, ExperimentConfig, run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", required=True)
    ap.add_argument("--M", default="100,1000")
    ap.add_argument("--iters", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="kin40k_curve.csv")
    a = ap.parse_args()

    rows = []
    for M in (int(m) for m in a.M.split(",")):
        for method in ("dsmgp", "gpoe", "rbcm"):
            cfg = ExperimentConfig(data=a.data, method=method, iters=a.iters, seed=a.seed,
                                   **{**PROTOCOLS["kin40k"], "M": M})
            res, _ = run(cfg)
            rmse = res["metrics"]["rmse"] if res["status"] == "ok" else float("nan")
            print(f"M={M:5d} {method:6s} rmse {rmse:.4f} {res['status']}")
            rows.append(f"{M},{method},{rmse!r},{res['status']}")
    with open(a.out, "w") as fh:
        fh.write("M,method,rmse,status\n" + "\n".join(rows) + "\n")


if __name__ == "__main__":
    main()
