"""Naive versus shared leaf factorization time as the partition count grows.

Usage: python scripts/cholesky_speedup.py [--n 1000] [--out cholesky.csv]
"""

import argparse

from dsmgp.cholesky import benchmark


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--out", default="cholesky.csv")
    a = ap.parse_args()

    rows = benchmark(n=a.n, repeats=a.repeats)
    with open(a.out, "w") as fh:
        fh.write("partitions,naive,shared,ratio,max_rel_error\n")
        for P, naive, shared, err in rows:
            fh.write(f"{P},{naive:.6f},{shared:.6f},{shared / naive:.3f},{err:.2e}\n")
            print(f"P={P:3d} naive {naive:.4f}s shared {shared:.4f}s ratio {shared / naive:.2f}")


if __name__ == "__main__":
    main()
