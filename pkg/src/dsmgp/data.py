"""Dataset ingestion, splitting, standardization and scores."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import UsageError

__all__ = [
    "Standardization",
    "Dataset",
    "load_csv",
    "write_csv",
    "split",
    "standardize",
    "metrics",
    "gaussian_logdensity",
    "synth_hetero",
    "HALF_LOG_2PI",
]

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Standardization:
    """Training-split statistics; columns with zero spread are dropped."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    keep: np.ndarray

    @classmethod
    def fit(cls, X, y):
        if X.shape[0] < 2:
            raise UsageError("need at least two training rows to standardize")
        sd = X.std(axis=0)
        keep = sd > 0
        y_std = float(y.std())
        if y_std == 0:
            raise UsageError("target is constant on the training split")
        return cls(X.mean(axis=0), np.where(keep, sd, 1.0), float(y.mean()), y_std, keep)

    def transform_x(self, X):
        return ((X - self.x_mean) / self.x_std)[:, self.keep]

    def transform_y(self, y):
        return (y - self.y_mean) / self.y_std

    def inverse_y(self, y):
        return y * self.y_std + self.y_mean


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    name: str = ""
    columns: tuple = ()
    split_tag: str | None = None
    standardization: Standardization | None = None
    source: str | None = None

    def __post_init__(self):
        if self.X.ndim != 2 or self.y.ndim != 1 or self.X.shape[0] != self.y.shape[0]:
            raise UsageError("Dataset needs an N x D matrix and N targets")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def dim(self):
        return self.X.shape[1]

    def subset(self, idx, tag=None):
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, X=self.X[idx], y=self.y[idx], split_tag=tag)


def load_csv(path, target_column=None, name=None, drop=()):
    """Numeric CSV with a header row; the last column is the target by default.

    ``target_column`` (name or integer index) picks a different target.
    Columns named in ``drop`` (e.g. the other outputs of a multi-output
    file) are excluded from the inputs.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise UsageError(f"{path}: empty file")
    header, body = [c.strip() for c in rows[0]], rows[1:]
    if not body:
        raise UsageError(f"{path}: no data rows")
    width = len(header)
    M = np.empty((len(body), width))
    for r, row in enumerate(body, start=2):
        if len(row) != width:
            raise UsageError(f"{path}:{r}: expected {width} fields, found {len(row)}")
        for c, cell in enumerate(row):
            try:
                M[r - 2, c] = float(cell)
            except ValueError:
                raise UsageError(f"{path}:{r}: non-numeric cell {cell!r} in column {header[c]!r}") from None
    if not np.all(np.isfinite(M)):
        raise UsageError(f"{path}: non-finite values")
    if width < 2:
        raise UsageError(f"{path}: need at least one input and one target column")

    t = width - 1 if target_column is None else _column(path, header, target_column)
    dropped = {_column(path, header, c) for c in drop}
    inputs = [c for c in range(width) if c != t and c not in dropped]
    if not inputs:
        raise UsageError(f"{path}: no input columns left")
    return Dataset(
        X=M[:, inputs],
        y=M[:, t].copy(),
        name=name or os.path.splitext(os.path.basename(path))[0],
        columns=tuple(header[c] for c in inputs) + (header[t],),
        source=os.fspath(path),
    )


def _column(path, header, key):
    if isinstance(key, (int, np.integer)) or str(key).lstrip("-").isdigit():
        k = int(key)
        if not -len(header) <= k < len(header):
            raise UsageError(f"{path}: column index {k} out of range")
        return k % len(header)
    if key in header:
        return header.index(key)
    raise UsageError(f"{path}: no column named {key!r}")


def write_csv(path, d):
    cols = list(d.columns) or [f"x{j}" for j in range(d.dim)] + ["y"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for x, t in zip(d.X, d.y):
            w.writerow([repr(float(v)) for v in x] + [repr(float(t))])


def _sidecar(d):
    if d.source is None:
        return None
    path = d.source + ".split.json"
    if not os.path.exists(path):
        return None
    with open(path, encoding="utf-8") as fh:
        sides = json.load(fh)
    tr = np.asarray(sides["train"], dtype=np.int64)
    te = np.asarray(sides["test"], dtype=np.int64)
    all_idx = np.concatenate([tr, te])
    if np.unique(all_idx).size != all_idx.size or all_idx.min() < 0 or all_idx.max() >= d.n:
        raise UsageError(f"{path}: train/test indices must be disjoint row numbers")
    return tr, te


def split(d, frac=0.7, seed=0, use_sidecar=True):
    """Seeded shuffle into ceil(frac * N) training rows and the rest.

    A predefined split in ``<source>.split.json`` (keys ``train`` and
    ``test``, zero-based row numbers) takes precedence when present.
    """
    if not 0.0 < frac <= 1.0:
        raise UsageError("frac must lie in (0, 1]")
    pre = _sidecar(d) if use_sidecar else None
    if pre is not None:
        tr, te = pre
    else:
        perm = np.random.default_rng(seed).permutation(d.n)
        k = math.ceil(frac * d.n - 1e-9)
        tr, te = perm[:k], perm[k:]
    return d.subset(tr, "train"), d.subset(te, "test")


def standardize(train, *others):
    """Zero-mean unit-variance inputs and target from training statistics."""
    for ds in (train, *others):
        if ds.standardization is not None:
            raise UsageError(f"dataset {ds.name!r} ({ds.split_tag}) is already standardized")
    st = Standardization.fit(train.X, train.y)
    kept = tuple(c for c, k in zip(train.columns[:-1], st.keep) if k) + train.columns[-1:]
    out = [
        replace(ds, X=st.transform_x(ds.X), y=st.transform_y(ds.y), standardization=st,
                columns=kept if ds.columns else ())
        for ds in (train, *others)
    ]
    return out[0] if not others else tuple(out)


def gaussian_logdensity(y, mean, var):
    y, mean, var = (np.asarray(a, dtype=float) for a in (y, mean, var))
    r = y - mean
    return -HALF_LOG_2PI - 0.5 * np.log(var) - 0.5 * r * r / var


def metrics(yhat, var_or_logdens, y, kind="var"):
    """(RMSE, MAE, NLPD).

    ``kind="var"`` treats the second argument as Gaussian predictive
    variances; ``kind="logdens"`` as precomputed log p(y_n | x_n).
    """
    yhat = np.asarray(yhat, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if yhat.shape != y.shape or y.size == 0:
        raise UsageError("predictions and targets must be non-empty and equal length")
    err = yhat - y
    rmse = float(np.sqrt(np.mean(err * err)))
    mae = float(np.mean(np.abs(err)))
    if kind == "var":
        ld = gaussian_logdensity(y, yhat, var_or_logdens)
    elif kind == "logdens":
        ld = np.asarray(var_or_logdens, dtype=float).ravel()
    else:
        raise UsageError(f"unknown kind {kind!r}")
    return rmse, mae, float(-np.mean(ld))


def hetero_noise_std(x):
    return 0.05 + 0.95 * (x / 10.0) ** 2


def hetero_mean(x):
    return np.sin(1.2 * x) + 0.1 * x


def synth_hetero(n, seed=0):
    """1-D data on [0, 10] with noise std rising from 0.05 to 1.0."""
    if n < 1:
        raise UsageError("n must be positive")
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0.0, 10.0, n))
    y = hetero_mean(x) + hetero_noise_std(x) * rng.standard_normal(n)
    return Dataset(x[:, None], y, name=f"hetero-{seed}", columns=("x", "y"))
