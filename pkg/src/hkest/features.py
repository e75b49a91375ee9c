"""Envelope-statistics features and their normalization.

The feature vector is always ordered

    [R^0.72, R^0.88, S^0.72, S^0.88, K^0.72, K^0.88, X, U]

where R, S, K are the point-wise SNR, skewness and (non-excess) kurtosis
of the fractional amplitude A^v and X, U are the log-moments of the
intensity I = A^2.  Expectations are plain averages (divide-by-n).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .hkmodel import EnvelopeSamples

V_EXPONENTS = (0.72, 0.88)
FEATURE_NAMES = ("r072", "r088", "s072", "s088", "k072", "k088", "x_stat", "u_stat")
N_FEATURES = len(FEATURE_NAMES)
MIN_SAMPLES = 16


@dataclass(frozen=True)
class FeatureVector:
    r072: float
    r088: float
    s072: float
    s088: float
    k072: float
    k088: float
    x_stat: float
    u_stat: float

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FEATURE_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "FeatureVector":
        arr = np.asarray(arr, dtype=np.float64).ravel()
        if arr.size != N_FEATURES:
            raise ValueError(f"expected {N_FEATURES} features, got {arr.size}")
        return cls(*map(float, arr))


def moments_to_rsk(m1, m2, m3, m4):
    """SNR, skewness and kurtosis from the raw moments E[Y], E[Y^2], E[Y^3], E[Y^4]."""
    var = m2 - m1 * m1
    r = m1 / np.sqrt(var)
    s = (m3 - 3.0 * m1 * m2 + 2.0 * m1 ** 3) / var ** 1.5
    k = (m4 - 4.0 * m1 * m3 + 6.0 * m2 * m1 ** 2 - 3.0 * m1 ** 4) / var ** 2
    return r, s, k


def feature_matrix(values) -> np.ndarray:
    """Features for every row of a 2-D array of envelope samples.

    Returns shape (rows, 8).  A 1-D input is treated as a single row.
    Raises ValueError on rows with non-positive entries or zero variance.
    """
    a = np.asarray(values, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError("envelope samples must be 1-D or 2-D")
    if a.shape[1] < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {a.shape[1]}")
    if not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise ValueError("envelope samples must be finite and strictly positive")

    out = np.empty((a.shape[0], N_FEATURES))
    log_a = np.log(a)
    for j, v in enumerate(V_EXPONENTS):
        y = np.exp(v * log_a)
        # Central moments of the plug-in estimator; algebraically identical to
        # the raw-moment formulas, without their cancellation.
        mu = y.mean(axis=1, keepdims=True)
        d = y - mu
        d2 = d * d
        c2 = d2.mean(axis=1)
        c3 = (d2 * d).mean(axis=1)
        c4 = (d2 * d2).mean(axis=1)
        if np.any(c2 <= 0):
            raise ValueError("zero variance of the fractional amplitude; features undefined")
        out[:, j] = mu[:, 0] / np.sqrt(c2)
        out[:, 2 + j] = c3 / c2 ** 1.5
        out[:, 4 + j] = c4 / c2 ** 2

    log_i = 2.0 * log_a
    intensity = a * a
    # Scale out the mean intensity first: X and U are then computed on I/E[I].
    mean_i = intensity.mean(axis=1, keepdims=True)
    log_rel = log_i - np.log(mean_i)
    rel = intensity / mean_i
    e_log = log_rel.mean(axis=1)
    out[:, 7] = e_log
    out[:, 6] = (rel * log_rel).mean(axis=1) - e_log
    return out


def compute_features(s) -> FeatureVector:
    """Sample (plug-in) features of one envelope sample set."""
    values = s.values if isinstance(s, EnvelopeSamples) else s
    return FeatureVector.from_array(feature_matrix(np.asarray(values).ravel())[0])


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureNorm:
    """Per-coordinate z-scoring.  std uses the population (ddof=0) convention."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape:
            raise ValueError("mean and std must have the same shape")
        if np.any(~(std > 0)):
            raise ValueError("normalization std must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def apply(self, f):
        return _map(f, lambda x: (x - self.mean) / self.std)

    def invert(self, z):
        return _map(z, lambda x: x * self.std + self.mean)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureNorm":
        return cls(np.array(d["mean"]), np.array(d["std"]))


def _map(f, fn):
    if isinstance(f, FeatureVector):
        return FeatureVector.from_array(fn(f.to_array()))
    return fn(np.asarray(f, dtype=np.float64))


def fit_norm(batch) -> FeatureNorm:
    """Mean and population std of each coordinate over a batch of feature vectors."""
    arr = np.array([f.to_array() if isinstance(f, FeatureVector) else f for f in batch],
                   dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValueError("need a batch of at least two feature vectors")
    std = arr.std(axis=0)
    bad = np.flatnonzero(~(std > 0))
    if bad.size:
        raise ValueError(f"degenerate coordinates (zero std): {bad.tolist()}")
    return FeatureNorm(arr.mean(axis=0), std)


def apply_norm(f, norm: FeatureNorm):
    return norm.apply(f)


def invert_norm(z, norm: FeatureNorm):
    return norm.invert(z)


# ---------------------------------------------------------------------------
# Feature CSV
# ---------------------------------------------------------------------------

TRUTH_COLUMNS = ("log10_alpha", "k", "ns", "rho")


def write_feature_csv(path, features, truth: dict | None = None) -> None:
    """Header of the eight canonical names plus any ground-truth columns given."""
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    truth = {k: np.asarray(v).ravel() for k, v in (truth or {}).items()}
    unknown = set(truth) - set(TRUTH_COLUMNS)
    if unknown:
        raise ValueError(f"unknown ground-truth columns {sorted(unknown)}")
    cols = [c for c in TRUTH_COLUMNS if c in truth]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(FEATURE_NAMES) + cols)
        for i, row in enumerate(feats):
            w.writerow([repr(float(x)) for x in row] + [_fmt(truth[c][i]) for c in cols])


def _fmt(x):
    x = x.item() if hasattr(x, "item") else x
    return repr(float(x)) if isinstance(x, float) else str(x)


def read_feature_csv(path):
    """Returns (features (n, 8) array, dict of ground-truth columns present)."""
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty feature file")
    header = rows[0]
    missing = [n for n in FEATURE_NAMES if n not in header]
    if missing:
        raise ValueError(f"{path}: missing feature columns {missing}")
    body = [r for r in rows[1:] if r]
    idx = [header.index(n) for n in FEATURE_NAMES]
    feats = np.array([[float(r[i]) for i in idx] for r in body], dtype=np.float64).reshape(-1, 8)
    truth = {}
    for c in TRUTH_COLUMNS:
        if c in header:
            j = header.index(c)
            truth[c] = np.array([float(r[j]) for r in body])
    return feats, truth
