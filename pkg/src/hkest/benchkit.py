"""Datasets, metrics, the signed-rank test, error maps and parametric images."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erfc

from .estimators import EstimateArrays, Estimator
from .features import N_FEATURES, feature_matrix
from .forward import FeatureLUT
from .hkmodel import (GENERATOR_VERSION, K_RANGE, LOG10_ALPHA_RANGE, make_rng, sample_batch)

PAPER_NS = (256, 1024, 4096)
GRID_ALPHAS = 31
GRID_KS = 11
GRID_REALIZATIONS = 10
GAMMA = 0.05


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class TrainingSet:
    noisy: np.ndarray        # (n, 8) sample features
    theory: np.ndarray       # (n, 8) theoretical features
    params: np.ndarray       # (n, 2) log10 alpha, k
    ns: int
    rho: float
    seed: int

    def __len__(self) -> int:
        return self.params.shape[0]

    def save(self, path) -> None:
        np.savez(path, noisy=self.noisy, theory=self.theory, params=self.params,
                 meta=np.array(json.dumps({"ns": self.ns, "rho": self.rho, "seed": self.seed})))

    @classmethod
    def load(cls, path) -> "TrainingSet":
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            return cls(z["noisy"], z["theory"], z["params"], meta["ns"], meta["rho"], meta["seed"])


def _features_chunked(la, k, ns, rho, rng, chunk_samples=4_000_000):
    out = np.empty((la.size, N_FEATURES))
    step = max(1, chunk_samples // ns)
    for i in range(0, la.size, step):
        env = sample_batch(la[i:i + step], k[i:i + step], ns, rho, rng)
        out[i:i + step] = feature_matrix(env)
    return out


def gen_training_set(count: int, ns: int, rho: float, seed: int, lut: FeatureLUT) -> TrainingSet:
    """Uniform draws over the box with sample and theoretical features.

    Theoretical features come from the LUT interpolant, which agrees with the
    direct quadrature to well below the sampling noise of any ns used here.
    """
    rng = make_rng(seed)
    la = rng.uniform(*LOG10_ALPHA_RANGE, size=count)
    k = rng.uniform(*K_RANGE, size=count)
    noisy = _features_chunked(la, k, ns, rho, rng) if count else np.empty((0, N_FEATURES))
    theory = lut.lookup(la, k) if count else np.empty((0, N_FEATURES))
    return TrainingSet(noisy, theory, np.column_stack([la, k]), ns, rho, seed)


def gen_theory_set(count: int, seed: int, lut: FeatureLUT, jitter: float = 0.5) -> TrainingSet:
    """Grid-plus-jitter points with noiseless features (noisy == theory)."""
    rng = make_rng(seed)
    side = max(2, int(round(math.sqrt(count))))
    ga = np.linspace(*LOG10_ALPHA_RANGE, side)
    gk = np.linspace(*K_RANGE, side)
    la, k = (a.ravel() for a in np.meshgrid(ga, gk, indexing="ij"))
    la = la + jitter * (ga[1] - ga[0]) * rng.uniform(-1, 1, la.size)
    k = k + jitter * (gk[1] - gk[0]) * rng.uniform(-1, 1, k.size)
    la, k = np.clip(la, *LOG10_ALPHA_RANGE), np.clip(k, *K_RANGE)
    theory = lut.lookup(la, k)
    return TrainingSet(theory.copy(), theory, np.column_stack([la, k]), 0, 0.0, seed)


@dataclass
class TestGrid:
    alphas: np.ndarray       # 31 log10 alpha values
    ks: np.ndarray           # 11 k values
    realizations: int
    ns: int
    rho: float
    seed: int
    params: np.ndarray = field(repr=False)     # (3410, 2), alpha-major then k then realization
    features: np.ndarray = field(repr=False)   # (3410, 8)

    def __len__(self) -> int:
        return self.params.shape[0]

    def cell_index(self) -> np.ndarray:
        """(3410, 3) integer (alpha index, k index, realization)."""
        ia, ik, ir = np.meshgrid(np.arange(self.alphas.size), np.arange(self.ks.size),
                                 np.arange(self.realizations), indexing="ij")
        return np.column_stack([ia.ravel(), ik.ravel(), ir.ravel()])


def grid_params(n_alpha=GRID_ALPHAS, n_k=GRID_KS, realizations=GRID_REALIZATIONS):
    ga = np.linspace(*LOG10_ALPHA_RANGE, n_alpha)
    gk = np.linspace(*K_RANGE, n_k)
    la, k, _ = np.meshgrid(ga, gk, np.arange(realizations), indexing="ij")
    return ga, gk, np.column_stack([la.ravel(), k.ravel()])


def gen_test_grid(ns: int, rho: float, seed: int) -> TestGrid:
    """31 x 11 x 10 = 3410 sample sets; features are materialized, raw samples are not kept."""
    ga, gk, params = grid_params()
    rng = make_rng(seed)
    feats = _features_chunked(params[:, 0], params[:, 1], ns, rho, rng)
    return TestGrid(ga, gk, GRID_REALIZATIONS, ns, rho, seed, params, feats)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _pair(y, yhat):
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.size} vs {yhat.size}")
    if y.size < 1:
        raise ValueError("need at least one value")
    return y, yhat


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def rrmse(y, yhat, gamma: float = GAMMA) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2 / (np.abs(y) + gamma))))


def median_iqr(x) -> tuple[float, float, float]:
    q1, med, q3 = np.percentile(np.asarray(x, dtype=np.float64), [25, 50, 75])
    return float(med), float(q1), float(q3)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WilcoxonResult:
    pvalue: float
    statistic: float        # W+ (sum of positive ranks)
    n: int                  # non-zero differences used
    method: str             # "exact", "normal" or "degenerate"


def _exact_counts(n: int) -> np.ndarray:
    """Number of sign assignments giving each W+ = 0..n(n+1)/2 (integer ranks 1..n)."""
    counts = np.zeros(n * (n + 1) // 2 + 1)
    counts[0] = 1.0
    top = 0
    for r in range(1, n + 1):
        counts[r:top + r + 1] += counts[:top + 1].copy()
        top += r
    return counts


def wilcoxon_signed(a, b) -> WilcoxonResult:
    """Two-sided signed-rank test of the paired differences a - b.

    Zero differences are dropped.  With n <= 25 and no ties the null
    distribution is enumerated exactly; otherwise a normal approximation
    with tie-corrected variance is used.  All differences zero yields a
    flagged p = 1.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(1.0, 0.0, 0, "degenerate")
    absd = np.abs(d)
    order = np.argsort(absd, kind="mergesort")
    ranks = np.empty(n)
    ranks[order] = np.arange(1, n + 1, dtype=np.float64)
    # Average ranks over ties.
    uniq, inv, cnt = np.unique(absd, return_inverse=True, return_counts=True)
    ranks = (np.bincount(inv, weights=ranks) / cnt)[inv]
    w_plus = float(ranks[d > 0].sum())
    ties = bool(np.any(cnt > 1))

    if n <= 25 and not ties:
        counts = _exact_counts(n)
        total = 2.0 ** n
        w = int(round(w_plus))
        lower = counts[:w + 1].sum() / total
        upper = counts[w:].sum() / total
        return WilcoxonResult(float(min(1.0, 2.0 * min(lower, upper))), w_plus, n, "exact")

    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (cnt ** 3 - cnt).sum() / 48.0
    if var <= 0:
        return WilcoxonResult(1.0, w_plus, n, "degenerate")
    z = abs(w_plus - mean) / math.sqrt(var)
    return WilcoxonResult(float(min(1.0, erfc(z / math.sqrt(2.0)))), w_plus, n, "normal")


# ---------------------------------------------------------------------------
# Grid evaluation
# ---------------------------------------------------------------------------

@dataclass
class GridResult:
    method: str
    grid: TestGrid
    est: np.ndarray             # (3410, 2) estimates
    unc: np.ndarray | None = None

    @property
    def abs_err(self) -> np.ndarray:
        return np.abs(self.est - self.grid.params)


def evaluate_grid(grid: TestGrid, estimator: Estimator, name: str | None = None) -> GridResult:
    res: EstimateArrays = estimator.estimate_many(grid.features)
    est = res.params_array()
    return GridResult(name or estimator.name, grid, est, res.uncertainty)


def _cells(grid: TestGrid, values: np.ndarray) -> np.ndarray:
    return values.reshape(grid.alphas.size, grid.ks.size, grid.realizations, -1)


def error_maps(result: GridResult) -> dict:
    """31 x 11 per-cell mean absolute error and variance of the estimate for each parameter."""
    g = result.grid
    if result.est.shape[0] != g.alphas.size * g.ks.size * g.realizations:
        raise ValueError("incomplete grid results")
    if not np.all(np.isfinite(result.est)):
        raise ValueError("grid results contain non-finite estimates")
    err = _cells(g, result.abs_err)
    est = _cells(g, result.est)
    est = est - est[:, :, :1]       # shift per cell so identical estimates give exactly 0
    return {
        "mae_log10_alpha": err[..., 0].mean(axis=2),
        "mae_k": err[..., 1].mean(axis=2),
        "var_log10_alpha": est[..., 0].var(axis=2),
        "var_k": est[..., 1].var(axis=2),
    }


def cell_rrmse(result: GridResult, gamma: float = GAMMA) -> np.ndarray:
    """RRMSE per grid cell (fixed ground truth), shape (31, 11, 2)."""
    g = result.grid
    sq = _cells(g, (result.est - g.params) ** 2)
    truth = _cells(g, g.params)[:, :, 0, :]
    return np.sqrt(sq.mean(axis=2) / (np.abs(truth) + gamma))


def summarize(result: GridResult) -> dict:
    err = result.abs_err
    rr = cell_rrmse(result).reshape(-1, 2)
    out = {"method": result.method, "ns": result.grid.ns, "rho": result.grid.rho,
           "cases": int(err.shape[0]),
           "median_convention": "MAE medians over all cases; RRMSE medians over grid cells"}
    for j, name in enumerate(("log10_alpha", "k")):
        med, q1, q3 = median_iqr(err[:, j])
        out[f"mae_{name}"] = {"median": med, "q1": q1, "q3": q3}
        med, q1, q3 = median_iqr(rr[:, j])
        out[f"rrmse_{name}"] = {"median": med, "q1": q1, "q3": q3}
    if result.unc is not None:
        out["mean_uncertainty"] = result.unc.mean(axis=0).tolist()
    return out


@dataclass
class EvalReport:
    results: list                  # GridResult
    summaries: list = field(default_factory=list)
    pvalues: dict = field(default_factory=dict)

    @classmethod
    def build(cls, results) -> "EvalReport":
        rep = cls(list(results))
        rep.summaries = [summarize(r) for r in rep.results]
        # Pairwise tests between methods sharing (ns, rho), on the log10 alpha errors.
        for i, ri in enumerate(rep.results):
            for rj in rep.results[i + 1:]:
                if (ri.grid.ns, ri.grid.rho) != (rj.grid.ns, rj.grid.rho):
                    continue
                key = f"{ri.method}|{rj.method}|{ri.grid.ns}|{ri.grid.rho}"
                rep.pvalues[key] = {
                    p: wilcoxon_signed(ri.abs_err[:, j], rj.abs_err[:, j]).pvalue
                    for j, p in enumerate(("log10_alpha", "k"))}
        return rep

    def write(self, csv_path, json_path) -> None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "ns", "rho", "log10_alpha", "k", "realization", "mae_alpha", "mae_k"])
            for r in self.results:
                idx = r.grid.cell_index()
                err = r.abs_err
                for i in range(err.shape[0]):
                    w.writerow([r.method, r.grid.ns, repr(r.grid.rho),
                                repr(float(r.grid.params[i, 0])), repr(float(r.grid.params[i, 1])),
                                int(idx[i, 2]), repr(float(err[i, 0])), repr(float(err[i, 1]))])
        doc = {"generator": GENERATOR_VERSION, "summaries": self.summaries, "wilcoxon": self.pvalues}
        Path(json_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_matrix_csv(path, m: np.ndarray) -> None:
    np.savetxt(path, m, delimiter=",", fmt="%.17g")


# ---------------------------------------------------------------------------
# Parametric images
# ---------------------------------------------------------------------------

@dataclass
class ParametricImage:
    log10_alpha: np.ndarray      # (pr, pc) patch grid
    k: np.ndarray
    uncertainty: np.ndarray | None   # (pr, pc, 2) or None
    centers_row: np.ndarray
    centers_col: np.ndarray
    patch: tuple[int, int]
    overlap: float

    def coverage(self, shape) -> np.ndarray:
        cov = np.zeros(shape, dtype=int)
        h, w = self.patch
        for r0 in self.centers_row - h // 2:
            for c0 in self.centers_col - w // 2:
                cov[r0:r0 + h, c0:c0 + w] += 1
        return cov

    def save(self, path, **meta) -> None:
        """Float grid: little-endian f8 of shape (layers, pr, pc) plus a JSON sidecar."""
        layers = [self.log10_alpha, self.k]
        names = ["log10_alpha", "k"]
        if self.uncertainty is not None:
            layers += [self.uncertainty[..., 0], self.uncertainty[..., 1]]
            names += ["std_log10_alpha", "std_k"]
        np.stack(layers).astype("<f8").tofile(path)
        side = {"layers": names, "shape": list(self.log10_alpha.shape), "dtype": "<f8",
                "patch": list(self.patch), "overlap": self.overlap,
                "centers_row": self.centers_row.tolist(), "centers_col": self.centers_col.tolist()}
        side.update(meta)
        Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def load_float_grid(path) -> tuple[np.ndarray, dict]:
    side = json.loads(Path(str(path) + ".json").read_text())
    data = np.fromfile(path, dtype="<f8").reshape([len(side["layers"])] + side["shape"])
    return data, side


def _starts(size: int, win: int, step: int) -> np.ndarray:
    s = list(range(0, size - win + 1, step))
    if step < win and s[-1] + win < size:
        s.append(size - win)        # tail patch so the whole image is covered
    return np.array(s)


def patch_origins(shape, patch, overlap):
    h, w = patch
    if not 0.0 <= overlap <= 0.95:
        raise ValueError("overlap must lie in [0, 0.95]")
    if h < 1 or w < 1 or h > shape[0] or w > shape[1]:
        raise ValueError(f"patch {patch} does not fit image {tuple(shape)}")
    sh = max(1, int(round(h * (1.0 - overlap))))
    sw = max(1, int(round(w * (1.0 - overlap))))
    return _starts(shape[0], h, sh), _starts(shape[1], w, sw)


def parametric_image(envelope, patch, estimator: Estimator, overlap: float = 0.63,
                     stride: int = 1) -> ParametricImage:
    """Slide a patch over a 2-D envelope and estimate (alpha, k) per patch.

    ``stride`` decimates the patch axially (rows) before computing features.
    """
    env = np.asarray(envelope, dtype=np.float64)
    if env.ndim != 2:
        raise ValueError("envelope must be a 2-D matrix")
    if not np.all(np.isfinite(env)) or np.any(env <= 0):
        raise ValueError("envelope entries must be finite and strictly positive")
    rows, cols = patch_origins(env.shape, patch, overlap)
    h, w = patch
    blocks = np.stack([env[r:r + h:stride, c:c + w].ravel() for r in rows for c in cols])
    res = estimator.estimate_many(feature_matrix(blocks))
    shape = (rows.size, cols.size)
    unc = None if res.uncertainty is None else res.uncertainty.reshape(shape + (2,))
    return ParametricImage(res.log10_alpha.reshape(shape), res.k.reshape(shape), unc,
                           rows + h // 2, cols + w // 2, (h, w), overlap)


def synthetic_phantom(shape, region_params, rho: float, seed: int, split: float = 0.5):
    """Two-region envelope field: columns left of ``split`` use region_params[0].

    Each image column is an independent correlated sequence, so the lag-one
    correlation runs along the axial (row) direction.  Returns (envelope,
    label map).
    """
    rows, cols = shape
    rng = make_rng(seed)
    cut = int(round(cols * split))
    env = np.empty(shape)
    labels = np.zeros(shape, dtype=int)
    labels[:, cut:] = 1
    for lab, (la, k) in enumerate(region_params):
        c0, c1 = (0, cut) if lab == 0 else (cut, cols)
        if c1 <= c0:
            continue
        block = sample_batch(np.full(c1 - c0, la), np.full(c1 - c0, k), rows, rho, rng)
        env[:, c0:c1] = block.T
    return env, labels
