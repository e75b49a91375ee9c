"""Analytic forward model: theoretical features of the HK distribution.

Fractional moments come from the compound representation

    E[A^v] = int_0^inf (2 s^2/alpha)^(v/2) Gamma(1 + v/2) x^(v/2 + alpha - 1) e^(-x) / Gamma(alpha)
             * 1F1(-v/2; 1; -alpha eps^2 / (2 s^2 x)) dx,

summed on a fixed logarithmic grid in x.  X and U need E[log I] and
E[I log I], the t-derivatives of E[I^t] at t = 0 and t = 1, which are
taken by finite differences of the same moment function.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from .features import FEATURE_NAMES, N_FEATURES, V_EXPONENTS, FeatureVector, moments_to_rsk
from .hkmodel import LOG10_ALPHA_RANGE, K_RANGE, HKParams, NativeHKParams

# ---------------------------------------------------------------------------
# 1F1(-v/2; 1; z), z <= 0
# ---------------------------------------------------------------------------

SERIES_LIMIT = 35.0
_ASYM_TERMS = 31


def _series_terms(ymax: float) -> int:
    return int(ymax + 10.0 * math.sqrt(ymax) + 30)


def _series_coeffs(v: np.ndarray, nterms: int) -> np.ndarray:
    # (1 + v/2)_n / n!, shape (len(v), nterms)
    a = 1.0 + 0.5 * v[:, None]
    n = np.arange(1, nterms)[None, :]
    ratios = (a + n - 1.0) / n
    return np.concatenate([np.ones((v.size, 1)), np.cumprod(ratios, axis=1)], axis=1)


def _asym_coeffs(v: np.ndarray) -> np.ndarray:
    # ((-v/2)_s)^2 / s!, shape (len(v), _ASYM_TERMS)
    a = -0.5 * v[:, None]
    s = np.arange(1, _ASYM_TERMS)[None, :]
    ratios = (a + s - 1.0) ** 2 / s
    return np.concatenate([np.ones((v.size, 1)), np.cumprod(ratios, axis=1)], axis=1)


def hyp1f1_matrix(v, y) -> np.ndarray:
    """1F1(-v/2; 1; -y) for every (v, y) pair; v of shape (m,), y >= 0 any shape.

    Returns an array of shape (m,) + y.shape.  For y <= 35 the Kummer
    transform e^(-y) 1F1(1 + v/2; 1; y) is summed (all terms positive);
    beyond, the large-argument expansion

        y^(v/2) / Gamma(1 + v/2) * sum_s ((-v/2)_s)^2 / s! * y^(-s)

    is used, whose dropped exponentially small part is below e^(-35).
    """
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0) or np.any(~np.isfinite(y)):
        raise ValueError("argument must be finite and z <= 0")
    flat = y.ravel()
    out = np.empty((v.size, flat.size))

    low = flat <= SERIES_LIMIT
    if np.any(low):
        yl = flat[low]
        nterms = _series_terms(float(yl.max()))
        # T_n = y^n / n! by recurrence, rows = n
        t = np.empty((nterms, yl.size))
        t[0] = 1.0
        for n in range(1, nterms):
            t[n] = t[n - 1] * yl / n
        out[:, low] = (_series_coeffs(v, nterms) @ t) * np.exp(-yl)[None, :]

    high = ~low
    if np.any(high):
        yh = flat[high]
        inv = 1.0 / yh
        p = np.empty((_ASYM_TERMS, yh.size))
        p[0] = 1.0
        for s in range(1, _ASYM_TERMS):
            p[s] = p[s - 1] * inv
        pref = np.exp(0.5 * v[:, None] * np.log(yh)[None, :] - special.gammaln(1.0 + 0.5 * v)[:, None])
        out[:, high] = pref * (_asym_coeffs(v) @ p)

    return out.reshape((v.size,) + y.shape)


def hyp1f1_half(v: float, z):
    """Confluent hypergeometric 1F1(-v/2; 1; z) for z <= 0."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(z > 0):
        raise ValueError("hyp1f1_half is defined here for z <= 0 only")
    out = hyp1f1_matrix(np.array([v], dtype=np.float64), -z)[0]
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Moments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadConfig:
    """Settings of the log-grid moment quadrature and the X/U differences."""

    n_nodes: int = 4000
    x_min: float = 1e-8
    # The grid extends below x_min until x^alpha < tail_eps (matters for small alpha).
    tail_eps: float = 1e-17
    upper_sd: float = 60.0
    fd_step: float = 1e-3

    def grid(self, alpha: float):
        lo = min(math.log(self.x_min), math.log(self.tail_eps) / alpha)
        hi = math.log(alpha + self.upper_sd * math.sqrt(alpha) + self.upper_sd)
        s = np.linspace(lo, hi, self.n_nodes)
        w = np.full(self.n_nodes, (hi - lo) / (self.n_nodes - 1))
        w[0] *= 0.5
        w[-1] *= 0.5
        return s, w


DEFAULT_QUAD = QuadConfig()


def _moments_block(v: np.ndarray, alpha: float, eps: np.ndarray, sigma: float,
                   cfg: QuadConfig) -> np.ndarray:
    """E[A^v] for all v (m,) and epsilons (n,) at one alpha; returns (n, m)."""
    s, w = cfg.grid(alpha)
    x = np.exp(s)
    # log of the Gamma(alpha)-weighted measure in s = log x (x dx -> ds)
    log_meas = (alpha * s - x - special.gammaln(alpha) + np.log(w))[None, :]
    vh = 0.5 * v[:, None]
    log_pref = vh * math.log(2.0 * sigma * sigma / alpha) + special.gammaln(1.0 + vh)
    log_base = log_pref + vh * s[None, :] + log_meas           # (m, nodes)

    y = (alpha * eps[:, None] ** 2 / (2.0 * sigma * sigma)) / x[None, :]   # (n, nodes)
    f = hyp1f1_matrix(v, y)                                    # (m, n, nodes)
    return np.einsum("mnj,mj->nm", f, np.exp(log_base))


def theoretical_moment(v, p: NativeHKParams, cfg: QuadConfig = DEFAULT_QUAD):
    """E[A^v] of the HK envelope; v scalar or array, v > -2."""
    va = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if np.any(va <= -2.0) or np.any(va > 8.0):
        raise ValueError("moment order must lie in (-2, 8]")
    out = _moments_block(va, p.alpha, np.array([p.epsilon]), p.sigma, cfg)[0]
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"moment quadrature produced non-finite values for {p}")
    return float(out[0]) if np.ndim(v) == 0 else out


def _feature_orders(h: float) -> np.ndarray:
    rsk = [m * v for v in V_EXPONENTS for m in (1, 2, 3, 4)]
    # E[I^t] = E[A^(2t)] around t = 0 and t = 1
    d = [-4 * h, -2 * h, 2 * h, 4 * h]
    return np.array(rsk + [2.0] + d + [2.0 + x for x in d])


def _features_from_moments(mom: np.ndarray, h: float) -> np.ndarray:
    """mom: (..., 17) moments ordered as _feature_orders(h)."""
    out = np.empty(mom.shape[:-1] + (N_FEATURES,))
    for j in range(2):
        m1, m2, m3, m4 = (mom[..., 4 * j + i] for i in range(4))
        r, s, k = moments_to_rsk(m1, m2, m3, m4)
        out[..., j], out[..., 2 + j], out[..., 4 + j] = r, s, k
    e_i = mom[..., 8]
    f0 = mom[..., 9:13]
    f1 = mom[..., 13:17]

    def deriv(f):
        # 5-point stencil in t with step h (orders were 2t = +-2h, +-4h)
        return (f[..., 0] - 8.0 * f[..., 1] + 8.0 * f[..., 2] - f[..., 3]) / (12.0 * h)

    e_log = deriv(f0)
    e_ilog = deriv(f1)
    out[..., 7] = e_log - np.log(e_i)
    out[..., 6] = e_ilog / e_i - e_log
    return out


def theoretical_feature_matrix(log10_alpha, k, cfg: QuadConfig = DEFAULT_QUAD,
                               sigma: float = 1.0) -> np.ndarray:
    """Theoretical features for arrays of (log10 alpha, k); returns (n, 8).

    Points sharing an alpha value are evaluated together.
    """
    la = np.atleast_1d(np.asarray(log10_alpha, dtype=np.float64))
    kk = np.atleast_1d(np.asarray(k, dtype=np.float64))
    la, kk = np.broadcast_arrays(la, kk)
    if np.any(kk < 0):
        raise ValueError("k must be non-negative")
    h = cfg.fd_step
    orders = _feature_orders(h)
    out = np.empty(la.shape + (N_FEATURES,))
    flat_la, flat_k, flat_out = la.ravel(), kk.ravel(), out.reshape(-1, N_FEATURES)
    for a_val in np.unique(flat_la):
        idx = np.flatnonzero(flat_la == a_val)
        eps = sigma * np.sqrt(2.0 * flat_k[idx])
        mom = _moments_block(orders, 10.0 ** a_val, eps, sigma, cfg)
        flat_out[idx] = _features_from_moments(mom, h)
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(out.reshape(-1, N_FEATURES)).all(axis=1))[:, 0]
        raise FloatingPointError(
            f"non-finite theoretical features at {[(flat_la[i], flat_k[i]) for i in bad[:5]]}")
    return out


def theoretical_features(p: HKParams, cfg: QuadConfig = DEFAULT_QUAD, sigma: float = 1.0) -> FeatureVector:
    """Theoretical feature vector of one parameter pair.

    ``sigma`` sets the internal diffuse scale (epsilon follows as
    sigma * sqrt(2k)); every feature is scale-free, so it only serves as a
    consistency check.
    """
    return FeatureVector.from_array(
        theoretical_feature_matrix(p.log10_alpha, p.k, cfg, sigma)[0])


# ---------------------------------------------------------------------------
# Lookup table
# ---------------------------------------------------------------------------

LUT_MAGIC = b"HKLUT001"
LUT_VERSION = 1


@dataclass
class FeatureLUT:
    grid_log10_alpha: np.ndarray
    grid_k: np.ndarray
    table: np.ndarray          # (n_alpha, n_k, 8)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid_log10_alpha = np.asarray(self.grid_log10_alpha, dtype=np.float64)
        self.grid_k = np.asarray(self.grid_k, dtype=np.float64)
        self.table = np.asarray(self.table, dtype=np.float64)
        na, nk = self.grid_log10_alpha.size, self.grid_k.size
        if self.table.shape != (na, nk, N_FEATURES):
            raise ValueError(f"table shape {self.table.shape} != {(na, nk, N_FEATURES)}")
        if np.any(np.diff(self.grid_log10_alpha) <= 0) or np.any(np.diff(self.grid_k) <= 0):
            raise ValueError("LUT axes must be strictly ascending")
        self.table.setflags(write=False)

    @property
    def shape(self):
        return self.table.shape[:2]

    def contains(self, log10_alpha, k, tol: float = 1e-9) -> np.ndarray:
        la, kk = np.asarray(log10_alpha), np.asarray(k)
        ga, gk = self.grid_log10_alpha, self.grid_k
        return ((la >= ga[0] - tol) & (la <= ga[-1] + tol)
                & (kk >= gk[0] - tol) & (kk <= gk[-1] + tol))

    def lookup(self, log10_alpha, k, clip: bool = False) -> np.ndarray:
        """Bilinear interpolation for arrays of parameters; returns (..., 8)."""
        la = np.asarray(log10_alpha, dtype=np.float64)
        kk = np.asarray(k, dtype=np.float64)
        la, kk = np.broadcast_arrays(la, kk)
        ga, gk = self.grid_log10_alpha, self.grid_k
        if clip:
            la = np.clip(la, ga[0], ga[-1])
            kk = np.clip(kk, gk[0], gk[-1])
        elif not np.all(self.contains(la, kk)):
            raise ValueError("query outside the LUT hull")
        i = np.clip(np.searchsorted(ga, la, side="right") - 1, 0, ga.size - 2)
        j = np.clip(np.searchsorted(gk, kk, side="right") - 1, 0, gk.size - 2)
        ta = np.clip((la - ga[i]) / (ga[i + 1] - ga[i]), 0.0, 1.0)[..., None]
        tk = np.clip((kk - gk[j]) / (gk[j + 1] - gk[j]), 0.0, 1.0)[..., None]
        t = self.table
        out = ((1 - ta) * (1 - tk) * t[i, j] + ta * (1 - tk) * t[i + 1, j]
               + (1 - ta) * tk * t[i, j + 1] + ta * tk * t[i + 1, j + 1])
        # Exact node values (avoid 0 * x rounding noise at grid points).
        node = (ta[..., 0] == 0) & (tk[..., 0] == 0)
        if np.any(node):
            out[node] = t[i[node], j[node]]
        return out

    def save(self, path) -> None:
        """Binary blob: magic, version, dims, axes, row-major float64 table; JSON meta sidecar."""
        path = Path(path)
        na, nk = self.shape
        with open(path, "wb") as fh:
            fh.write(LUT_MAGIC)
            fh.write(np.array([LUT_VERSION, na, nk, N_FEATURES], dtype="<u4").tobytes())
            fh.write(self.grid_log10_alpha.astype("<f8").tobytes())
            fh.write(self.grid_k.astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(self.table).astype("<f8").tobytes())
        Path(str(path) + ".json").write_text(json.dumps(self.meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "FeatureLUT":
        path = Path(path)
        raw = path.read_bytes()
        if raw[:8] != LUT_MAGIC:
            raise ValueError(f"{path}: not an HK feature LUT")
        version, na, nk, nf = np.frombuffer(raw[8:24], dtype="<u4")
        if version != LUT_VERSION or nf != N_FEATURES:
            raise ValueError(f"{path}: unsupported LUT version {version} / width {nf}")
        body = np.frombuffer(raw[24:], dtype="<f8")
        expect = na + nk + na * nk * nf
        if body.size != expect:
            raise ValueError(f"{path}: truncated LUT ({body.size} of {expect} values)")
        ga, gk = body[:na], body[na:na + nk]
        table = body[na + nk:].reshape(na, nk, nf)
        side = Path(str(path) + ".json")
        meta = json.loads(side.read_text()) if side.exists() else {}
        return cls(ga.copy(), gk.copy(), table.copy(), meta)


DEFAULT_RES_ALPHA = 161
DEFAULT_RES_K = 126


def build_lut(res_alpha: int = DEFAULT_RES_ALPHA, res_k: int = DEFAULT_RES_K,
              cfg: QuadConfig = DEFAULT_QUAD, log10_alpha_range=LOG10_ALPHA_RANGE,
              k_range=K_RANGE, progress=None) -> FeatureLUT:
    """Dense theoretical-feature table over the (log10 alpha, k) box."""
    if res_alpha < 2 or res_k < 2:
        raise ValueError("LUT resolution must be at least 2 on each axis")
    ga = np.linspace(*log10_alpha_range, res_alpha)
    gk = np.linspace(*k_range, res_k)
    table = np.empty((res_alpha, res_k, N_FEATURES))
    for i, a_val in enumerate(ga):
        try:
            table[i] = theoretical_feature_matrix(np.full(res_k, a_val), gk, cfg)
        except FloatingPointError as exc:
            raise FloatingPointError(f"LUT build failed at log10_alpha={a_val:.4f}: {exc}") from exc
        if progress is not None:
            progress(i + 1, res_alpha)
    if np.any(table[..., 7] > 0):
        i, j = np.argwhere(table[..., 7] > 0)[0]
        raise FloatingPointError(f"positive U at log10_alpha={ga[i]:.4f}, k={gk[j]:.4f}")

    meta = {
        "version": LUT_VERSION,
        "features": list(FEATURE_NAMES),
        "quadrature": asdict(cfg),
        "log10_alpha_range": list(log10_alpha_range),
        "k_range": list(k_range),
        "build_hash": hashlib.sha256(np.ascontiguousarray(table).tobytes()).hexdigest()[:16],
        "diagnostics": lut_diagnostics(ga, gk, table),
    }
    lut = FeatureLUT(ga, gk, table, meta)
    meta["diagnostics"].update(xu_root_diagnostics(lut))
    return lut


def xu_root_diagnostics(lut: "FeatureLUT", stride: int = 2) -> dict:
    """Count XU level-curve intersections for the table's own node features."""
    from .estimators import XUEstimator
    F = lut.table[::stride, ::stride].reshape(-1, N_FEATURES)
    mult = XUEstimator(lut).estimate_many(F).extra["multiplicity"]
    return {"xu_nodes_checked": int(mult.size),
            "xu_unique_root_fraction": float(np.mean(mult == 1)),
            "xu_max_root_count": int(mult.max())}


def lut_diagnostics(ga, gk, table) -> dict:
    """Empirical monotonicity facts of the table, recorded rather than asserted."""
    du_k = np.diff(table[..., 7], axis=1)
    dx_k = np.diff(table[..., 6], axis=1)
    du_a = np.diff(table[..., 7], axis=0)
    dx_a = np.diff(table[..., 6], axis=0)
    return {
        "u_monotone_in_k_all_alpha": bool(np.all(du_k > 0) or np.all(du_k < 0)),
        "u_increasing_in_k_fraction": float(np.mean(du_k > 0)),
        "x_decreasing_in_k_fraction": float(np.mean(dx_k < 0)),
        "u_increasing_in_alpha_fraction": float(np.mean(du_a > 0)),
        "x_decreasing_in_alpha_fraction": float(np.mean(dx_a < 0)),
        "u_range": [float(table[..., 7].min()), float(table[..., 7].max())],
        "x_range": [float(table[..., 6].min()), float(table[..., 6].max())],
    }


def lut_lookup(lut: FeatureLUT, p: HKParams) -> FeatureVector:
    if not lut.contains(p.log10_alpha, p.k):
        raise ValueError(f"({p.log10_alpha}, {p.k}) lies outside the LUT hull")
    return FeatureVector.from_array(lut.lookup(p.log10_alpha, p.k))
