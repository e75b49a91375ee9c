"""Classical inverse solvers: feature vector -> (log10 alpha, k).

Every estimator exposes ``estimate_many(F)`` on an (n, 8) feature array and
returns an :class:`EstimateArrays`; ``estimate(f)`` wraps the single-vector
case into an :class:`Estimate`.  Neural estimators follow the same shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import FeatureNorm, FeatureVector, N_FEATURES
from .forward import FeatureLUT
from .hkmodel import LOG10_ALPHA_RANGE, K_RANGE, HKParams, make_rng

IX, IU = 6, 7


@dataclass(frozen=True)
class Estimate:
    params: HKParams
    uncertainty: tuple[float, float] | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return bool(self.diagnostics.get("converged", True))


@dataclass
class EstimateArrays:
    """Column-wise results of a batch of estimates."""

    log10_alpha: np.ndarray
    k: np.ndarray
    uncertainty: np.ndarray | None = None      # (n, 2) std of (log10 alpha, k)
    converged: np.ndarray | None = None
    residual: np.ndarray | None = None
    iterations: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.log10_alpha.size

    def item(self, i: int) -> Estimate:
        diag = {}
        if self.converged is not None:
            diag["converged"] = bool(self.converged[i])
        if self.residual is not None:
            diag["residual"] = float(self.residual[i])
        if self.iterations is not None:
            diag["iterations"] = int(self.iterations[i])
        for key, val in self.extra.items():
            diag[key] = val[i].item() if hasattr(val[i], "item") else val[i]
        unc = None
        if self.uncertainty is not None:
            unc = (float(self.uncertainty[i, 0]), float(self.uncertainty[i, 1]))
        return Estimate(HKParams(float(self.log10_alpha[i]), float(self.k[i])), unc, diag)

    def params_array(self) -> np.ndarray:
        return np.column_stack([self.log10_alpha, self.k])


def clamp_to_box(log10_alpha, k):
    return (np.clip(log10_alpha, *LOG10_ALPHA_RANGE), np.clip(k, *K_RANGE))


def _as_matrix(F) -> np.ndarray:
    if isinstance(F, FeatureVector):
        return F.to_array()[None, :]
    arr = np.asarray(F, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != N_FEATURES:
        raise ValueError(f"expected feature rows of width {N_FEATURES}, got shape {arr.shape}")
    return arr


class Estimator:
    """Common entry points; subclasses implement ``estimate_many``."""

    name = "base"
    bayesian = False

    def estimate_many(self, F) -> EstimateArrays:  # pragma: no cover - interface
        raise NotImplementedError

    def estimate(self, f) -> Estimate:
        arr = _as_matrix(f)
        if arr.shape[0] != 1:
            raise ValueError("estimate() takes a single feature vector")
        return self.estimate_many(arr).item(0)


# ---------------------------------------------------------------------------
# XU: nested bisection on the X and U level sets
# ---------------------------------------------------------------------------

class XUEstimator(Estimator):
    """Match the log-moments X and U against the LUT.

    At fixed alpha the LUT column of U is strictly increasing in k, so the
    U-match k*(alpha) is found exactly on the (bilinearly interpolated)
    column, clamped to the k range.  Along that curve the X mismatch
    g(alpha) = X(alpha, k*(alpha)) - X_obs is bisected in log10 alpha.
    The bracket is located by scanning g at every LUT alpha node; when
    several sign changes exist the lowest-alpha one is used and the count
    is reported as ``multiplicity``.
    """

    name = "xu"

    def __init__(self, lut: FeatureLUT, tol: float = 1e-7, max_iter: int = 60):
        self.lut = lut
        self.tol = tol
        self.max_iter = max_iter

    def _column(self, la: np.ndarray, col: int) -> np.ndarray:
        """Feature ``col`` along k at (interpolated) log10 alpha; shape (n, n_k)."""
        ga = self.lut.grid_log10_alpha
        t = self.lut.table[..., col]
        i = np.clip(np.searchsorted(ga, la, side="right") - 1, 0, ga.size - 2)
        w = np.clip((la - ga[i]) / (ga[i + 1] - ga[i]), 0.0, 1.0)[:, None]
        return (1.0 - w) * t[i] + w * t[i + 1]

    def _k_of_u(self, la: np.ndarray, u_obs: np.ndarray) -> np.ndarray:
        gk = self.lut.grid_k
        ucol = self._column(la, IU)
        # U increases with k: count nodes below the target.
        j = np.clip((ucol < u_obs[:, None]).sum(axis=1) - 1, 0, gk.size - 2)
        rows = np.arange(la.size)
        u0, u1 = ucol[rows, j], ucol[rows, j + 1]
        t = np.clip((u_obs - u0) / (u1 - u0), 0.0, 1.0)
        return gk[j] + t * (gk[j + 1] - gk[j])

    def _x_mismatch(self, la, u_obs, x_obs):
        k = self._k_of_u(la, u_obs)
        x = self.lut.lookup(la, k, clip=True)[:, IX]
        return x - x_obs, k

    def estimate_many(self, F) -> EstimateArrays:
        F = _as_matrix(F)
        n = F.shape[0]
        x_obs, u_obs = F[:, IX], F[:, IU]
        ga = self.lut.grid_log10_alpha
        finite = np.isfinite(x_obs) & np.isfinite(u_obs)
        x_obs = np.where(finite, x_obs, 1.0)
        u_obs = np.where(finite, u_obs, -0.6)

        # Scan the mismatch on every alpha node.
        g_nodes = np.empty((n, ga.size))
        for i, a_val in enumerate(ga):
            g_nodes[:, i] = self._x_mismatch(np.full(n, a_val), u_obs, x_obs)[0]
        sign = np.sign(g_nodes)
        # An interval holds a root if g changes sign or vanishes at its left node.
        change = (sign[:, :-1] * sign[:, 1:] < 0) | (sign[:, :-1] == 0)
        change[:, -1] |= sign[:, -1] == 0
        multiplicity = change.sum(axis=1)
        has_root = multiplicity > 0
        first = np.where(has_root, np.argmax(change, axis=1), 0)

        lo = ga[first].copy()
        hi = ga[np.minimum(first + 1, ga.size - 1)].copy()
        g_lo = g_nodes[np.arange(n), first]
        iters = np.zeros(n, dtype=int)
        for it in range(self.max_iter):
            active = has_root & (hi - lo > self.tol)
            if not np.any(active):
                break
            mid = 0.5 * (lo + hi)
            g_mid, _ = self._x_mismatch(mid, u_obs, x_obs)
            left = (np.sign(g_mid) == np.sign(g_lo)) & (g_mid != 0)
            lo = np.where(active & left, mid, lo)
            g_lo = np.where(active & left, g_mid, g_lo)
            hi = np.where(active & ~left, mid, hi)
            iters += active
        la = 0.5 * (lo + hi)

        # No sign change: take the alpha node with the smallest |g|.
        best = np.argmin(np.abs(g_nodes), axis=1)
        la = np.where(has_root, la, ga[best])
        g_fin, k = self._x_mismatch(la, u_obs, x_obs)
        la, k = clamp_to_box(la, k)
        converged = has_root & finite
        la = np.where(finite, la, np.nan)
        k = np.where(finite, k, np.nan)
        return EstimateArrays(la, k, None, converged, np.abs(g_fin), iters,
                              extra={"multiplicity": multiplicity})


def estimate_xu(f, lut: FeatureLUT) -> Estimate:
    return XUEstimator(lut).estimate(f)


# ---------------------------------------------------------------------------
# OP: particle swarm on the z-scored feature distance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PSOConfig:
    particles: int = 40
    iterations: int = 200
    inertia: float = 0.7298
    cognitive: float = 1.4962
    social: float = 1.4962
    vmax_frac: float = 0.5
    residual_tol: float = 1e-3


def lut_norm(lut: FeatureLUT) -> FeatureNorm:
    """z-scoring statistics of the theoretical features over the whole box."""
    flat = lut.table.reshape(-1, N_FEATURES)
    return FeatureNorm(flat.mean(axis=0), flat.std(axis=0))


class OPEstimator(Estimator):
    """Minimize ||z(f) - z(F(alpha, k))||_2 over the box with a particle swarm.

    ``forward`` maps arrays (log10_alpha, k) of equal shape to (..., 8)
    features; by default the LUT's bilinear interpolant.  All items of a
    batch share one random stream, so a batch result equals the
    per-item results and only depends on ``seed``.
    """

    name = "op"

    def __init__(self, lut: FeatureLUT | None = None, cfg: PSOConfig = PSOConfig(),
                 seed: int = 0, forward=None, norm: FeatureNorm | None = None):
        if forward is None:
            if lut is None:
                raise ValueError("need a LUT or a forward evaluator")
            forward = lambda la, k: lut.lookup(la, k, clip=True)  # noqa: E731
        if norm is None:
            if lut is None:
                raise ValueError("need a LUT or an explicit FeatureNorm")
            norm = lut_norm(lut)
        self.forward = forward
        self.norm = norm
        self.cfg = cfg
        self.seed = seed

    def estimate_many(self, F, chunk: int = 512) -> EstimateArrays:
        F = _as_matrix(F)
        parts = [self._swarm(F[i:i + chunk]) for i in range(0, F.shape[0], chunk)]
        if not parts:
            e = np.empty(0)
            return EstimateArrays(e, e, None, np.empty(0, bool), e, np.empty(0, int))
        cat = lambda idx: np.concatenate([p[idx] for p in parts])  # noqa: E731
        la, k, res = cat(0), cat(1), cat(2)
        iters = np.full(la.size, self.cfg.iterations)
        return EstimateArrays(la, k, None, res <= self.cfg.residual_tol, res, iters)

    def _swarm(self, F):
        cfg = self.cfg
        rng = make_rng(self.seed)
        lo = np.array([LOG10_ALPHA_RANGE[0], K_RANGE[0]])
        hi = np.array([LOG10_ALPHA_RANGE[1], K_RANGE[1]])
        span = hi - lo
        vmax = cfg.vmax_frac * span
        m, P = F.shape[0], cfg.particles

        target = self.norm.apply(F)[:, None, :]
        target = np.where(np.isfinite(target), target, 0.0)

        def cost(pos):
            feats = self.forward(pos[..., 0], pos[..., 1])
            d = self.norm.apply(feats) - target
            return np.sqrt((d * d).sum(axis=-1))

        pos = lo + span * rng.random((P, 2))
        vel = (rng.random((P, 2)) - 0.5) * span
        pos = np.broadcast_to(pos, (m, P, 2)).copy()
        vel = np.broadcast_to(vel, (m, P, 2)).copy()
        pbest, pcost = pos.copy(), cost(pos)
        g = np.argmin(pcost, axis=1)
        gbest = pbest[np.arange(m), g]
        gcost = pcost[np.arange(m), g]

        for _ in range(cfg.iterations):
            r1 = rng.random((P, 2))
            r2 = rng.random((P, 2))
            vel = (cfg.inertia * vel + cfg.cognitive * r1 * (pbest - pos)
                   + cfg.social * r2 * (gbest[:, None, :] - pos))
            vel = np.clip(vel, -vmax, vmax)
            pos = pos + vel
            # Reflect at the walls.
            below, above = pos < lo, pos > hi
            pos = np.where(below, 2 * lo - pos, pos)
            pos = np.where(above, 2 * hi - pos, pos)
            vel = np.where(below | above, -vel, vel)
            pos = np.clip(pos, lo, hi)

            c = cost(pos)
            better = c < pcost
            pbest = np.where(better[..., None], pos, pbest)
            pcost = np.where(better, c, pcost)
            g = np.argmin(pcost, axis=1)
            gbest = pbest[np.arange(m), g]
            gcost = pcost[np.arange(m), g]
        return gbest[:, 0], gbest[:, 1], gcost


def estimate_op(f, lut: FeatureLUT | None = None, cfg: PSOConfig = PSOConfig(), seed: int = 0,
                forward=None, norm: FeatureNorm | None = None) -> Estimate:
    return OPEstimator(lut, cfg, seed, forward, norm).estimate(f)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class BatchResult:
    estimates: list            # Estimate or None per input, in input order
    errors: dict               # index -> message

    def __len__(self) -> int:
        return len(self.estimates)


def estimate_batch(fs, estimator: Estimator, chunk: int = 1024) -> BatchResult:
    """Order-preserving map; a failing chunk is retried item by item so one bad
    vector never aborts the batch."""
    rows = [f.to_array() if isinstance(f, FeatureVector) else np.asarray(f, float) for f in fs]
    out: list = [None] * len(rows)
    errors: dict = {}
    for start in range(0, len(rows), chunk):
        block = rows[start:start + chunk]
        try:
            res = estimator.estimate_many(np.vstack(block))
            for i in range(len(block)):
                out[start + i] = res.item(i)
        except Exception:  # noqa: BLE001 - isolate the offending items
            for i, row in enumerate(block):
                try:
                    out[start + i] = estimator.estimate(row)
                except Exception as exc:  # noqa: BLE001
                    errors[start + i] = f"{type(exc).__name__}: {exc}"
    return BatchResult(out, errors)


def estimate_parallel(estimator: Estimator, F, threads: int = 1, chunk: int = 512) -> EstimateArrays:
    """Chunked ``estimate_many`` over a thread pool.

    Every built-in estimator gives per-row results that do not depend on
    how rows are grouped, so the output is identical for any ``threads``.
    """
    F = _as_matrix(F)
    if threads <= 1 or F.shape[0] <= chunk:
        return estimator.estimate_many(F)
    from concurrent.futures import ThreadPoolExecutor
    blocks = [F[i:i + chunk] for i in range(0, F.shape[0], chunk)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(estimator.estimate_many, blocks))
    return concat_estimates(parts)


def concat_estimates(parts) -> EstimateArrays:
    def cat(name):
        vals = [getattr(p, name) for p in parts]
        return None if any(v is None for v in vals) else np.concatenate(vals)
    extra = {}
    for key in parts[0].extra:
        extra[key] = np.concatenate([p.extra[key] for p in parts])
    return EstimateArrays(cat("log10_alpha"), cat("k"), cat("uncertainty"), cat("converged"),
                          cat("residual"), cat("iterations"), extra)
