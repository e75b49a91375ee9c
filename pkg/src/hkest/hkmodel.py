"""Homodyned-K parameterization, density and envelope sample generation.

Parameters travel as ``HKParams`` (log10 alpha, k).  Internally the
generator and the analytic moments use the native triple (epsilon, sigma,
alpha) with sigma fixed to 1 and epsilon = sqrt(2 k), which is exactly the
parameterization of the sampling equation

    a_i = sqrt((sqrt(2k) + X sigma sqrt(Z/alpha))**2 + (Y sigma sqrt(Z/alpha))**2)

with X, Y ~ N(0, 1) and Z ~ Gamma(alpha, 1).
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, special
from scipy.signal import lfilter

LOG10_ALPHA_RANGE = (-0.3, 1.3)
K_RANGE = (0.0, 1.25)

GENERATOR_NAME = "philox"
GENERATOR_VERSION = "hkest-philox-1"


class ConvergenceError(RuntimeError):
    """Raised when a numerical integral fails to reach its tolerance."""

    def __init__(self, message: str, error_estimate: float = float("nan")):
        super().__init__(f"{message} (error estimate {error_estimate:.3g})")
        self.error_estimate = error_estimate


@dataclass(frozen=True)
class HKParams:
    log10_alpha: float
    k: float

    def __post_init__(self):
        if not (math.isfinite(self.log10_alpha) and math.isfinite(self.k)):
            raise ValueError("HK parameters must be finite")
        if self.k < 0:
            raise ValueError(f"k must be non-negative, got {self.k}")

    @property
    def alpha(self) -> float:
        return 10.0 ** self.log10_alpha

    def in_box(self, tol: float = 1e-12) -> bool:
        lo_a, hi_a = LOG10_ALPHA_RANGE
        lo_k, hi_k = K_RANGE
        return (lo_a - tol <= self.log10_alpha <= hi_a + tol
                and lo_k - tol <= self.k <= hi_k + tol)

    def native(self, sigma: float = 1.0) -> "NativeHKParams":
        """Native triple; epsilon scales with sigma so the envelope law is only rescaled."""
        return NativeHKParams(epsilon=sigma * math.sqrt(2.0 * self.k), sigma=sigma,
                              alpha=self.alpha)


@dataclass(frozen=True)
class NativeHKParams:
    epsilon: float
    sigma: float
    alpha: float

    def __post_init__(self):
        if not self.epsilon >= 0 or not math.isfinite(self.epsilon):
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if not self.sigma > 0 or not math.isfinite(self.sigma):
            raise ValueError(f"sigma must be finite and > 0, got {self.sigma}")
        if not self.alpha > 0 or not math.isfinite(self.alpha):
            raise ValueError(f"alpha must be finite and > 0, got {self.alpha}")

    def to_hk(self) -> HKParams:
        k = 0.5 * (self.epsilon / self.sigma) ** 2
        return HKParams(math.log10(self.alpha), k)


@dataclass
class EnvelopeSamples:
    values: np.ndarray
    rho: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("envelope samples must be one-dimensional")
        if not np.all(np.isfinite(self.values)) or np.any(self.values <= 0):
            raise ValueError("envelope samples must be finite and strictly positive")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")

    def __len__(self) -> int:
        return self.values.size

    def scaled(self, c: float) -> "EnvelopeSamples":
        return EnvelopeSamples(self.values * c, self.rho, dict(self.meta))


def make_rng(seed) -> np.random.Generator:
    """Counter-based Philox stream; the only generator used by the package."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


# ---------------------------------------------------------------------------
# Bessel J0
# ---------------------------------------------------------------------------

_J0_SMALL = 25.0
_J0_NODES = 64


def _hankel_coeffs(nterms: int = 40) -> np.ndarray:
    # a_k for nu = 0: prod_{j<=k} (-(2j-1)^2) / (k! 8^k)
    a = np.empty(nterms)
    a[0] = 1.0
    for k in range(1, nterms):
        a[k] = a[k - 1] * (-(2 * k - 1) ** 2) / (8.0 * k)
    return a


_HANKEL = _hankel_coeffs()


def bessel_j0(x):
    """Bessel function of the first kind of order zero.

    For |x| <= 25 the periodic integral (1/pi) int_0^pi cos(x sin t) dt is
    summed with the trapezoid rule, which converges geometrically for
    periodic analytic integrands.  Beyond that the Hankel asymptotic series
    is accurate to roughly exp(-2|x|).
    """
    x = np.abs(np.asarray(x, dtype=np.float64))
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)

    small = x <= _J0_SMALL
    if np.any(small):
        xs = x[small]
        theta = (np.arange(_J0_NODES) + 0.5) * (np.pi / _J0_NODES)
        out[small] = np.cos(np.multiply.outer(xs, np.sin(theta))).mean(axis=-1)

    big = ~small
    if np.any(big):
        xb = x[big]
        inv = 1.0 / xb
        # Horner in 1/x^2; 40 terms stay below index 2|x| where the series turns.
        even = _HANKEL[0::2] * (-1.0) ** np.arange(len(_HANKEL[0::2]))
        odd = _HANKEL[1::2] * (-1.0) ** np.arange(len(_HANKEL[1::2]))
        inv2 = inv * inv
        p = np.zeros_like(xb)
        for c in even[:20][::-1]:
            p = p * inv2 + c
        q = np.zeros_like(xb)
        for c in odd[:20][::-1]:
            q = q * inv2 + c
        q = q * inv
        chi = xb - 0.25 * np.pi
        out[big] = np.sqrt(2.0 / (np.pi * xb)) * (p * np.cos(chi) - q * np.sin(chi))

    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# Gamma sampling (Marsaglia & Tsang, 2000)
# ---------------------------------------------------------------------------

def sample_gamma(shape, size, rng: np.random.Generator) -> np.ndarray:
    """Gamma(shape, scale=1) draws by Marsaglia-Tsang squeeze/rejection.

    ``shape`` may be a scalar or an array broadcastable to ``size``.  Shapes
    below 1 are boosted: Gamma(s) = Gamma(s + 1) * U**(1/s).
    """
    shape = np.broadcast_to(np.asarray(shape, dtype=np.float64), size)
    if np.any(shape <= 0):
        raise ValueError("gamma shape must be positive")
    flat = shape.ravel()
    boost = flat < 1.0
    s = np.where(boost, flat + 1.0, flat)
    d = s - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)

    out = np.empty(flat.size)
    todo = np.arange(flat.size)
    while todo.size:
        x = rng.standard_normal(todo.size)
        u = rng.random(todo.size)
        v = (1.0 + c[todo] * x) ** 3
        ok = v > 0
        x2 = x * x
        with np.errstate(invalid="ignore", divide="ignore"):
            accept = ok & ((u < 1.0 - 0.0331 * x2 * x2)
                           | (np.log(u) < 0.5 * x2 + d[todo] * (1.0 - v + np.log(v))))
        out[todo[accept]] = d[todo[accept]] * v[accept]
        todo = todo[~accept]

    if np.any(boost):
        idx = np.flatnonzero(boost)
        u = 1.0 - rng.random(idx.size)  # (0, 1]; keeps draws strictly positive
        out[idx] *= u ** (1.0 / flat[idx])
    return out.reshape(size)


# ---------------------------------------------------------------------------
# Envelope generators
# ---------------------------------------------------------------------------

def _envelope(k, alpha, x, y, z, sigma: float = 1.0) -> np.ndarray:
    scale = sigma * np.sqrt(z / alpha)
    re = np.sqrt(2.0 * k) + x * scale
    im = y * scale
    return np.sqrt(re * re + im * im)


def _ar1(noise: np.ndarray, rho: float) -> np.ndarray:
    """X_0 = e_0, X_i = rho X_{i-1} + sqrt(1 - rho^2) e_i along the last axis."""
    if rho == 0.0:
        return noise
    g = math.sqrt(1.0 - rho * rho)
    # First element enters unscaled; shift it through the filter's initial state.
    head = noise[..., :1]
    zi = rho * head
    rest = lfilter([g], [1.0, -rho], noise[..., 1:], axis=-1, zi=zi)[0]
    return np.concatenate([head, rest], axis=-1)


def sample_iid(p: HKParams, n: int, seed) -> EnvelopeSamples:
    """n independent envelope draws; bit-exact for a fixed seed."""
    return sample_correlated(p, n, 0.0, seed)


def sample_correlated(p: HKParams, n: int, rho: float, seed) -> EnvelopeSamples:
    """Envelope draws whose Gaussian components follow an AR(1) recurrence.

    Z is drawn afresh for every sample; only X and Y are autocorrelated.
    With rho = 0 the result is identical to :func:`sample_iid`.
    """
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    rng = make_rng(seed)
    x = _ar1(rng.standard_normal(n), rho)
    y = _ar1(rng.standard_normal(n), rho)
    z = sample_gamma(p.alpha, n, rng)
    vals = _envelope(p.k, p.alpha, x, y, z)
    meta = dict(n=n, log10_alpha=p.log10_alpha, k=p.k, rho=rho,
                seed=seed if isinstance(seed, int) else None,
                generator_version=GENERATOR_VERSION)
    return EnvelopeSamples(vals, rho, meta)


def sample_batch(log10_alpha, k, n: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Rows of correlated envelope samples, one row per parameter pair.

    Returns an array of shape (len(log10_alpha), n).  Intended for dataset
    generation where thousands of short sequences are needed at once.
    """
    la = np.asarray(log10_alpha, dtype=np.float64).ravel()
    kk = np.asarray(k, dtype=np.float64).ravel()
    if la.shape != kk.shape:
        raise ValueError("log10_alpha and k must have the same length")
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    alpha = 10.0 ** la[:, None]
    m = la.size
    x = _ar1(rng.standard_normal((m, n)), rho)
    y = _ar1(rng.standard_normal((m, n)), rho)
    z = sample_gamma(alpha, (m, n), rng)
    return _envelope(kk[:, None], alpha, x, y, z)


def lag_correlation(s, lag: int = 1) -> float:
    """Pearson correlation between the series and itself shifted by ``lag``."""
    v = s.values if isinstance(s, EnvelopeSamples) else np.asarray(s, dtype=np.float64)
    if lag < 0 or lag >= v.size:
        raise ValueError(f"lag must lie in [0, {v.size}), got {lag}")
    a = v[: v.size - lag]
    b = v[lag:]
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    if den == 0.0:
        raise ValueError("lag correlation undefined for a constant series")
    return float(np.dot(a, b) / den)


# ---------------------------------------------------------------------------
# Density
# ---------------------------------------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(24)


def hk_pdf(a, p: NativeHKParams, method: str = "angular", rtol: float = 1e-8):
    """Envelope density

        P(a) = a * int_0^inf u J0(u eps) J0(u a) (1 + u^2 sigma^2 / 2)^(-alpha) du.

    ``method="angular"`` (default) rewrites the Bessel product with the
    addition theorem J0(u eps) J0(u a) = (1/pi) int_0^pi J0(u R(phi)) dphi,
    R^2 = a^2 + eps^2 - 2 a eps cos(phi), and integrates over u in closed
    form (a Macdonald function), leaving a smooth integral over phi.  It is
    valid over the whole parameter box.

    The printed integral scales the diffuse part as sigma^2 Z with
    Z ~ Gamma(alpha, 1), while the generator uses sigma^2 Z / alpha.  The
    integral is therefore evaluated with sigma^2 / alpha in place of sigma^2
    so that the density is the law of :func:`sample_iid` draws.

    ``method="direct"`` integrates the oscillatory u-integral piecewise over
    half periods with Gauss-Legendre.  The integrand decays like
    u^(-2 alpha), so this route is only practical for alpha >= 1.
    """
    if method not in ("angular", "direct"):
        raise ValueError(f"unknown density method {method!r}")
    a_arr = np.atleast_1d(np.asarray(a, dtype=np.float64))
    if np.any(~np.isfinite(a_arr)):
        raise ValueError("density argument must be finite")
    fn = _pdf_angular if method == "angular" else _pdf_direct
    out = np.array([fn(float(v), p, rtol) for v in a_arr])
    return float(out[0]) if np.ndim(a) == 0 else out


def hk_cdf(a, p: NativeHKParams, rtol: float = 1e-8):
    """Distribution function obtained by integrating :func:`hk_pdf`."""
    a_arr = np.atleast_1d(np.asarray(a, dtype=np.float64))
    order = np.argsort(a_arr)
    out = np.empty_like(a_arr)
    acc, prev = 0.0, 0.0
    for i in order:
        hi = max(a_arr[i], 0.0)
        if hi > prev:
            val, err = integrate.quad(lambda t: _pdf_angular(t, p, rtol), prev, hi,
                                      epsabs=1e-12, epsrel=1e-10, limit=200)
            acc += val
            prev = hi
        out[i] = min(acc, 1.0)
    return float(out[0]) if np.ndim(a) == 0 else out


def _macdonald_kernel(r, nu: float, z: float):
    """log of (r/z)^nu K_nu(r z), finite-limit aware."""
    r = np.asarray(r, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return nu * np.log(r / z) + np.log(special.kve(nu, r * z)) - r * z


def _pdf_angular(a: float, p: NativeHKParams, rtol: float) -> float:
    if a <= 0:
        return 0.0
    eps, alpha = p.epsilon, p.alpha
    sig = p.sigma / math.sqrt(alpha)
    nu = alpha - 1.0
    z = math.sqrt(2.0) / sig
    # (sigma^2/2)^(-alpha) / (2^nu Gamma(alpha)); the R-dependent part is the kernel.
    log_c = -alpha * math.log(0.5 * sig * sig) - nu * math.log(2.0) - special.gammaln(alpha)

    if eps == 0.0:
        return a * math.exp(log_c + float(_macdonald_kernel(a, nu, z)))

    def integrand(phi):
        # Cancellation-free form of a^2 + eps^2 - 2 a eps cos(phi).
        r = math.sqrt((a - eps) ** 2 + 4.0 * a * eps * math.sin(0.5 * phi) ** 2)
        if r == 0.0:
            if nu > 0:
                return math.exp(log_c + special.gammaln(nu) + (nu - 1.0) * math.log(2.0)
                                - 2.0 * nu * math.log(z))
            return math.inf
        return math.exp(log_c + float(_macdonald_kernel(r, nu, z)))

    if a == eps and nu <= -0.5:
        return math.inf
    # Peak near phi = 0 when a ~ eps; give quad a breakpoint at its width.
    width = abs(a - eps) / math.sqrt(a * eps) if a * eps > 0 else 1.0
    pts = [w for w in (width, 10 * width) if 0 < w < math.pi]
    # quad's own warning is superseded by the explicit error check below.
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, err = integrate.quad(integrand, 0.0, math.pi, points=pts or None,
                                  epsabs=0.0, epsrel=rtol, limit=400)
    if not math.isfinite(val) or err > max(1e3 * rtol * abs(val), 1e-13):
        raise ConvergenceError("HK density angular quadrature did not converge", err)
    return a * val / math.pi


def _pdf_direct(a: float, p: NativeHKParams, rtol: float, max_pieces: int = 200_000) -> float:
    if a <= 0:
        return 0.0
    eps, alpha = p.epsilon, p.alpha
    sig = p.sigma / math.sqrt(alpha)
    width = np.pi / max(a + eps, 1.0 / sig)
    # Envelope (1 + u^2 s^2/2)^(-alpha) below rtol beyond u_cut.
    u_cut = math.sqrt(2.0) / sig * math.sqrt(rtol ** (-1.0 / alpha) - 1.0)
    n = int(math.ceil(u_cut / width)) + 2
    if n > max_pieces:
        raise ConvergenceError(
            f"direct HK quadrature needs {n} pieces (alpha={alpha:.3g}); use method='angular'",
            float(((1.0 + 0.5 * (max_pieces * width * sig) ** 2) ** (-alpha))))
    total = 0.0
    last = []
    for start in range(0, n, 20_000):
        lo = width * np.arange(start, min(start + 20_000, n))
        u = lo[:, None] + 0.5 * width * (_GL_X + 1.0)[None, :]
        g = u * bessel_j0(u * eps) * bessel_j0(u * a) * (1.0 + 0.5 * (u * sig) ** 2) ** (-alpha)
        pieces = 0.5 * width * (g * _GL_W).sum(axis=1)
        partial = total + np.cumsum(pieces)
        total = float(partial[-1])
        last = partial[-2:] if partial.size >= 2 else np.r_[total, total]
    # Averaging the last two partial sums cancels most of the oscillating remainder.
    return max(a * 0.5 * float(last[0] + last[1]), 0.0)


# ---------------------------------------------------------------------------
# Sample fixture files
# ---------------------------------------------------------------------------

def save_samples(path, s: EnvelopeSamples, **meta) -> None:
    """Write little-endian float64 samples plus a JSON sidecar (``<path>.json``)."""
    path = Path(path)
    s.values.astype("<f8").tofile(path)
    info = dict(n=int(s.values.size), log10_alpha=None, k=None, rho=s.rho,
                seed=None, generator_version=GENERATOR_VERSION)
    info.update({k: v for k, v in s.meta.items() if k in info})
    info.update(meta)
    Path(str(path) + ".json").write_text(json.dumps(info, indent=2, sort_keys=True))


def load_samples(path) -> EnvelopeSamples:
    path = Path(path)
    vals = np.fromfile(path, dtype="<f8")
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    if meta and int(meta.get("n", vals.size)) != vals.size:
        raise ValueError(f"{path}: sidecar says n={meta['n']}, file holds {vals.size}")
    return EnvelopeSamples(vals, float(meta.get("rho") or 0.0), meta)
