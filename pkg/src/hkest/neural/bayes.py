"""Mean-field Gaussian Bayesian network regressing (log10 alpha, k) from features.

Each weight has a variational mean and a raw scale rho with std =
softplus(rho).  Training minimizes a Gaussian negative log-likelihood with
a learned per-output noise scale plus KL(posterior || N(0, prior_std^2)),
the KL weighted by 1/num_batches against a batch-summed likelihood.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..estimators import EstimateArrays, Estimator, clamp_to_box
from ..features import FeatureNorm, N_FEATURES
from ..hkmodel import make_rng
from .core import DenseNet, TrainConfig, backward, forward, run_training, split_indices
from .mpae import mpae_denoise

HIDDEN = (128, 128, 64)
VARIANTS = ("th", "sam", "sam+mpae")
RHO_INIT = -6.0


def softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class BayesNet:
    mu: list                 # W0, b0, W1, b1, ...
    rho: list
    acts: list
    norm: FeatureNorm        # input normalization
    target_mean: np.ndarray  # output scaling of (log10 alpha, k)
    target_std: np.ndarray
    log_noise: np.ndarray    # learned likelihood scale, normalized target units
    mc_passes: int = 50
    meta: dict = field(default_factory=dict)

    @property
    def dims(self) -> list:
        return [self.mu[0].shape[0]] + [self.mu[i].shape[1] for i in range(0, len(self.mu), 2)]

    def std(self) -> list:
        return [softplus(r) for r in self.rho]

    def mean_net(self) -> DenseNet:
        return DenseNet(self.mu[0::2], self.mu[1::2], list(self.acts), None, self.norm)


def init_bayes(dims, norm, target_mean, target_std, seed, mc_passes=50) -> BayesNet:
    rng = make_rng(seed)
    mu, rho = [], []
    for din, dout in zip(dims[:-1], dims[1:]):
        mu += [rng.standard_normal((din, dout)) * np.sqrt(2.0 / din), np.zeros(dout)]
        rho += [np.full((din, dout), RHO_INIT), np.full(dout, RHO_INIT)]
    acts = ["leaky_relu"] * (len(dims) - 2) + ["identity"]
    return BayesNet(mu, rho, acts, norm, np.asarray(target_mean, float),
                    np.asarray(target_std, float), np.zeros(dims[-1]), mc_passes)


def _sample(net: BayesNet, rng, std=None):
    std = net.std() if std is None else std
    eps = [rng.standard_normal(m.shape) for m in net.mu]
    return [m + s * e for m, s, e in zip(net.mu, std, eps)], eps


def bayes_forward(net: BayesNet, x, seed=0, passes: int | None = None):
    """Monte-Carlo predictive mean and std in parameter units.

    ``x`` is normalized input, one vector or a batch of rows.  Returns
    (mean, std) with the same leading shape as ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    rows = np.atleast_2d(x)
    passes = net.mc_passes if passes is None else passes
    rng = make_rng(seed)
    std = net.std()
    acc = np.zeros((rows.shape[0], net.mu[-1].shape[0]))
    acc2 = np.zeros_like(acc)
    for _ in range(passes):
        w, _ = _sample(net, rng, std)
        out, _ = forward(w[0::2], w[1::2], net.acts, rows)
        acc += out
        acc2 += out * out
    mean = acc / passes
    var = np.maximum(acc2 / passes - mean * mean, 0.0)
    # Identical passes (zero posterior std) must give exactly zero spread.
    if all(np.all(s == 0) for s in std):
        var[:] = 0.0
    mean = mean * net.target_std + net.target_mean
    sd = np.sqrt(var) * net.target_std
    if x.ndim == 1:
        return mean[0], sd[0]
    return mean, sd


def kl_terms(net: BayesNet, prior_std: float):
    """KL(q || prior) summed over all weights, and its gradients in (mu, rho)."""
    total = 0.0
    gmu, grho = [], []
    s0sq = prior_std * prior_std
    for m, r in zip(net.mu, net.rho):
        s = softplus(r)
        total += float(np.sum(np.log(prior_std / s) + (s * s + m * m) / (2.0 * s0sq) - 0.5))
        gmu.append(m / s0sq)
        grho.append((-1.0 / s + s / s0sq) * _sigmoid(r))
    return total, gmu, grho


def elbo_loss_grad(net: BayesNet, x, y, eps, lam: float, prior_std: float):
    """Batch loss and gradients for fixed reparameterization noise ``eps``.

    Loss is the batch-mean Gaussian NLL with learned log noise plus
    ``lam`` * KL.  Gradients are ordered mu..., rho..., log_noise.
    """
    b = x.shape[0]
    std = net.std()
    w = [m + s * e for m, s, e in zip(net.mu, std, eps)]
    out, cache = forward(w[0::2], w[1::2], net.acts, x)
    inv = np.exp(-2.0 * net.log_noise)
    d = out - y
    nll = 0.5 * d * d * inv + net.log_noise
    g_out = d * inv / b
    g_noise = (1.0 - d * d * inv).sum(axis=0) / b
    dws, dbs, _ = backward(w[0::2], net.acts, cache, g_out)
    gw = [None] * len(net.mu)
    gw[0::2], gw[1::2] = dws, dbs
    kl, kmu, krho = kl_terms(net, prior_std)
    g_mu = [g + lam * k for g, k in zip(gw, kmu)]
    g_rho = [g * e * _sigmoid(r) + lam * k for g, e, r, k in zip(gw, eps, net.rho, krho)]
    return float(nll.sum() / b) + lam * kl, g_mu + g_rho + [g_noise]


def _inputs_for(variant, noisy, theory, mpae):
    if variant == "th":
        return theory
    if variant == "sam":
        return noisy
    if mpae is None:
        raise ValueError("variant 'sam+mpae' needs a trained MPAE")
    return mpae_denoise(mpae, noisy)


def train_bnn(features, params, variant: str, cfg: TrainConfig = TrainConfig(),
              norm: FeatureNorm | None = None, mpae: DenseNet | None = None,
              progress=None) -> BayesNet:
    """Train a BayesNet on (features, params) pairs.

    ``features`` are the theoretical features for variant 'th' and the
    noisy sample features for 'sam' and 'sam+mpae' (the latter are passed
    through ``mpae`` first).  ``params`` is (n, 2) of (log10 alpha, k).
    """
    variant = variant.lower()
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    F = np.asarray(features, dtype=np.float64)
    P = np.asarray(params, dtype=np.float64)
    if F.ndim != 2 or F.shape[1] != N_FEATURES or P.shape != (F.shape[0], 2):
        raise ValueError("need (n, 8) features and (n, 2) parameters")
    if variant == "sam+mpae":
        F = _inputs_for(variant, F, None, mpae)
    if norm is None:
        norm = FeatureNorm(F.mean(axis=0), F.std(axis=0))
    x = norm.apply(F)
    tmean, tstd = P.mean(axis=0), P.std(axis=0)
    y = (P - tmean) / tstd

    rng = make_rng(cfg.seed)
    net = init_bayes([N_FEATURES, *HIDDEN, 2], norm, tmean, tstd, cfg.seed + 1, cfg.mc_passes)
    tr, va = split_indices(x.shape[0], cfg.val_fraction, rng)
    n_train = tr.size
    plist = net.mu + net.rho + [net.log_noise]

    def step(idx, nb):
        _, eps = _sample(net, rng)
        return elbo_loss_grad(net, x[tr[idx]], y[tr[idx]], eps, 1.0 / (nb * idx.size),
                              cfg.prior_std)

    def val():
        # Deterministic validation: squared error of the posterior-mean network.
        out, _ = forward(net.mu[0::2], net.mu[1::2], net.acts, x[va])
        return float(np.mean((out - y[va]) ** 2))

    log = run_training(plist, step, val, n_train, cfg, rng, progress)
    net.meta.update({"model": "bnn", "variant": variant, "ns": cfg.ns,
                     "prior_std": cfg.prior_std, "kl_weight": "1/num_batches",
                     "train_config": cfg.to_dict(), "log": log.to_dict()})
    return net


class BNNEstimator(Estimator):
    """Estimator interface over a BayesNet, optionally behind an MPAE."""

    bayesian = True

    def __init__(self, net: BayesNet, mpae: DenseNet | None = None, seed: int = 0,
                 passes: int | None = None, name: str | None = None):
        self.net, self.mpae, self.seed, self.passes = net, mpae, seed, passes
        self.name = name or ("bnn-" + net.meta.get("variant", "bnn") + ("+mpae" if mpae else ""))

    def estimate_many(self, F) -> EstimateArrays:
        F = np.atleast_2d(np.asarray(F, dtype=np.float64))
        ok = np.all(np.isfinite(F), axis=1)
        G = np.where(ok[:, None], F, self.net.norm.mean)
        if self.mpae is not None:
            G = mpae_denoise(self.mpae, G)
        mean, sd = bayes_forward(self.net, self.net.norm.apply(G), self.seed, self.passes)
        la, k = clamp_to_box(mean[:, 0], mean[:, 1])
        la = np.where(ok, la, np.nan)
        k = np.where(ok, k, np.nan)
        sd = np.where(ok[:, None], sd, np.nan)
        return EstimateArrays(la, k, sd, ok, np.zeros(la.size), np.full(la.size, self.net.mc_passes))
