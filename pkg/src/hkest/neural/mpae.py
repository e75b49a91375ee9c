"""Denoising autoencoder that projects noisy features onto the theoretical manifold."""
from __future__ import annotations

import numpy as np

from ..features import FeatureNorm, N_FEATURES
from ..hkmodel import make_rng
from .core import (DenseNet, TrainConfig, backward, forward, init_dense, mpae_loss_grad,
                   run_training, split_indices)

ENCODER = (64, 32, 32)
DECODER = (32, 32)
DROPOUT = (1, 0.2)          # second encoder layer
LOSS_NAME = "squared_l2+smooth_l1"


def mpae_dims(bottleneck: int = 3) -> list:
    return [N_FEATURES, *ENCODER, bottleneck, *DECODER, N_FEATURES]


def train_mpae(noisy, theory, cfg: TrainConfig = TrainConfig(), norm: FeatureNorm | None = None,
               bottleneck: int = 3, progress=None) -> DenseNet:
    """Fit noisy -> theoretical features in normalized coordinates.

    ``norm`` z-scores both sides; by default it is fit on ``theory``.
    The returned net carries the norm, training curve and config in ``meta``.
    """
    noisy = np.asarray(noisy, dtype=np.float64)
    theory = np.asarray(theory, dtype=np.float64)
    if noisy.shape != theory.shape or noisy.ndim != 2 or noisy.shape[1] != N_FEATURES:
        raise ValueError("need matching (n, 8) noisy and theoretical feature arrays")
    if norm is None:
        norm = FeatureNorm(theory.mean(axis=0), theory.std(axis=0))
    x, y = norm.apply(noisy), norm.apply(theory)

    rng = make_rng(cfg.seed)
    net = init_dense(mpae_dims(bottleneck), seed=cfg.seed + 1, dropout=DROPOUT, norm=norm)
    tr, va = split_indices(x.shape[0], cfg.val_fraction, rng)
    params = net.params()

    phase = {"dropout": net.dropout}

    def step(idx, _nb):
        xi, yi = x[tr[idx]], y[tr[idx]]
        out, cache = forward(net.weights, net.biases, net.acts, xi, phase["dropout"], rng)
        loss, g = mpae_loss_grad(out, yi, cfg.smooth_l1_beta)
        dws, dbs, _ = backward(net.weights, net.acts, cache, g)
        grads = []
        for dw, db in zip(dws, dbs):
            grads += [dw, db]
        return loss, grads

    def val():
        out, _ = forward(net.weights, net.biases, net.acts, x[va])
        return mpae_loss_grad(out, y[va], cfg.smooth_l1_beta)[0]

    log = run_training(params, step, val, tr.size, cfg, rng, progress)
    # Dropout shifts the train-mode activation statistics; a short dropout-free
    # phase re-fits the weights to the inference-mode network.
    tune = None
    if cfg.finetune_epochs > 0:
        phase["dropout"] = None
        tune_cfg = TrainConfig(**{**cfg.to_dict(), "epochs": cfg.finetune_epochs})
        tune = run_training(params, step, val, tr.size, tune_cfg, rng, progress).to_dict()
    net.meta.update({"model": "mpae", "bottleneck": bottleneck, "ns": cfg.ns,
                     "loss": LOSS_NAME, "train_config": cfg.to_dict(), "log": log.to_dict(),
                     "finetune_log": tune})
    return net


def mpae_denoise(net: DenseNet, F) -> np.ndarray:
    """Raw features in, denoised raw features out (uses the net's own norm)."""
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    z, _ = forward(net.weights, net.biases, net.acts, net.norm.apply(F))
    return net.norm.invert(z)
