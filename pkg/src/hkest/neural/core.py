"""Dense networks with hand-written reverse mode, losses, Adam and gradient checks.

Weights are stored as (in_dim, out_dim) matrices and inputs as row batches,
so a layer is ``act(x @ W + b)``.  Everything runs in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..features import FeatureNorm
from ..hkmodel import make_rng

LEAK = 0.01
ACTIVATIONS = ("leaky_relu", "identity")


def _act(z, kind):
    if kind == "leaky_relu":
        return np.where(z > 0, z, LEAK * z)
    return z


def _act_grad(z, kind):
    if kind == "leaky_relu":
        return np.where(z > 0, 1.0, LEAK)
    return np.ones_like(z)


@dataclass
class DenseNet:
    """Chain of affine layers with leaky-ReLU (identity on the last layer).

    ``dropout`` is (layer index, probability): inverted dropout applied to
    that layer's activated output in train mode only.  ``norm`` records the
    input normalization the network was trained with; ``net_forward``
    expects already-normalized input.
    """

    weights: list
    biases: list
    acts: list
    dropout: tuple | None = None
    norm: FeatureNorm | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.acts)):
            raise ValueError("weights, biases and activations must have equal length")
        for i, (w, b, a) in enumerate(zip(self.weights, self.biases, self.acts)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bad shapes {w.shape}, {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input dim {w.shape[0]} does not chain")
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @property
    def dims(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "DenseNet":
        return DenseNet([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        list(self.acts), self.dropout, self.norm, dict(self.meta))


def init_dense(dims, seed, dropout=None, norm=None) -> DenseNet:
    """He-initialized chain; leaky-ReLU everywhere except the linear output."""
    rng = make_rng(seed)
    ws, bs = [], []
    for din, dout in zip(dims[:-1], dims[1:]):
        ws.append(rng.standard_normal((din, dout)) * np.sqrt(2.0 / din))
        bs.append(np.zeros(dout))
    acts = ["leaky_relu"] * (len(ws) - 1) + ["identity"]
    return DenseNet(ws, bs, acts, dropout, norm)


def forward(weights, biases, acts, x, dropout=None, rng=None):
    """Batch forward pass.  Returns (output, cache) for :func:`backward`."""
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if h.shape[1] != weights[0].shape[0]:
        raise ValueError(f"input width {h.shape[1]} != network input {weights[0].shape[0]}")
    cache = []
    for i, (w, b, a) in enumerate(zip(weights, biases, acts)):
        z = h @ w + b
        out = _act(z, a)
        mask = None
        if dropout is not None and rng is not None and dropout[0] == i:
            keep = 1.0 - dropout[1]
            mask = (rng.random(out.shape) < keep) / keep
            out = out * mask
        cache.append((h, z, mask))
        h = out
    return h, cache


def backward(weights, acts, cache, dout):
    """Gradients (dW list, db list, dx) for an upstream gradient ``dout``."""
    dws, dbs = [None] * len(weights), [None] * len(weights)
    g = dout
    for i in range(len(weights) - 1, -1, -1):
        h, z, mask = cache[i]
        if mask is not None:
            g = g * mask
        g = g * _act_grad(z, acts[i])
        dws[i] = h.T @ g
        dbs[i] = g.sum(axis=0)
        g = g @ weights[i].T
    return dws, dbs, g


def net_forward(net: DenseNet, x, train_mode: bool = False, seed=None) -> np.ndarray:
    """Output for one vector or a batch of rows of normalized input."""
    x = np.asarray(x, dtype=np.float64)
    rng = make_rng(0 if seed is None else seed) if train_mode else None
    out, _ = forward(net.weights, net.biases, net.acts, x,
                     net.dropout if train_mode else None, rng)
    return out[0] if x.ndim == 1 else out


# ---------------------------------------------------------------------------
# Losses: each returns (mean loss over the batch, gradient w.r.t. pred)
# ---------------------------------------------------------------------------

SMOOTH_L1_BETA = 1.0


def _rows(pred, target):
    p = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    t = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    return p, t


def sq_loss(pred, target):
    """Squared L2 norm per row, averaged over rows."""
    p, t = _rows(pred, target)
    d = p - t
    n = p.shape[0]
    return float((d * d).sum() / n), 2.0 * d / n


def smooth_l1(pred, target, beta: float = SMOOTH_L1_BETA):
    p, t = _rows(pred, target)
    d = p - t
    ad = np.abs(d)
    n = p.shape[0]
    quad = ad < beta
    val = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad = np.where(quad, d / beta, np.sign(d))
    return float(val.sum() / n), grad / n


def mpae_loss_grad(pred, target, beta: float = SMOOTH_L1_BETA):
    a, ga = sq_loss(pred, target)
    b, gb = smooth_l1(pred, target, beta)
    return a + b, ga + gb


def mpae_loss(pred, target, beta: float = SMOOTH_L1_BETA) -> float:
    """||pred - target||^2 + sum of smooth-L1 terms (per vector; batches are averaged)."""
    return mpae_loss_grad(pred, target, beta)[0]


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

def param_grads(net: DenseNet, loss, x, y):
    out, cache = forward(net.weights, net.biases, net.acts, x)
    val, g = loss(out, y)
    dws, dbs, _ = backward(net.weights, net.acts, cache, g)
    grads = []
    for dw, db in zip(dws, dbs):
        grads += [dw, db]
    return val, grads


def grad_check(net: DenseNet, loss, x, y, h: float = 1e-5) -> float:
    """Largest relative error of the reverse-mode gradient over parameter arrays.

    Each array is compared to central differences as
    ||g - g_fd|| / max(||g|| + ||g_fd||, 1e-12).  The net is evaluated
    without dropout.
    """
    _, grads = param_grads(net, loss, x, y)
    worst = 0.0
    for p, g in zip(net.params(), grads):
        fd = np.empty_like(p)
        flat, fflat = p.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss(forward(net.weights, net.biases, net.acts, x)[0], y)[0]
            flat[i] = keep - h
            dn = loss(forward(net.weights, net.biases, net.acts, x)[0], y)[0]
            flat[i] = keep
            fflat[i] = (up - dn) / (2.0 * h)
        denom = max(np.linalg.norm(g) + np.linalg.norm(fd), 1e-12)
        worst = max(worst, float(np.linalg.norm(g - fd) / denom))
    return worst


# ---------------------------------------------------------------------------
# Optimizer and training loop
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    patience: int = 20
    val_fraction: float = 0.1
    seed: int = 0
    ns: int | None = None
    smooth_l1_beta: float = SMOOTH_L1_BETA
    prior_std: float = 0.1
    finetune_epochs: int = 300
    mc_passes: int = 50

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainLog:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return {"train_loss": self.train_loss, "val_loss": self.val_loss,
                "best_epoch": self.best_epoch, "stopped_early": self.stopped_early}


def split_indices(n: int, val_fraction: float, rng):
    perm = rng.permutation(n)
    nval = max(1, int(round(n * val_fraction))) if n > 1 else 0
    return perm[nval:], perm[:nval]


def run_training(params, step_fn, val_fn, n_train: int, cfg: TrainConfig, rng, progress=None):
    """Mini-batch Adam with patience-based early stopping.

    ``step_fn(idx, epoch_batches)`` returns (loss, grads) on the training rows
    ``idx``; ``val_fn()`` returns the validation loss.  Parameters are
    updated in place and the best-validation snapshot is restored at the end.
    """
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2)
    log = TrainLog()
    best, best_params, wait = np.inf, [p.copy() for p in params], 0
    nb = max(1, -(-n_train // cfg.batch_size))
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_train)
        total = 0.0
        for b in range(nb):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            loss, grads = step_fn(idx, nb)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}: {loss}")
            opt.step(grads)
            total += loss * idx.size
        log.train_loss.append(total / n_train)
        v = float(val_fn())
        if not np.isfinite(v):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        log.val_loss.append(v)
        if progress:
            progress(epoch, log.train_loss[-1], v)
        if v < best:
            best, wait, log.best_epoch = v, 0, epoch
            best_params = [p.copy() for p in params]
        else:
            wait += 1
            if wait >= cfg.patience:
                log.stopped_early = True
                break
    for p, q in zip(params, best_params):
        p[...] = q
    return log
