"""Small numpy networks: the feature denoiser and the Bayesian estimator."""
from .bayes import BayesNet, BNNEstimator, bayes_forward, init_bayes, train_bnn
from .core import (Adam, DenseNet, TrainConfig, TrainingDiverged, grad_check, init_dense,
                   mpae_loss, net_forward, smooth_l1, sq_loss)
from .mpae import mpae_denoise, mpae_dims, train_mpae
from .store import load_model, save_model

__all__ = [
    "Adam", "BayesNet", "BNNEstimator", "DenseNet", "TrainConfig", "TrainingDiverged",
    "bayes_forward", "grad_check", "init_bayes", "init_dense", "load_model", "mpae_denoise",
    "mpae_dims", "mpae_loss", "net_forward", "save_model", "smooth_l1", "sq_loss",
    "train_bnn", "train_mpae",
]
