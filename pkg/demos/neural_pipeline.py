"""Train a small MPAE and BayesNet and compare them with XU on the test grid.

Usage: python demos/neural_pipeline.py [lut.bin]
Small sizes keep this to about a minute on one core; the test artifact cache
(tests/artifacts.py) uses the full-size settings.
"""
import sys

import numpy as np

from hkest.benchkit import evaluate_grid, gen_test_grid, gen_training_set, summarize
from hkest.estimators import XUEstimator, lut_norm
from hkest.forward import FeatureLUT, build_lut
from hkest.neural import BNNEstimator, TrainConfig, mpae_denoise, train_bnn, train_mpae

lut = FeatureLUT.load(sys.argv[1]) if len(sys.argv) > 1 else build_lut(41, 32)
norm = lut_norm(lut)
ns = 1024

data = gen_training_set(20000, ns, 0.2, seed=1, lut=lut)
ae = train_mpae(data.noisy, data.theory, TrainConfig(seed=2, ns=ns, epochs=60, finetune_epochs=60),
                norm)
held = gen_training_set(2000, ns, 0.2, seed=3, lut=lut)
for name, x in (("raw", held.noisy), ("mpae", mpae_denoise(ae, held.noisy))):
    d = np.linalg.norm(norm.apply(x) - norm.apply(held.theory), axis=1).mean()
    print(f"{name:5s} mean z-space distance to theory {d:.3f}")

bnn = train_bnn(data.noisy, data.params, "sam", TrainConfig(seed=4, ns=ns, epochs=60), norm)
grid = gen_test_grid(ns, 0.2, seed=7)
for est in (XUEstimator(lut), BNNEstimator(bnn, seed=0)):
    s = summarize(evaluate_grid(grid, est))
    print(f"{s['method']:8s} median MAE log10a {s['mae_log10_alpha']['median']:.4f} "
          f"k {s['mae_k']['median']:.4f}")
