"""Homodyned-K parameter estimation from ultrasound envelope samples."""
from .estimators import (Estimate, EstimateArrays, OPEstimator, PSOConfig, XUEstimator,
                         estimate_batch, estimate_op, estimate_xu)
from .features import (FEATURE_NAMES, FeatureNorm, FeatureVector, apply_norm, compute_features,
                       feature_matrix, fit_norm, invert_norm)
from .forward import (FeatureLUT, QuadConfig, build_lut, hyp1f1_half, lut_lookup,
                      theoretical_feature_matrix, theoretical_features, theoretical_moment)
from .hkmodel import (ConvergenceError, EnvelopeSamples, HKParams, NativeHKParams, hk_cdf,
                      hk_pdf, lag_correlation, load_samples, sample_correlated, sample_iid,
                      save_samples)

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError", "Estimate", "EstimateArrays", "EnvelopeSamples", "FEATURE_NAMES",
    "FeatureLUT", "FeatureNorm", "FeatureVector", "HKParams", "NativeHKParams", "OPEstimator",
    "PSOConfig", "QuadConfig", "XUEstimator", "apply_norm", "build_lut", "compute_features",
    "estimate_batch", "estimate_op", "estimate_xu", "feature_matrix", "fit_norm", "hk_cdf",
    "hk_pdf", "hyp1f1_half", "invert_norm", "lag_correlation", "load_samples", "lut_lookup",
    "sample_correlated", "sample_iid", "save_samples", "theoretical_feature_matrix",
    "theoretical_features", "theoretical_moment",
]
