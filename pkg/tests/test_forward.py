import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from hkest.features import compute_features
from hkest.forward import (FeatureLUT, QuadConfig, build_lut, hyp1f1_half, hyp1f1_matrix,
                           lut_lookup, theoretical_feature_matrix, theoretical_features,
                           theoretical_moment)
from hkest.hkmodel import HKParams, NativeHKParams, make_rng, sample_iid

K_ORDERS = (0.72, 0.88, 1.44, 1.76, 2.16, 2.64, 2.88, 3.52)


def k_moment(v, sigma, alpha):
    """E[A^v] of the K distribution (eps = 0) in closed form."""
    return ((2 * sigma ** 2 / alpha) ** (v / 2) * math.gamma(1 + v / 2)
            * math.gamma(alpha + v / 2) / math.gamma(alpha))


# ---------------------------------------------------------------------------
# 1F1
# ---------------------------------------------------------------------------

def test_hyp1f1_trivial_values():
    assert hyp1f1_half(0.72, 0.0) == 1.0
    z = np.array([-0.5, -3.0, -40.0, -1e3])
    assert np.allclose(hyp1f1_half(2.0, z), 1.0 - z, rtol=1e-12)
    with pytest.raises(ValueError):
        hyp1f1_half(1.0, 0.5)


@pytest.mark.parametrize("v", [0.72, 0.88, 1.44, 2.64, 3.52, 4.0])
def test_hyp1f1_against_arbitrary_precision(v):
    zs = -np.concatenate([np.logspace(-4, 6, 60), [34.9, 35.0, 35.1, 50.0]])
    mpmath.mp.dps = 40
    ref = np.array([float(mpmath.hyp1f1(-v / 2, 1, mpmath.mpf(float(z)))) for z in zs])
    assert np.allclose(hyp1f1_half(v, zs), ref, rtol=1e-8, atol=0)


def test_hyp1f1_matrix_shape():
    out = hyp1f1_matrix(np.array([0.5, 1.0, 2.0]), np.ones((4, 5)))
    assert out.shape == (3, 4, 5)


# ---------------------------------------------------------------------------
# Moments
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("alpha", [0.5012, 1.0, 3.0, 19.95])
def test_k_distribution_closed_form(alpha):
    p = NativeHKParams(0.0, 1.0, alpha)
    got = theoretical_moment(np.array(K_ORDERS), p)
    ref = np.array([k_moment(v, 1.0, alpha) for v in K_ORDERS])
    assert np.max(np.abs(got / ref - 1)) < 1e-6


def test_second_moment_exact():
    assert theoretical_moment(2.0, NativeHKParams(0.0, 1.0, 20.0)) == pytest.approx(2.0, rel=1e-6)
    # With coherent part: E[A^2] = eps^2 + 2 sigma^2.
    assert theoretical_moment(2.0, NativeHKParams(1.3, 1.0, 2.0)) == pytest.approx(1.69 + 2, rel=1e-8)


def test_moment_against_mixture_quadrature():
    # Independent oracle: Rician moments mixed over the gamma texture by scipy quad.
    from scipy import integrate, stats
    eps, alpha, v = 1.0, 3.0, 0.72

    def rice_moment(z):
        s = math.sqrt(z / alpha)
        return s ** v * 2 ** (v / 2) * math.gamma(1 + v / 2) * float(
            mpmath.hyp1f1(-v / 2, 1, -eps ** 2 / (2 * s * s)))
    val, _ = integrate.quad(lambda z: rice_moment(z) * stats.gamma.pdf(z, alpha), 0, 60, limit=200)
    got = theoretical_moment(v, NativeHKParams(eps, 1.0, alpha))
    assert got == pytest.approx(val, rel=1e-7)


def test_moment_monte_carlo():
    p = HKParams(math.log10(3), 0.5)
    a = sample_iid(p, 1_000_000, 17).values
    assert theoretical_moment(0.72, p.native()) == pytest.approx(np.mean(a ** 0.72), rel=3e-3)


def test_moment_order_domain():
    with pytest.raises(ValueError):
        theoretical_moment(-2.5, NativeHKParams(0.0, 1.0, 1.0))


# ---------------------------------------------------------------------------
# Theoretical features
# ---------------------------------------------------------------------------

def test_xu_closed_form_at_zero_k():
    for alpha in (0.6, 2.0, 20.0):
        f = theoretical_features(HKParams(math.log10(alpha), 0.0))
        assert f.u_stat == pytest.approx(special.digamma(alpha) - math.log(alpha) - np.euler_gamma, abs=1e-6)
        assert f.x_stat == pytest.approx(1.0 + 1.0 / alpha, abs=1e-6)


def test_large_alpha_trend():
    f = theoretical_features(HKParams(1.3, 0.0))
    assert f.u_stat == pytest.approx(-0.607, abs=0.02)
    assert f.u_stat < -0.5772


def test_sigma_invariance():
    p = HKParams(0.4, 0.8)
    a = theoretical_features(p).to_array()
    b = theoretical_features(p, sigma=2.0).to_array()
    assert np.max(np.abs(a - b)) < 1e-8


@pytest.fixture(scope="module")
def large_sample_gap():
    p = HKParams(0.5, 0.5)
    sample = compute_features(sample_iid(p, 2_000_000, 2024)).to_array()
    return np.abs(sample - theoretical_features(p).to_array())


@pytest.mark.xfail(strict=False, reason="kurtosis sampling noise at n=2e6 is about 0.01 (see ledger)")
def test_against_large_sample_uniform_bound(large_sample_gap):
    assert np.all(large_sample_gap < 0.005)


def test_against_large_sample(large_sample_gap):
    # Kurtosis estimators are heavy-tailed, so their columns get a wider bound.
    tol = np.array([0.005, 0.005, 0.005, 0.005, 0.03, 0.03, 0.005, 0.005])
    assert np.all(large_sample_gap < tol)


def test_features_respect_invariants():
    rng = make_rng(5)
    F = theoretical_feature_matrix(rng.uniform(-0.3, 1.3, 30), rng.uniform(0, 1.25, 30))
    assert np.all(F[:, 7] < 0) and np.all(F[:, :2] > 0) and np.all(F[:, 4:6] > 0)


def test_finer_quadrature_agrees():
    p = HKParams(-0.3, 1.25)
    coarse = theoretical_features(p).to_array()
    fine = theoretical_features(p, QuadConfig(n_nodes=12000)).to_array()
    assert np.max(np.abs(coarse - fine)) < 1e-7


# ---------------------------------------------------------------------------
# LUT
# ---------------------------------------------------------------------------

def test_tiny_lut_corners_exact():
    lut = build_lut(2, 2)
    for i, la in enumerate((-0.3, 1.3)):
        for j, k in enumerate((0.0, 1.25)):
            direct = theoretical_features(HKParams(la, k)).to_array()
            assert np.array_equal(lut.table[i, j], direct)
            assert np.array_equal(lut.lookup(la, k), direct)


def test_lut_io_roundtrip(tmp_path):
    lut = build_lut(3, 4)
    path = tmp_path / "t.bin"
    lut.save(path)
    back = FeatureLUT.load(path)
    assert np.array_equal(back.table, lut.table) and back.meta == lut.meta
    with pytest.raises(ValueError):
        (tmp_path / "bad.bin").write_bytes(b"garbage-not-a-lut")
        FeatureLUT.load(tmp_path / "bad.bin")


def test_lut_default_properties(lut):
    assert lut.shape == (161, 126)
    assert np.all(np.isfinite(lut.table)) and np.all(lut.table[..., 7] <= 0)
    diag = lut.meta["diagnostics"]
    assert "u_monotone_in_k_all_alpha" in diag and "xu_unique_root_fraction" in diag
    with pytest.raises(ValueError):
        lut_lookup(lut, HKParams(1.5, 0.2))


def test_lut_nodes_and_cells(lut):
    i, j = 37, 81
    la, k = lut.grid_log10_alpha[i], lut.grid_k[j]
    assert np.array_equal(lut_lookup(lut, HKParams(la, k)).to_array(), lut.table[i, j])
    mid = lut.lookup(0.5 * (la + lut.grid_log10_alpha[i + 1]), 0.5 * (k + lut.grid_k[j + 1]))
    corners = lut.table[i:i + 2, j:j + 2].reshape(4, 8)
    assert np.all(mid >= corners.min(axis=0) - 1e-15) and np.all(mid <= corners.max(axis=0) + 1e-15)


def test_lut_interpolation_error(lut):
    rng = make_rng(8)
    la, k = rng.uniform(-0.3, 1.3, 200), rng.uniform(0, 1.25, 200)
    err = np.abs(lut.lookup(la, k) - theoretical_feature_matrix(la, k))
    assert err.max() < 0.01


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.3, 1.3), st.floats(0, 1.25))
def test_lut_lookup_bounded_by_cell(lut, la, k):
    ga, gk = lut.grid_log10_alpha, lut.grid_k
    i = min(np.searchsorted(ga, la, side="right") - 1, ga.size - 2)
    j = min(np.searchsorted(gk, k, side="right") - 1, gk.size - 2)
    corners = lut.table[i:i + 2, j:j + 2].reshape(4, 8)
    v = lut.lookup(la, k)
    assert np.all(v >= corners.min(axis=0) - 1e-12) and np.all(v <= corners.max(axis=0) + 1e-12)
