import numpy as np
import pytest

from hkest.estimators import (EstimateArrays, OPEstimator, PSOConfig, XUEstimator, clamp_to_box,
                              concat_estimates, estimate_batch, estimate_op, estimate_parallel,
                              estimate_xu, lut_norm)
from hkest.features import compute_features
from hkest.forward import theoretical_feature_matrix, theoretical_features
from hkest.hkmodel import HKParams, make_rng, sample_iid


@pytest.fixture(scope="module")
def round_trip(lut):
    rng = make_rng(31)
    p = np.column_stack([rng.uniform(-0.3, 1.3, 200), rng.uniform(0, 1.25, 200)])
    return p, theoretical_feature_matrix(p[:, 0], p[:, 1])


def test_xu_recovers_point(lut):
    e = estimate_xu(theoretical_features(HKParams(0.5, 0.5)), lut)
    assert abs(e.params.log10_alpha - 0.5) < 0.02 and abs(e.params.k - 0.5) < 0.02
    assert e.converged and e.diagnostics["multiplicity"] == 1


def test_xu_zero_k(lut):
    for la in (-0.2, 0.4, 1.1):
        e = estimate_xu(theoretical_features(HKParams(la, 0.0)), lut)
        assert e.params.k <= 0.05


def test_xu_round_trip(lut, round_trip):
    p, F = round_trip
    res = XUEstimator(lut).estimate_many(F)
    inner = (p[:, 0] > -0.25) & (p[:, 0] < 1.25) & (p[:, 1] > 0.05) & (p[:, 1] < 1.2)
    err = np.abs(res.params_array() - p)[inner]
    assert np.all(err < 0.05)
    assert np.all(res.extra["multiplicity"][inner] == 1)


def test_op_round_trip(lut, round_trip):
    p, F = round_trip
    res = OPEstimator(lut, seed=3).estimate_many(F[:100])
    ok = (np.all(np.abs(res.params_array() - p[:100]) < 0.02, axis=1)
          & (res.residual < 1e-3))
    assert ok.mean() >= 0.95


def test_op_deterministic_and_chunk_free(lut):
    rng = make_rng(32)
    F = compute_features_batch(rng, 30)
    a = OPEstimator(lut, seed=4).estimate_many(F)
    b = OPEstimator(lut, seed=4).estimate_many(F)
    c = OPEstimator(lut, seed=4).estimate_many(F, chunk=7)
    assert np.array_equal(a.params_array(), b.params_array())
    assert np.array_equal(a.params_array(), c.params_array())
    single = estimate_op(F[5], lut, seed=4)
    assert single.params.log10_alpha == a.log10_alpha[5] and single.params.k == a.k[5]


def test_op_estimates_in_box(lut):
    F = compute_features_batch(make_rng(33), 40, ns=64)
    res = OPEstimator(lut, PSOConfig(particles=10, iterations=30), seed=1).estimate_many(F)
    assert np.all((res.log10_alpha >= -0.3) & (res.log10_alpha <= 1.3))
    assert np.all((res.k >= 0) & (res.k <= 1.25))


def test_op_requires_forward_or_lut():
    with pytest.raises(ValueError):
        OPEstimator()


def test_lut_norm(lut):
    n = lut_norm(lut)
    z = n.apply(lut.table.reshape(-1, 8))
    assert np.allclose(z.mean(axis=0), 0, atol=1e-10) and np.allclose(z.std(axis=0), 1)


def compute_features_batch(rng, n, ns=1024):
    rows = []
    for i in range(n):
        p = HKParams(rng.uniform(-0.3, 1.3), rng.uniform(0, 1.25))
        rows.append(compute_features(sample_iid(p, ns, int(rng.integers(1 << 30)))).to_array())
    return np.array(rows)


def test_scale_invariance_end_to_end(lut):
    s = sample_iid(HKParams(0.3, 0.6), 2048, 5)
    f1 = compute_features(s).to_array()
    f2 = compute_features(s.scaled(3.7)).to_array()
    for est in (XUEstimator(lut), OPEstimator(lut, seed=0)):
        a, b = est.estimate(f1), est.estimate(f2)
        assert abs(a.params.log10_alpha - b.params.log10_alpha) < 1e-9
        assert abs(a.params.k - b.params.k) < 1e-9


def test_batch_semantics(lut):
    F = compute_features_batch(make_rng(34), 12)
    xu = XUEstimator(lut)
    assert len(estimate_batch([], xu)) == 0
    full = estimate_batch(list(F), xu)
    single = xu.estimate(F[3])
    assert full.estimates[3].params == single.params
    perm = make_rng(35).permutation(12)
    shuffled = estimate_batch(list(F[perm]), xu)
    for i, j in enumerate(perm):
        assert shuffled.estimates[i].params == full.estimates[j].params


def test_batch_isolates_bad_rows(lut):
    F = compute_features_batch(make_rng(36), 5)
    rows = list(F)
    rows[2] = np.zeros(7)
    res = estimate_batch(rows, XUEstimator(lut))
    assert list(res.errors) == [2] and res.estimates[2] is None
    assert all(res.estimates[i] is not None for i in (0, 1, 3, 4))


def test_nonfinite_row_flagged(lut):
    F = compute_features_batch(make_rng(37), 3)
    F[1, 6] = np.nan
    res = XUEstimator(lut).estimate_many(F)
    assert np.isnan(res.log10_alpha[1]) and not res.converged[1]
    assert np.all(np.isfinite(res.log10_alpha[[0, 2]]))


def test_parallel_matches_serial(lut):
    F = compute_features_batch(make_rng(38), 40)
    for est in (XUEstimator(lut), OPEstimator(lut, PSOConfig(iterations=40), seed=2)):
        a = est.estimate_many(F)
        b = estimate_parallel(est, F, threads=3, chunk=9)
        assert np.array_equal(a.params_array(), b.params_array())


def test_concat_and_clamp():
    a = EstimateArrays(np.array([0.1]), np.array([0.2]), extra={"m": np.array([1])})
    b = EstimateArrays(np.array([0.3]), np.array([0.4]), extra={"m": np.array([2])})
    c = concat_estimates([a, b])
    assert c.k.tolist() == [0.2, 0.4] and c.extra["m"].tolist() == [1, 2] and c.converged is None
    la, k = clamp_to_box(np.array([-1.0, 2.0]), np.array([-0.1, 3.0]))
    assert la.tolist() == [-0.3, 1.3] and k.tolist() == [0.0, 1.25]


def test_input_shape_errors(lut):
    with pytest.raises(ValueError):
        XUEstimator(lut).estimate_many(np.zeros((3, 5)))
    with pytest.raises(ValueError):
        XUEstimator(lut).estimate(np.zeros((2, 8)))
