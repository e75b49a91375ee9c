import json
import math
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from hkest.benchkit import (EvalReport, GridResult, TrainingSet, cell_rrmse, error_maps,
                            evaluate_grid, gen_test_grid, gen_theory_set, gen_training_set,
                            grid_params, load_float_grid, mae, median_iqr, parametric_image,
                            patch_origins, rrmse, summarize, synthetic_phantom, wilcoxon_signed)
from hkest.estimators import XUEstimator
from hkest.features import FeatureNorm
from hkest.hkmodel import HKParams, make_rng, sample_iid
from hkest.neural import BNNEstimator, init_bayes

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def small_grid():
    return gen_test_grid(64, 0.2, 3)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def test_empty_training_set(lut):
    ts = gen_training_set(0, 256, 0.2, 1, lut)
    assert len(ts) == 0 and ts.noisy.shape == (0, 8)


def test_training_set_file_is_reproducible(lut, tmp_path):
    for name in ("a.npz", "b.npz"):
        gen_training_set(50, 256, 0.2, 11, lut).save(tmp_path / name)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    back = TrainingSet.load(tmp_path / "a.npz")
    assert back.ns == 256 and back.rho == 0.2 and back.noisy.shape == (50, 8)


def test_training_set_contents(lut):
    ts = gen_training_set(40, 1024, 0.2, 12, lut)
    assert np.all((ts.params[:, 0] >= -0.3) & (ts.params[:, 0] <= 1.3))
    assert np.all((ts.params[:, 1] >= 0) & (ts.params[:, 1] <= 1.25))
    assert np.array_equal(ts.theory, lut.lookup(ts.params[:, 0], ts.params[:, 1]))


def test_residual_shrinks_with_sample_size(lut):
    res = {ns: gen_training_set(10_000, ns, 0.2, 13, lut) for ns in (256, 4096)}
    sd = {ns: (ts.noisy - ts.theory).std(axis=0) for ns, ts in res.items()}
    assert np.all(sd[256] > sd[4096])


def test_theory_set(lut):
    ts = gen_theory_set(400, 14, lut)
    assert len(ts) == 400 and np.array_equal(ts.noisy, ts.theory)
    assert np.all((ts.params[:, 1] >= 0) & (ts.params[:, 1] <= 1.25))


def test_grid_shape_and_endpoints(small_grid):
    g = small_grid
    assert len(g) == 3410 and g.features.shape == (3410, 8)
    assert (g.alphas[0], g.alphas[-1], g.ks[0], g.ks[-1]) == (-0.3, 1.3, 0.0, 1.25)
    # Alpha-major, then k, then realization.
    assert np.array_equal(g.params[:10], np.tile([-0.3, 0.0], (10, 1)))
    assert np.array_equal(g.params[10], [-0.3, 0.125])
    assert np.array_equal(g.cell_index()[-1], [30, 10, 9])


def test_grid_seeds(small_grid):
    other = gen_test_grid(64, 0.2, 4)
    assert np.array_equal(other.params, small_grid.params)
    assert not np.any(np.all(other.features == small_grid.features, axis=1))
    again = gen_test_grid(64, 0.2, 3)
    assert np.array_equal(again.features, small_grid.features)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def test_metric_examples():
    assert mae([1, 2], [1, 2]) == 0.0 and rrmse([1, 2], [1, 2]) == 0.0
    assert mae([1.0], [1.05]) == pytest.approx(0.05)
    assert rrmse([1.0], [1.05]) == pytest.approx(math.sqrt(0.0025 / 1.05))
    assert rrmse([1.0], [1.05]) == pytest.approx(0.0488, abs=1e-4)
    with pytest.raises(ValueError):
        mae([1, 2], [1])
    with pytest.raises(ValueError):
        rrmse([], [])


def test_median_iqr():
    med, q1, q3 = median_iqr(np.arange(101.0))
    assert (med, q1, q3) == (50.0, 25.0, 75.0)


# ---------------------------------------------------------------------------
# Signed-rank test
# ---------------------------------------------------------------------------

WILCOXON = json.loads((FIXTURES / "wilcoxon_exact.json").read_text())


@pytest.mark.parametrize("case", WILCOXON, ids=[c["name"] for c in WILCOXON])
def test_wilcoxon_exact_enumeration(case):
    r = wilcoxon_signed(case["a"], case["b"])
    assert r.method == "exact" and r.n == len(case["a"])
    assert r.pvalue == case["pvalue"]
    assert r.statistic == case["w_plus"]
    if "table_pvalue" in case:
        assert r.pvalue == pytest.approx(case["table_pvalue"], abs=1e-3)


def test_wilcoxon_matches_scipy_exact():
    for case in WILCOXON:
        ref = stats.wilcoxon(case["a"], case["b"], method="exact").pvalue
        assert wilcoxon_signed(case["a"], case["b"]).pvalue == pytest.approx(ref, rel=1e-12)


def test_wilcoxon_degenerate_and_shift():
    x = make_rng(1).standard_normal(20)
    r = wilcoxon_signed(x, x)
    assert r.pvalue == 1.0 and r.method == "degenerate"
    r = wilcoxon_signed(x + 0.5 + 0.01 * np.arange(20), x)
    assert r.method == "exact" and r.pvalue < 0.001
    assert r.pvalue == pytest.approx(2.0 / 2 ** 20)


def test_wilcoxon_normal_with_ties():
    rng = make_rng(2)
    a = rng.integers(0, 6, 60).astype(float)
    b = rng.integers(0, 6, 60).astype(float) + 0.5 * rng.integers(0, 2, 60)
    r = wilcoxon_signed(a, b)
    ref = stats.wilcoxon(a, b, zero_method="wilcox", correction=False, method="approx").pvalue
    assert r.method == "normal" and r.pvalue == pytest.approx(ref, rel=1e-10)


def test_wilcoxon_large_n():
    rng = make_rng(3)
    a, b = rng.standard_normal(200), rng.standard_normal(200) + 0.1
    ref = stats.wilcoxon(a, b, correction=False, method="approx").pvalue
    assert wilcoxon_signed(a, b).pvalue == pytest.approx(ref, rel=1e-10)
    with pytest.raises(ValueError):
        wilcoxon_signed([1, 2, 3], [1, 2])


# ---------------------------------------------------------------------------
# Grid evaluation
# ---------------------------------------------------------------------------

def test_error_maps_perfect_and_constant(small_grid):
    perfect = GridResult("perfect", small_grid, small_grid.params.copy())
    maps = error_maps(perfect)
    assert maps["mae_log10_alpha"].shape == (31, 11)
    assert all(np.all(m == 0) for m in maps.values())
    const = GridResult("const", small_grid, np.tile([0.5, 0.6], (3410, 1)))
    maps = error_maps(const)
    assert np.all(maps["var_k"] == 0) and np.all(maps["var_log10_alpha"] == 0)
    assert maps["mae_k"][0, 0] == pytest.approx(0.6)


def test_error_maps_incomplete(small_grid):
    with pytest.raises(ValueError):
        error_maps(GridResult("x", small_grid, small_grid.params[:100]))
    est = small_grid.params.copy()
    est[7, 0] = np.nan
    with pytest.raises(ValueError):
        error_maps(GridResult("x", small_grid, est))


def test_cell_rrmse(small_grid):
    est = small_grid.params + 0.1
    rr = cell_rrmse(GridResult("s", small_grid, est))
    assert rr.shape == (31, 11, 2)
    assert rr[0, 0, 1] == pytest.approx(0.1 / math.sqrt(0.05))


def test_summary_and_report(small_grid, lut, tmp_path):
    xu = evaluate_grid(small_grid, XUEstimator(lut))
    noisy = GridResult("shift", small_grid, np.clip(xu.est + 0.05, [-0.3, 0], [1.3, 1.25]))
    s = summarize(xu)
    assert s["cases"] == 3410
    for key in ("mae_log10_alpha", "mae_k", "rrmse_log10_alpha", "rrmse_k"):
        assert s[key]["q1"] <= s[key]["median"] <= s[key]["q3"]
    rep = EvalReport.build([xu, noisy])
    assert list(rep.pvalues) == ["xu|shift|64|0.2"]
    paths = []
    for tag in ("a", "b"):
        c, j = tmp_path / f"{tag}.csv", tmp_path / f"{tag}.json"
        EvalReport.build([xu, noisy]).write(c, j)
        paths.append((c.read_bytes(), j.read_bytes()))
    assert paths[0] == paths[1]
    doc = json.loads(paths[0][1])
    assert "median_convention" in doc["summaries"][0]
    assert paths[0][0].count(b"\n") == 1 + 2 * 3410


# ---------------------------------------------------------------------------
# Parametric images
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("shape,patch", [((100, 90), (10, 9)), ((64, 64), (16, 16)),
                                         ((50, 77), (7, 11))])
def test_zero_overlap_patch_count(shape, patch):
    rows, cols = patch_origins(shape, patch, 0.0)
    assert rows.size == shape[0] // patch[0] and cols.size == shape[1] // patch[1]


@pytest.mark.parametrize("shape,patch", [((100, 90), (10, 9)), ((131, 77), (32, 20)),
                                         ((40, 40), (40, 40))])
def test_default_overlap_covers_image(shape, patch, lut):
    env = sample_iid(HKParams(0.5, 0.5), shape[0] * shape[1], 1).values.reshape(shape)
    img = parametric_image(env, patch, XUEstimator(lut))
    assert img.coverage(shape).min() >= 1


def test_parametric_image_errors(lut):
    env = np.ones((20, 20))
    with pytest.raises(ValueError):
        parametric_image(env, (21, 5), XUEstimator(lut))
    env[3, 3] = 0.0
    with pytest.raises(ValueError):
        parametric_image(env, (5, 5), XUEstimator(lut))
    with pytest.raises(ValueError):
        patch_origins((20, 20), (5, 5), 0.99)


def test_homogeneous_image(lut):
    p = HKParams(0.5, 0.5)
    env = sample_iid(p, 512 * 512, 21).values.reshape(512, 512)
    img = parametric_image(env, (32, 32), XUEstimator(lut), overlap=0.0)
    assert img.log10_alpha.shape == (16, 16) and img.uncertainty is None
    # Per-patch median within the typical XU error at 1024 samples.
    assert abs(np.median(img.log10_alpha) - 0.5) < 0.105
    assert abs(np.median(img.k) - 0.5) < 0.071


def test_two_region_phantom(lut):
    env, labels = synthetic_phantom((256, 256), [(-0.1, 0.3), (1.0, 0.3)], 0.2, 22)
    assert labels[:, :128].max() == 0 and labels[:, 128:].min() == 1
    img = parametric_image(env, (32, 32), XUEstimator(lut), overlap=0.0)
    left, right = img.log10_alpha[:, :4].ravel(), img.log10_alpha[:, 4:].ravel()
    assert np.percentile(left, 75) < np.percentile(right, 25)


def test_bayesian_image_and_file(lut, tmp_path):
    net = init_bayes([8, 8, 2], FeatureNorm(lut.table.reshape(-1, 8).mean(0),
                                            lut.table.reshape(-1, 8).std(0)),
                     np.array([0.5, 0.6]), np.array([0.4, 0.3]), seed=0, mc_passes=5)
    net.rho = [r + 5 for r in net.rho]
    env, _ = synthetic_phantom((64, 64), [(0.5, 0.5), (0.5, 0.5)], 0.0, 23)
    img = parametric_image(env, (16, 16), BNNEstimator(net))
    assert img.uncertainty.shape == img.log10_alpha.shape + (2,)
    assert np.all(img.uncertainty >= 0)
    img.save(tmp_path / "img.f8", method="bnn")
    data, side = load_float_grid(tmp_path / "img.f8")
    assert side["layers"][2:] == ["std_log10_alpha", "std_k"] and side["method"] == "bnn"
    assert np.array_equal(data[0], img.log10_alpha) and np.array_equal(data[3], img.uncertainty[..., 1])


def test_axial_stride(lut):
    env = sample_iid(HKParams(0.5, 0.5), 64 * 64, 2).values.reshape(64, 64)
    a = parametric_image(env, (32, 32), XUEstimator(lut), overlap=0.0, stride=2)
    b = parametric_image(env[::2], (16, 32), XUEstimator(lut), overlap=0.0)
    assert np.array_equal(a.log10_alpha, b.log10_alpha)


def test_grid_params_helper():
    ga, gk, params = grid_params(3, 2, 1)
    assert params.tolist() == [[-0.3, 0.0], [-0.3, 1.25], [0.5, 0.0], [0.5, 1.25],
                               [1.3, 0.0], [1.3, 1.25]]
    assert ga.size == 3 and gk.size == 2
