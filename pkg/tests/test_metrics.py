import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from growthcast.metrics import (ConfusionMatrix, binarize, confusion, evaluate_tiles, mse, psnr,
                                psnr_from_mse, report_csv, report_table, rmse, ssim, ssim_map)


def test_mse_rmse_examples():
    x = np.random.default_rng(0).random((8, 8))
    assert mse(x, x) == 0
    assert mse(np.zeros((4, 4)), np.ones((4, 4))) == 1 and rmse(np.zeros(4), np.ones(4)) == 1
    a = np.zeros(10)
    b = np.r_[np.ones(5), np.zeros(5)]
    assert mse(a, b) == 0.5
    assert rmse(a, b) == pytest.approx(math.sqrt(0.5), abs=1e-12)
    with pytest.raises(ValueError):
        mse(np.zeros(3), np.zeros(4))


def test_psnr_examples():
    assert psnr_from_mse(0.01) == pytest.approx(20.0, abs=1e-9)
    assert psnr_from_mse(1.0) == 0.0
    x = np.ones((3, 3))
    assert math.isinf(psnr(x, x))


def test_psnr_decreasing_in_mse():
    ladder = np.geomspace(1e-6, 1.0, 50)
    vals = [psnr_from_mse(e) for e in ladder]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_ssim_identity_and_constants():
    x = np.random.default_rng(0).random((3, 20, 20))
    assert ssim(x, x) == 1.0
    c1 = 1e-4
    assert ssim(np.zeros((16, 16)), np.ones((16, 16))) == pytest.approx(c1 / (1 + c1), abs=1e-6)


def test_ssim_symmetric_and_small_input():
    r = np.random.default_rng(1)
    a, b = r.random((24, 24)), r.random((24, 24))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.ones((8, 8)))


def test_ssim_matches_skimage():
    metrics = pytest.importorskip("skimage.metrics")
    r = np.random.default_rng(2)
    for _ in range(5):
        a = r.random((32, 40))
        b = np.clip(a + r.normal(0, 0.2, a.shape), 0, 1)
        ref = metrics.structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                            use_sample_covariance=False)
        # skimage averages a map cropped by (win-1)/2, exactly the valid positions
        assert ssim(a, b) == pytest.approx(ref, abs=1e-6)


def test_ssim_map_shape():
    assert ssim_map(np.zeros((20, 30)), np.zeros((20, 30))).shape == (10, 20)


@settings(max_examples=1000)
@given(st.integers(0, 2**32 - 1))
def test_ssim_bounded(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((2, 12, 12)) ** r.uniform(0.2, 5)
    assert abs(ssim(a, b)) <= 1 + 1e-12


def test_confusion_examples():
    perfect = ConfusionMatrix(np.array([[50, 0], [0, 50]]))
    assert perfect.accuracy == 1 and perfect.kappa == 1
    chance = ConfusionMatrix(np.array([[50, 0], [50, 0]]))
    assert chance.accuracy == 0.5 and chance.kappa == pytest.approx(0.0, abs=1e-12)
    cm = ConfusionMatrix(np.array([[40, 10], [5, 45]]))
    assert cm.accuracy == pytest.approx(0.85, abs=1e-12)
    assert cm.kappa == pytest.approx(0.70, abs=1e-9)


def test_confusion_from_masks_orientation():
    truth = np.array([1, 1, 0, 0, 0])
    pred = np.array([1, 0, 1, 0, 0])
    c = confusion(truth, pred).counts
    np.testing.assert_array_equal(c, [[1, 1], [1, 2]])
    with pytest.raises(ValueError):
        confusion(np.zeros(0), np.zeros(0))
    with pytest.raises(ValueError):
        confusion(np.zeros(3), np.zeros(4))


def test_kappa_one_iff_off_diagonal_zero():
    r = np.random.default_rng(3)
    for _ in range(50):
        c = r.integers(1, 100, (2, 2))
        assert ConfusionMatrix(c).kappa < 1
        c[0, 1] = c[1, 0] = 0
        assert ConfusionMatrix(c).kappa == pytest.approx(1.0)


def test_kappa_zero_for_independent_prediction():
    for pt, pp, n in [(0.3, 0.6, 1000), (0.5, 0.1, 400), (0.8, 0.8, 2500)]:
        outer = np.outer([pt, 1 - pt], [pp, 1 - pp]) * n
        assert ConfusionMatrix(outer).kappa == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=200)
@given(st.lists(st.integers(0, 1000), min_size=4, max_size=4).filter(lambda v: sum(v) > 0))
def test_normalized_rows_sum_to_one(v):
    c = ConfusionMatrix(np.array(v).reshape(2, 2))
    rows = c.normalized().sum(axis=1)
    for total, s in zip(c.counts.sum(axis=1), rows):
        assert s == pytest.approx(1.0 if total else 0.0, abs=1e-9)


def test_binarize_strict():
    np.testing.assert_array_equal(binarize(np.array([0.4, 0.5, 0.6])), [0, 0, 1])


def _tiles(seed=0, n=3):
    r = np.random.default_rng(seed)
    truth = (r.random((n, 1, 16, 16)) > 0.6).astype(np.float64)
    pred = np.clip(truth + r.normal(0, 0.3, truth.shape), 0, 1)
    return truth, pred


def test_report_rmse_is_sqrt_mse_per_tile():
    rep = evaluate_tiles(*_tiles())
    for t in rep.tiles:
        assert t.rmse == math.sqrt(t.mse)
    assert rep.rmse_of_mean_mse == pytest.approx(math.sqrt(rep.mean("mse")))
    assert rep.mean("rmse") <= rep.rmse_of_mean_mse + 1e-15


def test_report_perfect_prediction():
    truth, _ = _tiles()
    rep = evaluate_tiles(truth, truth)
    assert rep.accuracy == 1 and rep.kappa == 1 and rep.mean("mse") == 0
    assert math.isinf(rep.mean("psnr")) and rep.mean("ssim") == 1


def test_report_outputs():
    truth, pred = _tiles()
    reps = [evaluate_tiles(truth, pred, name="convlstm"),
            evaluate_tiles(truth, truth, name="persistence")]
    text = report_csv(reps)
    lines = text.splitlines()
    assert lines[0] == "model,tile,mse,rmse,psnr,ssim"
    assert len(lines) == 1 + 2 * (3 + 2)
    assert "persistence,0,0.0000,0.0000,inf,1.0000" in lines
    table = report_table(reps)
    header = table.splitlines()[0].split()
    assert header == ["SSIM", "PSNR", "RMSE", "MSE"]
    assert "kappa" in table and "truth \\ pred" in table
