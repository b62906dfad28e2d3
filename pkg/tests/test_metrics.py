import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uvflow import metrics as mt
from uvflow import toyfaces as tf


def test_psnr_identical_is_inf():
    a = np.random.default_rng(0).random((8, 8, 3))
    assert mt.psnr(a, a) == math.inf


def test_psnr_uniform_difference():
    a = np.full((16, 16, 3), 0.4)
    assert abs(mt.psnr(a, a + 0.1) - 20.0) < 1e-9


def test_psnr_matches_direct_recomputation():
    rng = np.random.default_rng(1)
    a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
    mse = sum((x - y) ** 2 for x, y in zip(a.ravel().tolist(), b.ravel().tolist())) / a.size
    assert abs(mt.psnr(a, b) - 10 * math.log10(1 / mse)) < 1e-9


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        mt.psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_ssim_identical_is_one():
    a = np.random.default_rng(2).random((32, 32, 3))
    assert abs(mt.ssim(a, a) - 1.0) < 1e-12


def test_ssim_inverted_checkerboard_negative():
    a = (np.indices((32, 32)).sum(0) % 2).astype(float)
    m = mt.ssim_map(a, 1 - a)
    assert mt.ssim(a, 1 - a) < 0
    assert m.min() < -0.99


def test_ssim_constants_closed_form():
    a, b = np.full((20, 20), 0.3), np.full((20, 20), 0.5)
    expect = (2 * 0.3 * 0.5 + mt.C1) / (0.3**2 + 0.5**2 + mt.C1)
    assert abs(mt.ssim(a, b) - expect) < 1e-12


def test_ssim_small_image_rejected():
    with pytest.raises(ValueError):
        mt.ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ssim_matches_independent_loop():
    rng = np.random.default_rng(3)
    a, b = rng.random((14, 14)), rng.random((14, 14))
    x = np.arange(11) - 5
    g = np.exp(-(x**2) / (2 * 1.5**2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    vals = []
    for i in range(4):
        for j in range(4):
            pa, pb = a[i: i + 11, j: j + 11], b[i: i + 11, j: j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va, vb = (w * (pa - ma) ** 2).sum(), (w * (pb - mb) ** 2).sum()
            cv = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + mt.C1) * (2 * cv + mt.C2) / ((ma**2 + mb**2 + mt.C1) * (va + vb + mt.C2)))
    assert abs(mt.ssim(a, b) - np.mean(vals)) < 1e-10


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    mask = rng.random((16, 16)) > 0.5
    mask[0, 0] = True
    assert mt.psnr(a, b) == mt.psnr(b, a)
    assert abs(mt.ssim(a, b) - mt.ssim(b, a)) < 1e-12
    assert mt.masked_l2(a, b, mask) == mt.masked_l2(b, a, mask)
    assert mt.palette_hist_distance(a, b) == mt.palette_hist_distance(b, a)


@settings(max_examples=25, deadline=None)
@given(d1=st.floats(0.001, 0.5), d2=st.floats(0.001, 0.5))
def test_psnr_monotone_in_mse(d1, d2):
    a = np.full((4, 4), 0.25)
    p1, p2 = mt.psnr(a, a + d1), mt.psnr(a, a + d2)
    assert (d1 < d2) <= (p1 >= p2)


def test_masked_l2_empty_mask_rejected():
    with pytest.raises(ValueError):
        mt.masked_l2(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.zeros((4, 4), bool))


def test_identical_images_zero_distance():
    a = np.random.default_rng(4).random((16, 16, 3))
    assert mt.masked_l2(a, a, np.ones((16, 16), bool)) == 0
    assert mt.palette_hist_distance(a, a) == 0


def test_lip_color_only_changes_mouth_region():
    p = tf.FaceParams()
    q = tf.FaceParams(mouth=tf.Mouth(lip_color=(0.5, 0.1, 0.6)))
    a, b = tf.render_texture(p), tf.render_texture(q)
    m = tf.region_masks()
    assert mt.masked_l2(a, b, m.mouth_mask) > 0
    assert mt.masked_l2(a, b, m.brow_mask) == 0


def test_palette_histogram_oracle():
    a = np.zeros((2, 2, 3))
    b = np.zeros((2, 2, 3))
    b[0, 0] = 1.0
    # one of four pixels moves to another bin: L1 = 0.25 + 0.25
    assert abs(mt.palette_hist_distance(a, b) - 0.5) < 1e-12


def test_metric_report_aggregates():
    rng = np.random.default_rng(5)
    preds, gts = rng.random((3, 16, 16, 3)), rng.random((3, 16, 16, 3))
    rep = mt.evaluate_pairs(preds, gts, ["a", "b", "c"], masks={"all": np.ones((16, 16), bool)})
    for k, vals in rep.per_sample.items():
        assert rep.aggregate[k] == pytest.approx(np.mean(vals))
    assert rep.per_sample["psnr"][1] == mt.psnr(preds[1], gts[1])
    assert len(list(rep.rows())) == 3 and len(rep.config_digest) == 16
