import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from evgs.losses import (
    LossReport,
    LossWeights,
    aligned_metrics,
    event_loss,
    event_loss_grad,
    log_affine_align,
    luminance,
    prior_l1_grad,
    prior_l1_loss,
    psnr,
    reg_loss,
    reg_loss_grad,
    ssim,
    total_loss,
)

EPS = 1e-3
seeds = st.integers(0, 2**32 - 1)


def rand_img(rng, h=16, w=16, lo=0.0, hi=1.0):
    return rng.uniform(lo, hi, (h, w, 3))


def skimage_ssim(a, b):
    return structural_similarity(a, b, win_size=11, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False, data_range=1.0, channel_axis=-1)


# event loss --------------------------------------------------------------------

def test_event_loss_zero_on_consistent_pair():
    rng = np.random.default_rng(0)
    i1 = rand_img(rng)
    frame = rng.normal(0, 0.2, (16, 16))
    # build I_t2 with lum(I_t2) + eps = (lum(I_t1) + eps) * exp(E): scale the gray image
    target = (luminance(i1) + EPS) * np.exp(frame) - EPS
    i2 = np.repeat(target[..., None], 3, axis=2)
    i1g = np.repeat(luminance(i1)[..., None], 3, axis=2)
    assert event_loss(i1g, i2, frame) <= 1e-12


def test_event_loss_single_residual():
    img = np.full((10, 12, 3), 0.3)
    frame = np.zeros((10, 12))
    frame[4, 5] = 0.1
    assert event_loss(img, img, frame) == pytest.approx(0.01 / 120, rel=1e-12)


def test_event_loss_brute_force():
    rng = np.random.default_rng(1)
    i1, i2 = rand_img(rng, 8, 8), rand_img(rng, 8, 8)
    frame = rng.normal(0, 0.3, (8, 8))
    total = 0.0
    for y in range(8):
        for x in range(8):
            l1 = 0.299 * i1[y, x, 0] + 0.587 * i1[y, x, 1] + 0.114 * i1[y, x, 2]
            l2 = 0.299 * i2[y, x, 0] + 0.587 * i2[y, x, 1] + 0.114 * i2[y, x, 2]
            total += (np.log(l2 + EPS) - np.log(l1 + EPS) - frame[y, x]) ** 2
    assert event_loss(i1, i2, frame) == pytest.approx(total / 64, abs=1e-12)


def test_event_loss_sign_convention():
    dark, bright = np.full((4, 4, 3), 0.2), np.full((4, 4, 3), 0.2 * np.e)
    up = np.ones((4, 4))
    assert event_loss(dark, bright, up) < event_loss(bright, dark, up)


def test_event_loss_shape_mismatch():
    with pytest.raises(ValueError):
        event_loss(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.zeros((4, 5)))


def test_event_loss_gradient_finite_differences():
    rng = np.random.default_rng(2)
    i1, i2 = rand_img(rng, 6, 5, 0.05), rand_img(rng, 6, 5, 0.05)
    frame = rng.normal(0, 0.2, (6, 5))
    _, g1, g2 = event_loss_grad(i1, i2, frame)
    h = 1e-7
    for img, g in ((i1, g1), (i2, g2)):
        for idx in np.ndindex(img.shape):
            up, dn = img.copy(), img.copy()
            up[idx] += h
            dn[idx] -= h
            args_up = (up, i2) if img is i1 else (i1, up)
            args_dn = (dn, i2) if img is i1 else (i1, dn)
            fd = (event_loss(*args_up, frame) - event_loss(*args_dn, frame)) / (2 * h)
            assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)


@given(seeds)
def test_event_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    assert event_loss(rand_img(rng, 5, 5), rand_img(rng, 5, 5), rng.normal(size=(5, 5))) >= 0


# prior L1 --------------------------------------------------------------------------

def test_prior_l1_examples():
    a = np.full((4, 4, 3), 0.25)
    assert prior_l1_loss(a, a) == 0
    assert prior_l1_loss(np.zeros((4, 4, 3)), a) == pytest.approx(0.25)


def test_prior_l1_brute_force_and_grad():
    rng = np.random.default_rng(3)
    a, b = rand_img(rng, 7, 6), rand_img(rng, 7, 6)
    assert prior_l1_loss(a, b) == pytest.approx(sum(abs(x - y) for x, y in zip(a.flat, b.flat)) / a.size,
                                                abs=1e-12)
    _, g = prior_l1_grad(a, b)
    np.testing.assert_allclose(g, np.sign(b - a) / a.size)


def test_prior_l1_shape_mismatch():
    with pytest.raises(ValueError):
        prior_l1_loss(np.zeros((4, 4, 3)), np.zeros((4, 4, 1)))


# SSIM ------------------------------------------------------------------------------

def test_ssim_identity():
    rng = np.random.default_rng(4)
    for _ in range(10):
        img = rand_img(rng, 20, 24)
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)


def test_ssim_constant_images_closed_form():
    c1 = 0.01 ** 2
    assert ssim(np.zeros((16, 16, 3)), np.ones((16, 16, 3))) == pytest.approx(c1 / (1 + c1), abs=1e-6)
    assert reg_loss(np.zeros((16, 16, 3)), np.ones((16, 16, 3))) == pytest.approx(1 - c1 / (1 + c1),
                                                                                abs=1e-6)


def test_ssim_matches_skimage():
    rng = np.random.default_rng(5)
    for _ in range(5):
        a, b = rand_img(rng, 32, 32), rand_img(rng, 32, 32)
        assert ssim(a, b) == pytest.approx(skimage_ssim(a, b), abs=1e-6)
        smooth = a * 0.7 + 0.3 * np.roll(a, 1, axis=0)
        assert ssim(a, smooth) == pytest.approx(skimage_ssim(a, smooth), abs=1e-6)


def test_ssim_small_image_rejected():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 32, 3)), np.zeros((10, 32, 3)))


@given(seeds)
def test_ssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rand_img(rng, 12, 13), rand_img(rng, 12, 13)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert ssim(a, b) <= 1 + 1e-9


def test_reg_loss_is_one_minus_ssim():
    rng = np.random.default_rng(6)
    for _ in range(100):
        a, b = rand_img(rng, 11, 11), rand_img(rng, 11, 11)
        assert reg_loss(a, b) == 1.0 - ssim(a, b)
    assert reg_loss(a, a) == pytest.approx(0.0, abs=1e-12)


def test_reg_loss_gradient_finite_differences():
    rng = np.random.default_rng(7)
    a, b = rand_img(rng, 13, 12), rand_img(rng, 13, 12)
    _, g = reg_loss_grad(a, b)
    h = 1e-6
    for idx in list(np.ndindex(b.shape))[::7]:
        up, dn = b.copy(), b.copy()
        up[idx] += h
        dn[idx] -= h
        fd = (reg_loss(a, up) - reg_loss(a, dn)) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-10)


# total loss --------------------------------------------------------------------------

def test_total_loss_default_weights():
    assert total_loss(1.0, 1.0) == 0.022
    assert total_loss(0.0, 0.0) == 0.0


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10))
def test_total_loss_linear_and_monotone(e, r, d):
    w = LossWeights()
    assert total_loss(e, r, w) == pytest.approx(w.lambda_event * e + w.lambda_reg * r, rel=1e-15)
    assert total_loss(e + d, r) >= total_loss(e, r)
    assert total_loss(e, r + d) >= total_loss(e, r)


@pytest.mark.parametrize("kw", [dict(lambda_event=-1.0), dict(lambda_reg=-0.1), dict(log_epsilon=0.0)])
def test_loss_weights_validated(kw):
    with pytest.raises(ValueError):
        LossWeights(**kw)


def test_log_record_keys():
    rec = LossReport(3, 0.1, 0.2, 0.0, 0.3).to_log_record()
    assert list(rec) == ["iter", "event", "reg", "prior_l1", "total"]


# PSNR and alignment ------------------------------------------------------------------

def test_psnr_examples():
    a = np.random.default_rng(8).uniform(size=(8, 8, 3))
    assert psnr(a, a) == 100.0
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-9)


def test_psnr_brute_force():
    rng = np.random.default_rng(9)
    a, b = rand_img(rng), rand_img(rng)
    mse = sum((x - y) ** 2 for x, y in zip(a.flat, b.flat)) / a.size
    assert psnr(a, b) == pytest.approx(10 * np.log10(1 / mse), abs=1e-9)


def test_align_identity():
    ref = rand_img(np.random.default_rng(10), 32, 32)
    out, fit = log_affine_align(ref, ref, return_fit=True)
    np.testing.assert_allclose(out, ref, atol=1e-9)
    np.testing.assert_allclose(fit.scale, 1.0, atol=1e-12)
    np.testing.assert_allclose(fit.offset, 0.0, atol=1e-12)


def test_align_removes_exposure_shift():
    ref = rand_img(np.random.default_rng(11), 32, 32, lo=EPS)
    # half the exposure in the offset log domain the fit works in
    pred = 0.5 * (ref + EPS) - EPS
    out = log_affine_align(pred, ref)
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_align_removes_gamma():
    # lower bound keeps the distorted image nonnegative
    ref = rand_img(np.random.default_rng(12), 32, 32, lo=0.04)
    pred = (ref + EPS) ** 2 - EPS
    assert psnr(log_affine_align(pred, ref), ref) >= 60


def test_align_plain_gamma_on_bright_content():
    # plain power law, content well above the log offset
    ref = rand_img(np.random.default_rng(13), 32, 32, lo=0.2)
    assert psnr(ref ** 2, ref) < 25
    assert psnr(log_affine_align(ref ** 2, ref), ref) >= 60


def test_align_constant_prediction_is_flagged():
    ref = rand_img(np.random.default_rng(14), 16, 16)
    out, fit = log_affine_align(np.full((16, 16, 3), 0.3), ref, return_fit=True)
    assert fit.degenerate.all()
    np.testing.assert_allclose(out.reshape(-1, 3).std(axis=0), 0.0, atol=1e-15)
    assert aligned_metrics(np.full((16, 16, 3), 0.3), ref)["degenerate_fit"]


def test_align_rejects_negative():
    with pytest.raises(ValueError):
        log_affine_align(-np.ones((4, 4, 3)), np.ones((4, 4, 3)))


@given(seeds, st.floats(0.3, 3.0), st.floats(-2.0, 2.0))
def test_aligned_psnr_invariant_to_log_affine_distortion(seed, a, b):
    rng = np.random.default_rng(seed)
    ref = rand_img(rng, 16, 16)
    pred = np.clip(ref + rng.normal(0, 0.05, ref.shape), 0, 1)
    distorted = np.exp(a * np.log(pred + EPS) + b) - EPS
    if distorted.min() < 0:
        return
    # a distortion that pushes values past 1 is clipped by the alignment output only
    base = psnr(log_affine_align(pred, ref), ref)
    assert psnr(log_affine_align(distorted, ref), ref) == pytest.approx(base, abs=1e-6)
