import math

import pytest

import numpy as np

from self_diffusion.metrics import (
    MetricError,
    capped,
    evaluate,
    nrmse,
    psnr,
    relative_change,
    ssim,
    ssim_terms,
)

from tests.util import Array


def test_psnr_known_value() -> None:
    ref = np.ones((4, 4))
    assert psnr(ref + 0.1, ref) == pytest.approx(20.0)
    assert psnr(ref + 0.1, ref, peak=10.0) == pytest.approx(40.0)


def test_psnr_identical_is_infinite_and_capped() -> None:
    ref = np.linspace(0, 1, 10)
    assert psnr(ref, ref) == math.inf
    assert capped(psnr(ref, ref)) == 99.0


def test_psnr_rejects_zero_peak_and_shape_mismatch() -> None:
    with pytest.raises(MetricError):
        psnr(np.ones(3), np.zeros(3))
    with pytest.raises(MetricError):
        psnr(np.ones(3), np.ones(4))


def test_ssim_of_identical_images_is_one(test_image: Array) -> None:
    assert ssim(test_image, test_image, peak=1.0) == pytest.approx(1.0)
    terms = ssim_terms(test_image, test_image, peak=1.0)
    assert terms.luminance == pytest.approx(1.0)
    assert terms.contrast_structure == pytest.approx(1.0)


def test_ssim_drops_with_noise(test_image: Array) -> None:
    noisy = test_image + np.random.default_rng(0).normal(0, 0.1, test_image.shape)
    value = ssim(noisy, test_image, peak=1.0)
    assert 0.0 < value < 0.95


def test_ssim_of_an_inverted_binary_image_is_low() -> None:
    binary = (np.random.default_rng(3).random((32, 32)) < 0.5).astype(np.float64)
    assert ssim(1.0 - binary, binary, peak=1.0) < 0.2


def test_brightness_shift_only_costs_luminance(test_image: Array) -> None:
    small = ssim_terms(test_image + 0.1, test_image, peak=1.0)
    large = ssim_terms(test_image + 0.3, test_image, peak=1.0)
    assert small.contrast_structure == pytest.approx(1.0, abs=1e-9)
    assert large.contrast_structure == pytest.approx(1.0, abs=1e-9)
    assert 1.0 > small.luminance > large.luminance
    assert 1.0 > small.ssim > large.ssim > 0.0


def test_psnr_matches_the_textbook_formula() -> None:
    rng = np.random.default_rng(11)
    ref = rng.random((16, 16))
    est = ref + rng.normal(0, 0.05, ref.shape)
    mse = sum((a - b) ** 2 for a, b in zip(est.ravel().tolist(), ref.ravel().tolist())) / ref.size
    expected = 20 * math.log10(float(ref.max())) - 10 * math.log10(mse)
    assert psnr(est, ref) == pytest.approx(expected, rel=1e-10)


def test_metrics_ignore_a_joint_rearrangement(test_image: Array) -> None:
    rng = np.random.default_rng(5)
    est = test_image + rng.normal(0, 0.05, test_image.shape)
    order = rng.permutation(test_image.size)
    shuffled_est = est.ravel()[order].reshape(test_image.shape)
    shuffled_ref = test_image.ravel()[order].reshape(test_image.shape)
    assert psnr(shuffled_est, shuffled_ref) == pytest.approx(psnr(est, test_image), rel=1e-12)
    assert nrmse(shuffled_est, shuffled_ref) == pytest.approx(nrmse(est, test_image), rel=1e-12)
    # The Gaussian window is symmetric, so SSIM survives transposes and flips.
    base = ssim(est, test_image, peak=1.0)
    assert ssim(est.T, test_image.T, peak=1.0) == pytest.approx(base, rel=1e-10)
    assert ssim(est[::-1], test_image[::-1], peak=1.0) == pytest.approx(base, rel=1e-10)


def test_ssim_needs_a_full_window() -> None:
    with pytest.raises(MetricError):
        ssim(np.ones((8, 8)), np.ones((8, 8)))
    with pytest.raises(MetricError):
        ssim(np.ones(64), np.ones(64))


def test_nrmse_and_relative_change() -> None:
    ref = np.array([3.0, 4.0])
    assert nrmse(np.array([3.0, 3.0]), ref) == pytest.approx(0.2)
    assert relative_change(np.array([0.0, 2.0]), np.array([0.0, 1.0])) == pytest.approx(0.25)
    with pytest.raises(MetricError):
        nrmse(ref, np.zeros(2))
    with pytest.raises(MetricError):
        relative_change(np.zeros(2), ref)


def test_evaluate_skips_ssim_for_signals(test_image: Array) -> None:
    report = evaluate(np.ones(16), np.ones(16) * 2)
    assert report.ssim is None
    assert report.nrmse == pytest.approx(0.5)
    image_report = evaluate(test_image, test_image, peak=1.0)
    assert image_report.ssim == pytest.approx(1.0)
    assert image_report.csv_fields()[0] == "99.000000"


if __name__ == "__main__":
    test_psnr_known_value()
