import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from skimage.metrics import structural_similarity

from refanimate.autoencoder import SemanticEncoder
from refanimate.errors import InvalidArgument
from refanimate.metrics import (PSNR_CAP, SSIM_K1, SSIM_K2, evaluate, frechet_distance,
                                frechet_distance_from_features, fvd_proxy, gaussian_window,
                                perceptual_dist, psnr, ssim)


def _rand(seed, shape=(32, 32, 3)):
    return np.random.default_rng(seed).random(shape)


@pytest.fixture(scope="module")
def encoder():
    torch.manual_seed(0)
    return SemanticEncoder().eval()


# --- SSIM ------------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ssim_matches_reference_implementation(seed):
    a = _rand(seed)
    b = np.clip(a + 0.1 * _rand(seed + 10) - 0.05, 0, 1)
    ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, channel_axis=-1)
    assert abs(ssim(a, b) - ref) < 1e-6


def test_ssim_gray_matches_reference_implementation():
    a, b = _rand(3, (40, 33)), _rand(4, (40, 33))
    ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert abs(ssim(a, b) - ref) < 1e-6


def test_ssim_constant_images_closed_form():
    a, b = np.full((16, 16), 0.2), np.full((16, 16), 0.6)
    c1 = (SSIM_K1 * 1.0) ** 2
    expect = (2 * 0.2 * 0.6 + c1) / (0.2 ** 2 + 0.6 ** 2 + c1)
    assert abs(ssim(a, b) - expect) < 1e-12


def test_ssim_identity_uint8_and_scale():
    a = (255 * _rand(5)).astype(np.uint8)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    b = (255 * _rand(6)).astype(np.uint8)
    assert ssim(a, b) == pytest.approx(ssim(a / 255.0, b / 255.0), abs=1e-12)


@given(st.integers(0, 10_000))
def test_ssim_symmetric_and_bounded(seed):
    a, b = _rand(seed, (12, 12)), _rand(seed + 1, (12, 12))
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1.0 <= s <= 1.0


def test_ssim_rejects_bad_input():
    with pytest.raises(InvalidArgument):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))
    with pytest.raises(InvalidArgument):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))


def test_gaussian_window_normalized():
    w = gaussian_window()
    assert w.shape == (11,) and abs(w.sum() - 1) < 1e-15
    assert np.allclose(w, w[::-1])
    assert w[5] / w[6] == pytest.approx(math.exp(1 / (2 * 1.5 ** 2)), rel=1e-12)


# --- PSNR ------------------------------------------------------------------------

def test_psnr_known_mse():
    a = np.zeros((8, 8, 3))
    b = np.full((8, 8, 3), 0.1)    # MSE = 0.01
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)


def test_psnr_cap_and_recomputation():
    a = _rand(7)
    assert psnr(a, a) == PSNR_CAP
    b = np.clip(a + 0.02 * _rand(8) - 0.01, 0, 1)
    mse = np.mean((a - b) ** 2)
    assert abs(psnr(a, b) - 10 * math.log10(1 / mse)) < 1e-9
    u = (255 * a).astype(np.uint8)
    v = (255 * b).astype(np.uint8)
    mse8 = np.mean((u / 255.0 - v / 255.0) ** 2)
    assert abs(psnr(u, v) - 10 * math.log10(1 / mse8)) < 1e-9


# --- perceptual distance -----------------------------------------------------------

def test_perceptual_identity_and_symmetry(encoder):
    a, b = _rand(9), _rand(10)
    assert perceptual_dist(a, a, encoder) == 0.0
    assert perceptual_dist(a, b, encoder) == perceptual_dist(b, a, encoder)
    assert perceptual_dist(a, b, encoder) > 0


def test_perceptual_deterministic(encoder):
    a, b = _rand(11), _rand(12)
    assert perceptual_dist(a, b, encoder) == perceptual_dist(a.copy(), b.copy(), encoder)


# --- Frechet distance --------------------------------------------------------------

def test_frechet_identical_sets_zero():
    f = np.random.default_rng(0).normal(size=(30, 6))
    assert frechet_distance_from_features(f, f) < 1e-6


def test_frechet_unit_shift():
    rng = np.random.default_rng(1)
    a = rng.normal(0, 1, size=(20_000, 1))
    b = rng.normal(1, 1, size=(20_000, 1))
    assert abs(frechet_distance_from_features(a, b) - 1.0) < 0.05


def test_frechet_diagonal_closed_form():
    mu1, mu2 = np.array([0.0, 1.0, -2.0]), np.array([0.5, 1.0, 0.0])
    v1, v2 = np.array([1.0, 4.0, 0.25]), np.array([2.0, 1.0, 0.25])
    expect = np.sum((mu1 - mu2) ** 2) + np.sum(v1 + v2 - 2 * np.sqrt(v1 * v2))
    assert abs(frechet_distance(mu1, np.diag(v1), mu2, np.diag(v2)) - expect) < 1e-10


def test_frechet_two_forms_agree_and_symmetric():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(40, 5)), rng.normal(0.3, 1.5, size=(50, 5))
    d = frechet_distance_from_features(a, b)
    moments = frechet_distance(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))
    assert abs(d - moments) < 1e-8
    assert abs(d - frechet_distance_from_features(b, a)) < 1e-10


def test_frechet_needs_two_samples():
    with pytest.raises(InvalidArgument):
        frechet_distance_from_features(np.zeros((1, 3)), np.zeros((5, 3)))


def test_fvd_proxy(encoder):
    clips = [[(255 * _rand(20 * c + i)).astype(np.uint8) for i in range(3)] for c in range(3)]
    other = [[(255 * _rand(100 + 20 * c + i)).astype(np.uint8) for i in range(3)] for c in range(3)]
    assert fvd_proxy(clips, clips, encoder) < 1e-6
    assert fvd_proxy(clips, other, encoder) > 0
    with pytest.raises(InvalidArgument):
        fvd_proxy(clips[:1], other, encoder)


def test_evaluate_report(encoder):
    clips = [[(255 * _rand(30 + i)).astype(np.uint8) for i in range(2)] for _ in range(2)]
    rep = evaluate(clips, clips, encoder, "enc")
    assert rep.ssim == pytest.approx(1.0) and rep.psnr == PSNR_CAP
    assert rep.perceptual_dist == 0.0 and rep.fvd_proxy < 1e-6
    assert len(rep.per_frame) == 4
    d = json.loads(json.dumps(rep.to_json()))
    assert d["config"]["encoder_id"] == "enc"
    single = evaluate(clips[:1], clips[:1], encoder)
    assert single.fvd_proxy is None
    with pytest.raises(InvalidArgument):
        evaluate(clips, clips[:1], encoder)
