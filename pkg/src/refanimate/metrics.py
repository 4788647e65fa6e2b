"""Image and video quality metrics.

``perceptual_dist`` and ``fvd_proxy`` are stand-ins computed with the frozen
semantic encoder of this package. Their values are not comparable to LPIPS
or FVD numbers computed with the usual pretrained networks.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgument

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
PSNR_CAP = 100.0


def _as_float(img) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def _check_pair(a, b):
    a, b = _as_float(a), _as_float(b)
    if a.shape != b.shape:
        raise InvalidArgument(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable 'valid' Gaussian filter over the first two axes."""
    x = sliding_window_view(x, len(k), axis=0) @ k
    return sliding_window_view(x, len(k), axis=1) @ k


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels.

    Inputs are (H, W) or (H, W, C), floats in [0, 1] or uint8.
    """
    a, b = _check_pair(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise InvalidArgument(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    k = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, k), _filter_valid(b, k)
    var_a = _filter_valid(a * a, k) - mu_a ** 2
    var_b = _filter_valid(b * b, k) - mu_b ** 2
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def psnr(a, b, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE); identical inputs return PSNR_CAP."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return 10.0 * math.log10(data_range ** 2 / mse)


def _batch(images) -> torch.Tensor:
    arr = np.stack([_as_float(im) for im in images])
    return torch.from_numpy(arr).float().permute(0, 3, 1, 2)


@torch.no_grad()
def perceptual_dist(a, b, encoder) -> float:
    """Mean squared distance of channel-normalized encoder activations, averaged over stages."""
    a, b = _check_pair(a, b)
    fa = encoder.features(_batch([a]))
    fb = encoder.features(_batch([b]))
    total = 0.0
    for x, y in zip(fa, fb):
        x = x.double() / (x.double().pow(2).sum(1, keepdim=True).sqrt() + 1e-10)
        y = y.double() / (y.double().pow(2).sum(1, keepdim=True).sqrt() + 1e-10)
        total += float((x - y).pow(2).sum(1).mean())
    return total / len(fa)


@torch.no_grad()
def clip_features(clip, encoder) -> np.ndarray:
    """Per-clip vector: [mean frame embedding, mean |frame-to-frame change|].

    A frame embedding is the encoder's tokens averaged over tokens.
    """
    frames = encoder(_batch(clip)).double().mean(1).numpy()    # (T, d)
    motion = (np.abs(np.diff(frames, axis=0)).mean(0) if len(frames) > 1
              else np.zeros(frames.shape[1]))
    return np.concatenate([frames.mean(0), motion])


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)) from explicit moments.

    The trace of the matrix square root is taken as Tr((S1^(1/2) S2 S1^(1/2))^(1/2)),
    whose argument is symmetric PSD, via eigendecompositions.
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    s1, s2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    w, v = np.linalg.eigh(s1)
    root1 = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    m = root1 @ s2 @ root1
    tr_sqrt = np.sqrt(np.clip(np.linalg.eigvalsh(0.5 * (m + m.T)), 0.0, None)).sum()
    d = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt)
    return max(d, 0.0)


def frechet_distance_from_features(fa, fb) -> float:
    """Fréchet distance between Gaussians fitted (unbiased covariance) to two sample sets.

    With S_i = A_i^T A_i, A_i the centered samples over sqrt(n_i - 1), the
    trace term equals the nuclear norm of A2 A1^T. Reduced QR factors
    A_i = Q_i R_i shrink that to the nuclear norm of the small R2 R1^T.
    """
    fa = np.asarray(fa, dtype=np.float64)
    fb = np.asarray(fb, dtype=np.float64)
    if fa.ndim == 1:
        fa = fa[:, None]
    if fb.ndim == 1:
        fb = fb[:, None]
    if len(fa) < 2 or len(fb) < 2:
        raise InvalidArgument("need at least 2 samples per set")
    mu1, mu2 = fa.mean(0), fb.mean(0)
    a1 = (fa - mu1) / math.sqrt(len(fa) - 1)
    a2 = (fb - mu2) / math.sqrt(len(fb) - 1)
    r1 = np.linalg.qr(a1, mode="r")
    r2 = np.linalg.qr(a2, mode="r")
    tr_sqrt = np.linalg.svd(r2 @ r1.T, compute_uv=False).sum()
    d = float(np.sum((mu1 - mu2) ** 2) + np.sum(a1 * a1) + np.sum(a2 * a2) - 2.0 * tr_sqrt)
    return max(d, 0.0)


def fvd_proxy(set_a, set_b, encoder) -> float:
    """Fréchet distance between per-clip feature Gaussians of two clip sets."""
    if len(set_a) < 2 or len(set_b) < 2:
        raise InvalidArgument("fvd_proxy needs at least 2 clips per set")
    fa = np.stack([clip_features(c, encoder) for c in set_a])
    fb = np.stack([clip_features(c, encoder) for c in set_b])
    return frechet_distance_from_features(fa, fb)


@dataclass
class MetricReport:
    ssim: float
    psnr: float
    perceptual_dist: float
    fvd_proxy: float | None
    per_frame: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def evaluate(pred_clips, gt_clips, encoder, encoder_id: str = "") -> MetricReport:
    """Frame metrics over paired clips; fvd_proxy when each side has >= 2 clips."""
    if len(pred_clips) != len(gt_clips):
        raise InvalidArgument(f"{len(pred_clips)} predicted clips vs {len(gt_clips)} ground-truth clips")
    rows = []
    for ci, (pc, gc) in enumerate(zip(pred_clips, gt_clips)):
        if len(pc) != len(gc):
            raise InvalidArgument(f"clip {ci}: {len(pc)} vs {len(gc)} frames")
        for fi, (p, g) in enumerate(zip(pc, gc)):
            rows.append({"clip": ci, "frame": fi, "ssim": ssim(p, g), "psnr": psnr(p, g),
                         "perceptual_dist": perceptual_dist(p, g, encoder)})
    if not rows:
        raise InvalidArgument("no frames to evaluate")
    fvd = fvd_proxy(pred_clips, gt_clips, encoder) if len(pred_clips) >= 2 else None
    cfg = {"ssim_window": SSIM_WINDOW, "ssim_sigma": SSIM_SIGMA, "ssim_k1": SSIM_K1,
           "ssim_k2": SSIM_K2, "psnr_cap": PSNR_CAP, "encoder_id": encoder_id}
    return MetricReport(
        ssim=float(np.mean([r["ssim"] for r in rows])),
        psnr=float(np.mean([r["psnr"] for r in rows])),
        perceptual_dist=float(np.mean([r["perceptual_dist"] for r in rows])),
        fvd_proxy=fvd, per_frame=rows, config=cfg)
