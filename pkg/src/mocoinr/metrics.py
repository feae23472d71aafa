"""Image quality metrics for reconstructed sequences.

Complex inputs are reduced to magnitude. Both images are divided by the
99.9th percentile of the reference magnitude, which equals the maximum for
piecewise-constant phantoms and ignores isolated hot pixels otherwise.
Real-valued inputs keep their sign so anti-correlated pairs score negative
under SSIM.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DataValidationError, ShapeError

PSNR_IDENTICAL = float("inf")
PEAK_PERCENTILE = 99.9
SSIM_SIGMA = 1.5
SSIM_WIN = 11
K1, K2 = 0.01, 0.03


def _prepare(ref, test):
    ref = np.asarray(ref)
    test = np.asarray(test)
    if ref.shape != test.shape:
        raise ShapeError(f"reference {ref.shape} and test {test.shape} differ")
    if np.iscomplexobj(ref) or np.iscomplexobj(test):
        ref, test = np.abs(ref), np.abs(test)
    return ref.astype(np.float64), test.astype(np.float64)


def reference_peak(ref):
    peak = float(np.percentile(np.abs(ref), PEAK_PERCENTILE))
    if peak <= 0:
        raise DataValidationError("reference image is identically zero")
    return peak


def normalize(ref, test):
    ref, test = _prepare(ref, test)
    peak = reference_peak(ref)
    return ref / peak, test / peak


def psnr(ref, test):
    """PSNR in dB of the whole sequence against a unit peak; ``inf`` if identical."""
    r, t = normalize(ref, test)
    mse = np.mean((r - t) ** 2)
    if mse == 0:
        return PSNR_IDENTICAL
    return float(10 * np.log10(1.0 / mse))


def nrmse_roi(ref, test, roi):
    """Pooled RMS error over ``roi`` (broadcast over frames) over RMS of ``ref`` there."""
    r, t = _prepare(ref, test)
    roi = np.asarray(roi, dtype=bool)
    if not roi.any():
        raise DataValidationError("ROI is empty")
    mask = np.broadcast_to(roi, r.shape)
    denom = np.sqrt(np.mean(r[mask] ** 2))
    if denom == 0:
        raise DataValidationError("reference is zero inside the ROI")
    return float(np.sqrt(np.mean((t[mask] - r[mask]) ** 2)) / denom)


def _gauss_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable Gaussian, keeping only positions where the window fits
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    h = len(g) // 2
    return out[h:img.shape[0] - h, h:img.shape[1] - h]


def ssim_frame(ref, test, data_range):
    if min(ref.shape) < SSIM_WIN:
        raise ShapeError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}")
    g = _gauss_window()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_r = _filter_valid(ref, g)
    mu_t = _filter_valid(test, g)
    var_r = _filter_valid(ref * ref, g) - mu_r**2
    var_t = _filter_valid(test * test, g) - mu_t**2
    cov = _filter_valid(ref * test, g) - mu_r * mu_t
    num = (2 * mu_r * mu_t + c1) * (2 * cov + c2)
    den = (mu_r**2 + mu_t**2 + c1) * (var_r + var_t + c2)
    return float(np.mean(num / den))


def ssim(ref, test):
    """Mean local SSIM (Gaussian 11x11, sigma 1.5), averaged over frames."""
    r, t = normalize(ref, test)
    if r.ndim == 2:
        return ssim_frame(r, t, 1.0)
    frames = r.reshape(-1, *r.shape[-2:])
    tests = t.reshape(-1, *t.shape[-2:])
    return float(np.mean([ssim_frame(a, b, 1.0) for a, b in zip(frames, tests)]))


def evaluate(ref, test, roi):
    return {"psnr": psnr(ref, test), "ssim": ssim(ref, test), "nrmse_roi": nrmse_roi(ref, test, roi)}


def dvf_cosine(estimated, analytic, roi, min_mag=0.25):
    """Mean cosine between two DVF sequences ``(T, H, W, 2)`` inside ``roi``.

    Both fields are centered in time first: the canonical frame is free, so a
    reconstruction may differ from the analytic field by a per-pixel constant
    offset. Only pixels/frames where the centered analytic displacement is
    larger than ``min_mag`` (same units as the fields) are scored.
    """
    est = np.asarray(estimated, dtype=np.float64)
    ana = np.asarray(analytic, dtype=np.float64)
    if est.shape != ana.shape or est.shape[-1] != 2:
        raise ShapeError("DVF sequences must share a (T, H, W, 2) shape")
    est = est - est.mean(axis=0, keepdims=True)
    ana = ana - ana.mean(axis=0, keepdims=True)
    na = np.linalg.norm(ana, axis=-1)
    ne = np.linalg.norm(est, axis=-1)
    mask = np.broadcast_to(np.asarray(roi, dtype=bool), na.shape) & (na > min_mag)
    if not mask.any():
        raise DataValidationError("no ROI pixel has analytic motion above the threshold")
    cos = np.sum(est * ana, axis=-1) / np.maximum(ne * na, 1e-12)
    return float(np.mean(cos[mask]))
