"""Evaluation metrics (PSNR, SSIM, MS-SSIM, NME) and bilinear resampling.

All functions here work on plain float64 numpy values (Tensors are accepted
and unwrapped); nothing is differentiated through a metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (AllInvisible, CountMismatch, ImageTooSmall, ShapeMismatch)
from .heatmaps import LandmarkSet
from .tensor import Tensor

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# PSNR
# ---------------------------------------------------------------------------

def psnr(a, b, cap: float = PSNR_CAP) -> float:
    """10*log10(1/MSE) for [0,1] images; identical inputs report `cap` dB."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"psnr: shapes {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


# ---------------------------------------------------------------------------
# SSIM / MS-SSIM
# ---------------------------------------------------------------------------

def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g1 = np.exp(-coords ** 2 / (2.0 * sigma ** 2))
    g = np.outer(g1, g1)
    return g / g.sum()


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Correlate one 2-D image with window `w`, valid positions only."""
    k = w.shape[0]
    ho, wo = x.shape[0] - k + 1, x.shape[1] - k + 1
    sh, sw = x.strides
    win = np.lib.stride_tricks.as_strided(x, (ho, wo, k, k), (sh, sw, sh, sw))
    return np.tensordot(win, w, axes=[(2, 3), (0, 1)])


def _ssim_channel(x: np.ndarray, y: np.ndarray, c1: float, c2: float) -> tuple[float, float]:
    """(mean SSIM, mean contrast-structure) over valid windows of one channel."""
    w = _gaussian_window()
    mu_x = _filter_valid(x, w)
    mu_y = _filter_valid(y, w)
    var_x = _filter_valid(x * x, w) - mu_x ** 2
    var_y = _filter_valid(y * y, w) - mu_y ** 2
    cov = _filter_valid(x * y, w) - mu_x * mu_y
    lum = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    cs = (2 * cov + c2) / (var_x + var_y + c2)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _channels(img: np.ndarray) -> np.ndarray:
    """Normalize image layout to C,H,W."""
    if img.ndim == 2:
        return img[None]
    if img.ndim == 3:
        return img
    raise ShapeMismatch(f"expected H,W or C,H,W image, got {img.shape}")


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean local SSIM, Gaussian 11x11 sigma 1.5 window, per-channel averaged."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim: shapes {a.shape} vs {b.shape}")
    a, b = _channels(a), _channels(b)
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ImageTooSmall(f"ssim needs >= {SSIM_WINDOW} px, got {a.shape[-2:]}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    vals = [_ssim_channel(a[c], b[c], c1, c2)[0] for c in range(a.shape[0])]
    return float(np.mean(vals))


def _avgpool2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape
    x = x[:h - h % 2, :w - w % 2]
    return x.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def ms_ssim(a, b, weights=MS_SSIM_WEIGHTS, data_range: float = 1.0) -> float:
    """Multi-scale SSIM: contrast-structure at fine scales, full SSIM at the
    coarsest, combined as a weighted product.  Images smaller than 11 px at
    scale 5 use fewer scales with renormalized weights."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"ms_ssim: shapes {a.shape} vs {b.shape}")
    a, b = _channels(a), _channels(b)
    n_scales = len(weights)
    while n_scales > 0 and min(a.shape[-2:]) // (2 ** (n_scales - 1)) < SSIM_WINDOW:
        n_scales -= 1
    if n_scales == 0:
        raise ImageTooSmall(f"ms_ssim needs >= {SSIM_WINDOW} px, got {a.shape[-2:]}")
    w = np.asarray(weights[:n_scales])
    w = w / w.sum()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    per_channel = []
    for c in range(a.shape[0]):
        x, y = a[c], b[c]
        acc = 1.0
        for s in range(n_scales):
            full, cs = _ssim_channel(x, y, c1, c2)
            if s == n_scales - 1:
                acc *= max(full, 0.0) ** w[s]  # luminance only at the top
            else:
                acc *= max(cs, 0.0) ** w[s]
                x, y = _avgpool2(x), _avgpool2(y)
        per_channel.append(acc)
    return float(np.mean(per_channel))


# ---------------------------------------------------------------------------
# NME
# ---------------------------------------------------------------------------

def nme(pred: LandmarkSet, ref: LandmarkSet, d: float) -> float:
    """Mean Euclidean landmark error normalized by image size `d`.

    Pairs invisible in either set are excluded from the mean."""
    if len(pred) != len(ref):
        raise CountMismatch(f"landmark counts differ: {len(pred)} vs {len(ref)}")
    both = pred.visibility & ref.visibility
    if not both.any():
        raise AllInvisible("no landmark pair visible in both sets")
    dist = np.linalg.norm(pred.points[both] - ref.points[both], axis=1)
    return float(np.mean(dist) / d)


# ---------------------------------------------------------------------------
# Bilinear resampling
# ---------------------------------------------------------------------------

def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D linear interpolation weights (align-corners-false convention)."""
    out = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    out[np.arange(n_out), i0] += 1.0 - t
    out[np.arange(n_out), i1] += t
    return out


def resize_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize of [..., H, W] arrays."""
    x = _as_array(img)
    ah = _interp_matrix(x.shape[-2], out_h)
    aw = _interp_matrix(x.shape[-1], out_w)
    return np.einsum("...hw,Hh,Ww->...HW", x, ah, aw, optimize=True)


def bilinear_upsample(img, factor: int) -> np.ndarray:
    x = _as_array(img)
    return resize_bilinear(x, x.shape[-2] * factor, x.shape[-1] * factor)


def bilinear_downsample(img, factor: int) -> np.ndarray:
    x = _as_array(img)
    return resize_bilinear(x, x.shape[-2] // factor, x.shape[-1] // factor)


# ---------------------------------------------------------------------------
# Aggregate reporting
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    ms_ssim: float
    nme: float | None
    n_images: int


def evaluate_pairs(pairs, lm_pairs=None, d: float | None = None):
    """Score (sr, hr) image pairs; returns (per-image records, report).

    `pairs` yields (image_id, sr C,H,W, hr C,H,W); optional `lm_pairs` maps
    image_id -> (pred LandmarkSet, ref LandmarkSet) for NME with size `d`.
    """
    records = []
    for image_id, sr, hr in pairs:
        rec = {
            "id": image_id,
            "psnr": psnr(sr, hr),
            "ssim": ssim(sr, hr),
            "ms_ssim": ms_ssim(sr, hr),
        }
        if lm_pairs and image_id in lm_pairs:
            pred, ref = lm_pairs[image_id]
            rec["nme"] = nme(pred, ref, d)
        records.append(rec)
    n = len(records)
    if n == 0:
        return records, MetricsReport(0.0, 0.0, 0.0, None, 0)
    nmes = [r["nme"] for r in records if "nme" in r]
    # fsum keeps the aggregate independent of evaluation order.
    report = MetricsReport(
        psnr=math.fsum(r["psnr"] for r in records) / n,
        ssim=math.fsum(r["ssim"] for r in records) / n,
        ms_ssim=math.fsum(r["ms_ssim"] for r in records) / n,
        nme=(math.fsum(nmes) / len(nmes)) if nmes else None,
        n_images=n,
    )
    return records, report


def report_lines(records, report: MetricsReport) -> list[str]:
    """One text record per image pair plus an aggregate footer."""
    lines = []
    for r in records:
        line = f"{r['id']}\tpsnr={r['psnr']:.4f}\tssim={r['ssim']:.6f}\tms_ssim={r['ms_ssim']:.6f}"
        if "nme" in r:
            line += f"\tnme={r['nme']:.6f}"
        lines.append(line)
    footer = (f"mean\tpsnr={report.psnr:.4f}\tssim={report.ssim:.6f}"
              f"\tms_ssim={report.ms_ssim:.6f}")
    if report.nme is not None:
        footer += f"\tnme={report.nme:.6f}"
    footer += f"\tn={report.n_images}"
    lines.append(footer)
    return lines
