"""Independent reference implementations used to check the package.

Everything here is deliberately naive (loops, central differences) and never
imports the code paths it is used to verify.
"""

from __future__ import annotations

import math

import numpy as np

# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def numeric_grad(f, arrays: list[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    """Central-difference gradient of scalar-valued f w.r.t. each array."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*arrays)
            flat[i] = orig - h
            fm = f(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def grad_close(analytic: np.ndarray, numeric: np.ndarray,
               rtol: float = 1e-3, atol: float = 2e-5) -> bool:
    """Combined relative/absolute agreement test for gradient entries."""
    return bool(np.all(np.abs(analytic - numeric)
                       <= rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + atol))


def max_grad_err(analytic: np.ndarray, numeric: np.ndarray, atol: float = 2e-5) -> float:
    denom = np.maximum(np.abs(analytic), np.abs(numeric)) + atol / 1e-3
    return float(np.max(np.abs(analytic - numeric) / denom))


def sample_away_from_kinks(rng: np.random.Generator, shape, margin: float = 1e-3,
                           lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Uniform draws rejected (re-drawn) while any entry sits within `margin`
    of 0, the common kink location for abs/relu/leaky-relu."""
    x = rng.uniform(lo, hi, shape)
    for _ in range(100):
        bad = np.abs(x) < margin
        if not bad.any():
            return x
        x[bad] = rng.uniform(lo, hi, bad.sum())
    raise RuntimeError("could not sample away from kinks")


# ---------------------------------------------------------------------------
# Naive convolution (loops)
# ---------------------------------------------------------------------------

def conv2d_loops(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                 stride: int, padding: int) -> np.ndarray:
    """Direct cross-correlation, quadruple loop."""
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    y = np.zeros((B, O, Ho, Wo))
    for bi in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[bi, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    y[bi, o, i, j] = np.sum(patch * w[o]) + b[o]
    return y


# ---------------------------------------------------------------------------
# Naive image metrics
# ---------------------------------------------------------------------------

def psnr_loops(a: np.ndarray, b: np.ndarray, cap: float = 100.0) -> float:
    total = 0.0
    for v, w in zip(a.reshape(-1), b.reshape(-1)):
        total += (v - w) ** 2
    mse = total / a.size
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.array([[math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma ** 2))
                   for j in range(size)] for i in range(size)])
    return g / g.sum()


def ssim_windowed(a: np.ndarray, b: np.ndarray,
                  size: int = 11, sigma: float = 1.5,
                  c1: float = 0.01 ** 2, c2: float = 0.03 ** 2,
                  return_cs: bool = False):
    """Window-by-window SSIM on one 2-D channel (valid positions only)."""
    w = gaussian_window(size, sigma)
    H, W = a.shape
    vals, css = [], []
    for i in range(H - size + 1):
        for j in range(W - size + 1):
            pa = a[i:i + size, j:j + size]
            pb = b[i:i + size, j:j + size]
            mu_a = (w * pa).sum()
            mu_b = (w * pb).sum()
            var_a = (w * pa * pa).sum() - mu_a ** 2
            var_b = (w * pb * pb).sum() - mu_b ** 2
            cov = (w * pa * pb).sum() - mu_a * mu_b
            lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
            cs = (2 * cov + c2) / (var_a + var_b + c2)
            vals.append(lum * cs)
            css.append(cs)
    if return_cs:
        return float(np.mean(vals)), float(np.mean(css))
    return float(np.mean(vals))


def ssim_oracle(a: np.ndarray, b: np.ndarray) -> float:
    """Channel-averaged windowed SSIM for C,H,W arrays."""
    return float(np.mean([ssim_windowed(a[c], b[c]) for c in range(a.shape[0])]))


def avgpool2_np(x: np.ndarray) -> np.ndarray:
    H, W = x.shape[-2:]
    x = x[..., :H - H % 2, :W - W % 2]
    return x.reshape(*x.shape[:-2], H // 2, 2, W // 2, 2).mean(axis=(-3, -1))


def ms_ssim_oracle(a: np.ndarray, b: np.ndarray,
                   weights=(0.0448, 0.2856, 0.3001, 0.2363, 0.1333)) -> float:
    """Scale-by-scale oracle built from ssim_windowed (C,H,W arrays)."""
    n_scales = len(weights)
    while min(a.shape[-2:]) // (2 ** (n_scales - 1)) < 11:
        n_scales -= 1
    w = np.asarray(weights[:n_scales])
    w = w / w.sum()
    per_channel = []
    for c in range(a.shape[0]):
        x, y = a[c], b[c]
        cs_terms = []
        for s in range(n_scales):
            ssim_full, cs = ssim_windowed(x, y, return_cs=True)
            if s == n_scales - 1:
                lum_cs = ssim_full  # luminance enters only at the coarsest scale
                cs_terms.append(max(lum_cs, 0.0) ** w[s])
            else:
                cs_terms.append(max(cs, 0.0) ** w[s])
                x, y = avgpool2_np(x), avgpool2_np(y)
        per_channel.append(np.prod(cs_terms))
    return float(np.mean(per_channel))


# ---------------------------------------------------------------------------
# Naive loss sums
# ---------------------------------------------------------------------------

def mse_loops(a: np.ndarray, b: np.ndarray) -> float:
    total = 0.0
    for v, w in zip(a.reshape(-1), b.reshape(-1)):
        total += (v - w) ** 2
    return total / a.size


def attention_loops(sr: np.ndarray, hr: np.ndarray, m: np.ndarray) -> float:
    """Channel-summed masked L1, averaged over pixels and batch.

    `m` has shape H,W (shared) or B,H,W (per sample)."""
    B, C, H, W = sr.shape
    total = 0.0
    for b in range(B):
        mb = m if m.ndim == 2 else m[b]
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    total += mb[i, j] * abs(hr[b, c, i, j] - sr[b, c, i, j])
    return total / (B * H * W)
