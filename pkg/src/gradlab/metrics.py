"""Reconstruction quality metrics: MSE, PSNR, SSIM, and attack success rate.

SSIM is the global-statistics form: whole-image means, variances, and
covariance with stabilizers c1 = (k1*L)^2, c2 = (k2*L)^2 (k1 = 0.01,
k2 = 0.03). Multi-channel images average the per-channel scores. A windowed
variant (uniform 8x8 window, stride 4) is available for cross checks.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import MetricError, UsageError


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak=None, L=None):
    """10*log10(peak^2 / MSE); peak defaults to the maximum of the original
    image, or pass L to use the nominal dynamic range instead."""
    a, b = _pair(a, b)
    if peak is None:
        peak = L if L is not None else float(a.max())
    if peak <= 0:
        raise MetricError(f"psnr undefined for peak {peak}")
    err = mse(a, b)
    if err == 0:
        return math.inf
    return float(10.0 * math.log10(peak * peak / err))


def _ssim_global(a, b, c1, c2):
    mu_a, mu_b = a.mean(), b.mean()
    va, vb = a.var(), b.var()
    cov = ((a - mu_a) * (b - mu_b)).mean()
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (va + vb + c2)
    )


def _ssim_windowed(a, b, c1, c2, win=8, stride=4):
    h, w = a.shape
    win = min(win, h, w)
    vals = []
    for i in range(0, max(h - win, 0) + 1, stride):
        for j in range(0, max(w - win, 0) + 1, stride):
            vals.append(_ssim_global(a[i : i + win, j : j + win], b[i : i + win, j : j + win], c1, c2))
    return float(np.mean(vals))


def ssim(a, b, L=1.0, k1=0.01, k2=0.03, windowed=False):
    a, b = _pair(a, b)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.ndim != 3:
        raise UsageError(f"ssim expects (H, W) or (H, W, C) images, got shape {a.shape}")
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    fn = _ssim_windowed if windowed else _ssim_global
    per_channel = [fn(a[..., c], b[..., c], c1, c2) for c in range(a.shape[-1])]
    return float(np.mean(per_channel))


def attack_success_rate(ssim_values, threshold=0.6):
    """Fraction of per-image SSIM scores at or above the threshold."""
    vals = list(ssim_values)
    if not vals:
        raise UsageError("attack_success_rate over an empty list")
    return float(np.mean([s >= threshold for s in vals]))


@dataclass
class MetricsReport:
    per_image: list  # (mse, psnr, ssim) per victim image
    asr: float
    threshold: float = 0.6

    def csv_rows(self):
        rows = []
        for i, (m, p, s) in enumerate(self.per_image):
            rows.append((i, m, p, s, int(s >= self.threshold)))
        return rows


def score_pair(original, reconstructed, L=1.0, clamp=True, windowed=False):
    """(mse, psnr, ssim) for one image pair; reconstructions are clamped to
    [0, L] before scoring unless told otherwise."""
    original = np.asarray(original, dtype=np.float64)
    reconstructed = np.asarray(reconstructed, dtype=np.float64)
    if clamp:
        reconstructed = np.clip(reconstructed, 0.0, L)
    return (
        mse(original, reconstructed),
        psnr(original, reconstructed),
        ssim(original, reconstructed, L=L, windowed=windowed),
    )


def match_batch(originals, reconstructions, L=1.0, clamp=True):
    """Greedy one-to-one assignment maximizing SSIM.

    Batch attacks cannot identify the ordering of reconstructed images, so
    each reconstruction is matched to its best remaining victim. Returns the
    reconstruction index assigned to each original.
    """
    n = len(originals)
    if len(reconstructions) != n:
        raise UsageError(f"{len(reconstructions)} reconstructions for {n} originals")
    recs = [np.clip(np.asarray(r, dtype=np.float64), 0.0, L) if clamp else r for r in reconstructions]
    scores = np.array([[ssim(o, r, L=L) for r in recs] for o in originals])
    assignment = [-1] * n
    used_o, used_r = set(), set()
    flat = [(scores[i, j], i, j) for i in range(n) for j in range(n)]
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))
    for _, i, j in flat:
        if i in used_o or j in used_r:
            continue
        assignment[i] = j
        used_o.add(i)
        used_r.add(j)
        if len(used_o) == n:
            break
    return assignment


def build_report(originals, reconstructions, L=1.0, clamp=True, threshold=0.6, match=None):
    """Score a victim set against its reconstructions.

    match=None scores pairs in order; match="ssim" applies the greedy
    one-to-one assignment first (for batch attacks).
    """
    if match == "ssim":
        order = match_batch(originals, reconstructions, L=L, clamp=clamp)
        reconstructions = [reconstructions[j] for j in order]
    per_image = [
        score_pair(o, r, L=L, clamp=clamp) for o, r in zip(originals, reconstructions)
    ]
    asr = attack_success_rate([s for _, _, s in per_image], threshold)
    return MetricsReport(per_image=per_image, asr=asr, threshold=threshold)
