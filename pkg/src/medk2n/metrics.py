"""Image quality metrics and the paired significance test.

Images live in [0, 1], so PSNR uses peak 1.0. Identical images get the
sentinel ``PSNR_CAP`` instead of infinity. SSIM is the Gaussian-window form
(11x11, sigma 1.5, K1=0.01, K2=0.03) averaged over valid window positions.
"""

import math

import numpy as np
import torch
import torch.nn.functional as F
from scipy import stats

from . import kernels
from .types import ContractError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2

_GAUSS = kernels.gaussian_window(SSIM_WINDOW, SSIM_SIGMA)


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def psnr(pred, gt):
    pred, gt = _check_pair(pred, gt)
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def ssim(pred, gt):
    pred, gt = _check_pair(pred, gt)
    if pred.ndim != 2:
        raise ContractError("ssim expects a single 2D image pair")
    if min(pred.shape) < SSIM_WINDOW:
        raise ContractError(f"image {pred.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    return float(np.mean(kernels.ssim_map(pred, gt, _GAUSS, C1, C2)))


def _gauss_kernels_1d(dtype, device, groups):
    g = torch.as_tensor(_GAUSS, dtype=dtype, device=device)
    col = g.reshape(1, 1, -1, 1).repeat(groups, 1, 1, 1)
    row = g.reshape(1, 1, 1, -1).repeat(groups, 1, 1, 1)
    return col, row


def ssim_torch(pred, gt, reduce=True):
    """Differentiable SSIM for (B, 1, H, W) tensors, same definition as ``ssim``."""
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if min(pred.shape[-2:]) < SSIM_WINDOW:
        raise ContractError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    col, row = _gauss_kernels_1d(pred.dtype, pred.device, 5)
    stack = torch.cat([pred, gt, pred * pred, gt * gt, pred * gt], dim=1)
    filt = F.conv2d(F.conv2d(stack, col, groups=5), row, groups=5)
    mx, my, exx, eyy, exy = filt.unbind(dim=1)
    sxx = exx - mx * mx
    syy = eyy - my * my
    sxy = exy - mx * my
    smap = ((2 * mx * my + C1) * (2 * sxy + C2)) / ((mx * mx + my * my + C1) * (sxx + syy + C2))
    per_image = smap.mean(dim=(1, 2))
    return per_image.mean() if reduce else per_image


def wilcoxon_signed_rank(a, b):
    """Two-sided Wilcoxon signed-rank p-value, normal approximation.

    Zero differences are dropped, tied magnitudes get mid-ranks, the variance
    carries the tie correction and ``|W - mean|`` gets a 0.5 continuity
    correction. All-zero differences give 1.0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"paired samples differ in length: {a.shape} vs {b.shape}")
    if a.size < 5:
        raise ContractError("wilcoxon_signed_rank needs at least 5 pairs")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return 1.0
    ranks = stats.rankdata(np.abs(d))
    w_plus = ranks[d > 0].sum()
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts ** 3 - counts) / 48.0
    if var <= 0:
        return 1.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2.0 * stats.norm.sf(z)))
