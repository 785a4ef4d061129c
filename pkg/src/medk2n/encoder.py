"""Multi-scale encoder: conv pyramid + Fermat-spiral bidirectional scan mixing."""

from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kernels
from .types import FeatureMap


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScanOrder:
    permutation: np.ndarray  # (H*W, 2) of (row, col)
    grid_size: Tuple[int, int]

    @property
    def flat(self) -> np.ndarray:
        return self.permutation[:, 0] * self.grid_size[1] + self.permutation[:, 1]


def _leftover_key(H, W):
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    ii, jj = np.mgrid[0:H, 0:W]
    dist = np.hypot(ii - cy, jj - cx).ravel()
    return dist


@lru_cache(maxsize=64)
def _fermat_flat(H, W):
    ys, xs = kernels.spiral_samples(H, W)
    visited = kernels.first_visits(ys, xs, H, W)
    seen = np.zeros(H * W, dtype=bool)
    seen[visited] = True
    rest = np.flatnonzero(~seen)
    if rest.size:
        dist = _leftover_key(H, W)[rest]
        # lexsort: last key is primary -> distance first, then row-major index
        rest = rest[np.lexsort((rest, dist))]
    return np.concatenate([visited, rest]).astype(np.int64)


def fermat_scan_order(H: int, W: int) -> ScanOrder:
    """Centre-outward ordering of an H x W grid along a golden-angle spiral.

    Spiral samples (4*H*W of them) are rounded to the nearest cell; a cell
    joins the order the first time a sample lands on it. Cells never hit are
    appended by distance from the centre, ties broken row-major.
    """
    if H < 1 or W < 1:
        raise ConfigError(f"grid must be at least 1x1, got {H}x{W}")
    flat = _fermat_flat(int(H), int(W))
    perm = np.stack([flat // W, flat % W], axis=1)
    return ScanOrder(permutation=perm, grid_size=(H, W))


# --------------------------------------------------------------------------
# gated linear scan in torch


def gated_scan(x, decay, chunk=64):
    """``h_t = a*h_{t-1} + (1-a)*x_t`` along dim 1 of ``x`` (B, L, C).

    Computed chunk-wise: inside a chunk the recurrence is a lower-triangular
    Toeplitz matmul, the state is carried between chunks.
    """
    B, L, C = x.shape
    log_a = torch.log(decay)
    T = min(chunk, L)
    t = torch.arange(T, device=x.device, dtype=x.dtype)
    diff = t[:, None] - t[None, :]
    lower = diff >= 0
    diff = diff.clamp(min=0)
    # (C, T, T)
    kern = torch.exp(diff[None] * log_a[:, None, None]) * lower[None].to(x.dtype)
    kern = kern * (1.0 - decay)[:, None, None]
    carry_pow = torch.exp((t[:, None] + 1.0) * log_a[None, :])  # (T, C)
    outs = []
    state = None
    for start in range(0, L, T):
        xc = x[:, start:start + T]
        n = xc.shape[1]
        h = torch.einsum("cts,bsc->btc", kern[:, :n, :n], xc)
        if state is not None:
            h = h + carry_pow[:n][None] * state[:, None, :]
        outs.append(h)
        state = h[:, -1]
    return torch.cat(outs, dim=1)


class BiScanMixer(nn.Module):
    """Flatten along a scan order, run forward and reversed gated scans,
    average them and add back as a residual."""

    def __init__(self, dim, tied=False):
        super().__init__()
        self.proj_in = nn.Linear(dim, dim)
        self.proj_out = nn.Linear(dim, dim)
        self.decay_fwd = nn.Parameter(torch.linspace(-1.0, 2.5, dim))
        self.tied = tied
        if not tied:
            self.decay_bwd = nn.Parameter(torch.linspace(-1.0, 2.5, dim))

    def decays(self):
        a_f = torch.sigmoid(self.decay_fwd).clamp(1e-4, 1 - 1e-4)
        a_b = a_f if self.tied else torch.sigmoid(self.decay_bwd).clamp(1e-4, 1 - 1e-4)
        return a_f, a_b

    def scan_pair(self, seq):
        u = self.proj_in(seq)
        a_f, a_b = self.decays()
        fwd = gated_scan(u, a_f)
        bwd = gated_scan(u.flip(1), a_b).flip(1)
        return fwd, bwd

    def forward(self, feat, order: ScanOrder, mode="bi"):
        B, C, H, W = feat.shape
        idx = torch.as_tensor(order.flat, device=feat.device)
        seq = feat.flatten(2)[:, :, idx].transpose(1, 2)  # (B, L, C)
        fwd, bwd = self.scan_pair(seq)
        if mode == "bi":
            mixed = 0.5 * (fwd + bwd)
        elif mode == "forward":
            mixed = fwd
        else:
            raise ConfigError(f"unknown scan mode {mode!r}")
        out_seq = seq + self.proj_out(mixed)
        out = torch.empty_like(feat.flatten(2))
        out[:, :, idx] = out_seq.transpose(1, 2)
        return out.view(B, C, H, W)


class MultiScaleEncoder(nn.Module):
    """Bottom-up conv pyramid (strides 4/8/16), one scan mixer per level, and a
    top-down merge so the finest level also sees coarse context."""

    strides = (16, 8, 4)

    def __init__(self, dim=64, in_ch=1, scan_mode="bi"):
        super().__init__()
        self.dim = dim
        self.scan_mode = scan_mode
        half = max(dim // 2, 1)
        self.stem = nn.Sequential(
            nn.Conv2d(in_ch, half, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(half, dim, 3, stride=2, padding=1), nn.GELU())
        self.down8 = nn.Sequential(nn.Conv2d(dim, dim, 3, stride=2, padding=1), nn.GELU())
        self.down16 = nn.Sequential(nn.Conv2d(dim, dim, 3, stride=2, padding=1), nn.GELU())
        self.mixers = nn.ModuleList([BiScanMixer(dim) for _ in range(3)])
        self.lateral = nn.ModuleList([nn.Conv2d(dim, dim, 1) for _ in range(2)])

    def check_input(self, image):
        H, W = image.shape[-2:]
        s = max(self.strides)
        if H < s or W < s or H % s or W % s:
            raise ConfigError(f"image {H}x{W} must be a positive multiple of the coarsest stride {s}")

    def forward(self, image, mode=None):
        self.check_input(image)
        mode = mode or self.scan_mode
        f4 = self.stem(image)
        f8 = self.down8(f4)
        f16 = self.down16(f8)
        levels = []
        for mixer, f in zip(self.mixers, (f16, f8, f4)):
            h, w = f.shape[-2:]
            levels.append(mixer(f, fermat_scan_order(h, w), mode=mode))
        c16, c8, c4 = levels
        c8 = c8 + self.lateral[0](F.interpolate(c16, size=c8.shape[-2:], mode="nearest"))
        c4 = c4 + self.lateral[1](F.interpolate(c8, size=c4.shape[-2:], mode="nearest"))
        return FeatureMap(scales=[c16, c8, c4], embedding_dim=self.dim)


def encode(image, encoder: MultiScaleEncoder, mode=None) -> FeatureMap:
    """Encode ``image`` (H, W), (B, H, W) or (B, 1, H, W) into a FeatureMap."""
    x = torch.as_tensor(image)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    x = x.to(next(encoder.parameters()).dtype)
    return encoder(x, mode=mode)
