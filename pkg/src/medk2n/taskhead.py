"""Shared fusion encoding, multi-head candidate generation and quality selection."""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .metrics import ssim_torch
from .types import ContractError

HEAD_KERNELS = (3, 5, 7)
BAND_PENALTY = 5.0


@dataclass(frozen=True)
class ModalitySpec:
    """Expected band of mean intensity for a target modality."""

    name: str
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.lo <= self.hi <= 1.0):
            raise ContractError(f"intensity band for {self.name} must lie in [0,1], got ({self.lo}, {self.hi})")

    def penalty(self, mean_intensity):
        below = torch.clamp(self.lo - mean_intensity, min=0.0)
        above = torch.clamp(mean_intensity - self.hi, min=0.0)
        return BAND_PENALTY * (below + above)


@dataclass
class SharedEncoding:
    f_shared: torch.Tensor  # (B, D, h, w)
    c_task: torch.Tensor  # (D,)


@dataclass
class CandidateSet:
    candidates: List[torch.Tensor]  # each (B, 1, H, W)
    scores: Optional[np.ndarray] = None  # (K_head,) batch-mean scores
    winner_index: int = 0
    delta_q: float = 0.0


class SharedEnc(nn.Module):
    """Normalised blend of key frame and weighted auxiliaries, refined by a
    task-conditioned residual block.

    The blend ``(f_base + sum w F) / (1 + sum w)`` is the key frame alone when
    every weight is zero and the plain average when every weight is one.
    """

    def __init__(self, dim):
        super().__init__()
        self.fuse = nn.Conv2d(2 * dim, dim, 3, padding=1)
        self.ctx = nn.Linear(dim, dim)
        self.out = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, f_base, aux_term, c_task, weight_sum=None):
        if weight_sum is None:
            weight_sum = torch.zeros_like(f_base[:, :1])
        mixed = (f_base + aux_term) / (1.0 + weight_sum)
        h = self.fuse(torch.cat([f_base, mixed], dim=1))
        h = h + self.ctx(c_task).reshape(1, -1, 1, 1)
        return mixed + self.out(F.gelu(h))


def weighted_aux_sum(f_base, weighted_aux):
    """Elementwise sum of ``w_eff * F`` over auxiliary sources."""
    total = torch.zeros_like(f_base)
    for w, feat in weighted_aux:
        feat = feat.finest if hasattr(feat, "finest") else feat
        if feat.shape != f_base.shape:
            raise ContractError(f"auxiliary features {tuple(feat.shape)} do not match base {tuple(f_base.shape)}")
        if w.shape[-2:] != f_base.shape[-2:]:
            raise ContractError(f"weight map {tuple(w.shape)} does not match feature grid {tuple(f_base.shape[-2:])}")
        total = total + w * feat
    return total


def shared_encode(f_base, weighted_aux, c_task, enc: SharedEnc) -> SharedEncoding:
    f_base = f_base.finest if hasattr(f_base, "finest") else f_base
    aux = weighted_aux_sum(f_base, weighted_aux)
    w_sum = torch.zeros_like(f_base[:, :1])
    for w, _ in weighted_aux:
        w_sum = w_sum + w
    return SharedEncoding(f_shared=enc(f_base, aux, c_task, w_sum), c_task=c_task)


class CandidateHead(nn.Module):
    """Per-head 1x1 adapter, then a x4 upsampling decoder with kernel size ``k``."""

    def __init__(self, dim, kernel):
        super().__init__()
        mid, low = max(dim // 2, 4), max(dim // 4, 4)
        p = kernel // 2
        self.adapt = nn.Conv2d(dim, dim, 1)
        self.dec1 = nn.Conv2d(dim, mid, kernel, padding=p)
        self.dec2 = nn.Conv2d(mid, low, kernel, padding=p)
        self.to_img = nn.Conv2d(low, 1, 3, padding=1)

    def forward(self, f_shared):
        h = self.adapt(f_shared)
        h = F.gelu(self.dec1(h))
        h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
        h = F.gelu(self.dec2(h))
        h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
        return torch.sigmoid(self.to_img(h))


def generate_candidates(enc: SharedEncoding, heads: Sequence[CandidateHead]):
    if len(heads) < 1:
        raise ContractError("need at least one generation head")
    return [head(enc.f_shared) for head in heads]


class QualityHead(nn.Module):
    """Regresses the train-mode quality score from a candidate alone."""

    def __init__(self, n_modalities, width=16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, width // 2, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(width // 2, width, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.GELU())
        self.target_bias = nn.Embedding(n_modalities, 2 * width + 2)
        self.out = nn.Linear(2 * width + 2, 1)

    def forward(self, img, target_index):
        h = self.features(img)
        stats = torch.stack([img.mean(dim=(1, 2, 3)), img.std(dim=(1, 2, 3))], dim=1)
        feats = torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3)), stats], dim=1)
        feats = feats + self.target_bias.weight[target_index]
        return torch.sigmoid(self.out(feats)).squeeze(-1)


def score_quality(candidate, x_ref=None, spec: Optional[ModalitySpec] = None, mode="train",
                  quality_head: Optional[QualityHead] = None, target_index: int = 0):
    """Per-image quality in [0, 1].

    ``train``: (1 + SSIM(candidate, ground truth)) / 2.
    ``infer``: learned quality head minus an intensity-band penalty.
    """
    cand = candidate if candidate.ndim == 4 else candidate.reshape(-1, 1, *candidate.shape[-2:])
    if mode == "train":
        if x_ref is None:
            raise ContractError("train-mode quality needs the ground-truth image")
        ref = x_ref if x_ref.ndim == 4 else x_ref.reshape(-1, 1, *x_ref.shape[-2:])
        return (1.0 + ssim_torch(cand, ref, reduce=False)) / 2.0
    if mode == "infer":
        if quality_head is None:
            raise ContractError("infer-mode quality needs a trained quality head")
        q = quality_head(cand, target_index)
        if spec is not None:
            q = q - spec.penalty(cand.mean(dim=(1, 2, 3)))
        return q.clamp(0.0, 1.0)
    raise ContractError(f"unknown quality mode {mode!r}")


def select_winner(scores) -> int:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ContractError("cannot select from an empty candidate set")
    return int(np.argmax(scores))  # first maximum wins ties


def select_and_feedback(cset: CandidateSet, q_previous: float):
    """Pick the best-scoring candidate and report the quality change."""
    if not cset.candidates:
        raise ContractError("cannot select from an empty candidate set")
    k = select_winner(cset.scores)
    cset.winner_index = k
    cset.delta_q = float(cset.scores[k]) - float(q_previous)
    return cset.candidates[k], cset.delta_q


class TaskHeadNet(nn.Module):
    def __init__(self, n_modalities, dim, k_head=3):
        super().__init__()
        if k_head < 1:
            raise ContractError("k_head must be >= 1")
        self.k_head = k_head
        self.shared = SharedEnc(dim)
        self.heads = nn.ModuleList(
            nn.ModuleList(CandidateHead(dim, HEAD_KERNELS[k % 3]) for k in range(k_head))
            for _ in range(n_modalities))
        self.quality = QualityHead(n_modalities)

    def forward(self, f_base, weighted_aux, c_task, target_index):
        enc = shared_encode(f_base, weighted_aux, c_task, self.shared)
        return enc, generate_candidates(enc, self.heads[target_index])
