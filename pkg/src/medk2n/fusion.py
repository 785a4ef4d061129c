"""Gated fusion weights for each (source modality, target task) pair.

Three stages run in sequence for every auxiliary source:

* global importance ``w_global`` from task-aware features and a retrieved
  task-memory vector,
* an adaptive acceptance threshold ``tau`` bounded to (0.05, 0.9),
* a clamped per-pixel effective weight map ``w_eff`` in [0.001, 0.999].

``tau`` is consumed as a soft input feature; nothing here multiplies by a hard
indicator.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

TAU_MIN = 0.05
TAU_MAX = 0.9
EPS = 0.001
HISTORY_DECAY = 0.9
HISTORY_INIT = 0.5
TAU_NEUTRAL = TAU_MIN + (TAU_MAX - TAU_MIN) * 0.5  # 0.475
SOFT_GATE_TEMP = 0.05
OPEN_EPS = 1e-6  # keeps saturated sigmoids strictly inside (0, 1) in float32


def retrieve_memory(q, M):
    """Attention read of memory ``M`` (D, K) with query ``q`` (..., D).

    Returns ``(m_retrieved, weights)``.
    """
    D = M.shape[0]
    scores = (q @ M) / math.sqrt(D)
    attn = torch.softmax(scores, dim=-1)
    return attn @ M.transpose(0, 1), attn


def open_sigmoid(x):
    return torch.clamp(torch.sigmoid(x), OPEN_EPS, 1.0 - OPEN_EPS)


def threshold_from_logit(logit):
    return TAU_MIN + (TAU_MAX - TAU_MIN) * open_sigmoid(logit)


def effective_weight_from_logits(logits):
    return torch.clamp(torch.sigmoid(logits), EPS, 1.0 - EPS)


def update_history(p, q_current, decay=HISTORY_DECAY):
    return decay * p + (1.0 - decay) * q_current


def _mlp(sizes, act=nn.GELU):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2:
            layers.append(act())
    return nn.Sequential(*layers)


class TaskQueryEncoder(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(3 * dim, dim), nn.Tanh(), nn.Linear(dim, dim))

    def forward(self, base_pooled, e_task, q_context):
        e_task = e_task.expand_as(base_pooled)
        q_context = q_context.expand_as(base_pooled)
        return self.net(torch.cat([base_pooled, e_task, q_context], dim=-1))


def pool(feat):
    return feat.mean(dim=(-2, -1))


def task_query(f_base, e_task, q_context, encoder: TaskQueryEncoder):
    """Query vector from globally pooled base features and task context."""
    return encoder(pool(f_base), e_task, q_context)


class CompatEncoder(nn.Module):
    """Bilinear modality/task compatibility followed by a small MLP."""

    def __init__(self, dim, out_dim):
        super().__init__()
        self.bilinear = nn.Bilinear(dim, dim, out_dim)
        self.mlp = _mlp([out_dim, out_dim, out_dim])

    def forward(self, e_modal, e_task):
        return self.mlp(F.gelu(self.bilinear(e_modal, e_task)))


class PreWeightNet(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.task_aware = _mlp([3 * dim, hidden, dim])
        self.head = _mlp([2 * dim, hidden, 1])

    def task_aware_features(self, base_pooled, aux_pooled, prev_pooled):
        return self.task_aware(torch.cat([base_pooled, aux_pooled, prev_pooled], dim=-1))

    def forward(self, x_task_aware, m_retrieved):
        logit = self.head(torch.cat([x_task_aware, m_retrieved], dim=-1)).squeeze(-1)
        return open_sigmoid(logit), logit


def pre_weight(x_task_aware, m_retrieved, net: PreWeightNet):
    return net(x_task_aware, m_retrieved)[0]


class ThresholdNet(nn.Module):
    def __init__(self, dim, compat_dim, gate_dim):
        super().__init__()
        self.gate_controller = nn.Sequential(nn.Linear(2 + dim + compat_dim, gate_dim), nn.GELU())
        self.head = _mlp([gate_dim, gate_dim, 1])

    def forward(self, w_global, m_retrieved, compat, p_hist):
        B = m_retrieved.shape[0]
        w = w_global.reshape(B, 1)
        p = torch.as_tensor(p_hist, dtype=m_retrieved.dtype).reshape(-1, 1).expand(B, 1)
        compat = compat.expand(B, -1)
        x_gate = self.gate_controller(torch.cat([w, m_retrieved, compat, p], dim=-1))
        logit = self.head(x_gate).squeeze(-1)
        return threshold_from_logit(logit), x_gate, logit


def adaptive_threshold(w_global, m_retrieved, compat, p_hist, net: ThresholdNet):
    tau, x_gate, _ = net(w_global, m_retrieved, compat, p_hist)
    return tau, x_gate


class EffiWeightNet(nn.Module):
    """Projection of all gating context to a scalar logit, broadcast over the
    finest feature grid and added to a 1x1-conv spatial head."""

    def __init__(self, dim, gate_dim, hidden):
        super().__init__()
        self.proj = nn.Linear(2 + dim + gate_dim + 2 * dim, hidden)
        self.mlp = _mlp([hidden, hidden, 1])
        self.spatial = nn.Conv2d(2 * dim, 1, 1)

    def parts(self, w_global, tau, m_retrieved, x_gate, c_task, c_modal, f_base, f_aux):
        """Scalar context logit (B, 1, 1, 1) and spatial logit map (B, 1, h, w)."""
        B = m_retrieved.shape[0]
        ctx = torch.cat([w_global.reshape(B, 1), tau.reshape(B, 1), m_retrieved, x_gate,
                         c_task.expand(B, -1), c_modal.expand(B, -1)], dim=-1)
        fused = F.gelu(self.proj(ctx))
        scalar = self.mlp(fused).reshape(B, 1, 1, 1)
        return scalar, self.spatial(torch.cat([f_base, f_aux], dim=1))

    def logits(self, *args):
        scalar, spatial = self.parts(*args)
        return scalar + spatial

    def forward(self, *args):
        return effective_weight_from_logits(self.logits(*args))


def effective_weight(w_global, tau, m_retrieved, x_gate, c_task, c_modal, f_base, f_aux,
                     net: EffiWeightNet):
    return net(w_global, tau, m_retrieved, x_gate, c_task, c_modal, f_base, f_aux)


@dataclass
class FusionDecision:
    source: str
    target: str
    w_global: torch.Tensor  # (B,)
    tau: torch.Tensor  # (B,)
    w_eff: torch.Tensor  # (B, 1, h, w)
    x_gate: Optional[torch.Tensor] = None
    attention: Optional[torch.Tensor] = None
    spatial: Optional[torch.Tensor] = None  # sigmoid of the spatial head alone

    def summary(self):
        return {"source": self.source, "target": self.target,
                "w_global": float(self.w_global.mean().detach()),
                "tau": float(self.tau.mean().detach()),
                "w_eff_mean": float(self.w_eff.mean().detach()),
                "w_eff_min": float(self.w_eff.min().detach()),
                "w_eff_max": float(self.w_eff.max().detach())}


class FusionWeights(nn.Module):
    """Task memory, embeddings, performance history and the three gating nets."""

    def __init__(self, n_modalities, dim=64, mem_slots=8, compat_dim=None, gate_dim=None,
                 hidden=None):
        super().__init__()
        compat_dim = compat_dim or max(dim // 2, 4)
        gate_dim = gate_dim or max(dim // 2, 4)
        hidden = hidden or dim
        self.dim = dim
        self.n_modalities = n_modalities
        self.memory = nn.Parameter(torch.randn(n_modalities, dim, mem_slots) * 0.1)
        self.task_embed = nn.Parameter(torch.randn(n_modalities, dim) * 0.1)
        self.modal_embed = nn.Parameter(torch.randn(n_modalities, dim) * 0.1)
        self.q_context = nn.Parameter(torch.zeros(n_modalities, dim))
        self.register_buffer("history", torch.full((n_modalities, n_modalities), HISTORY_INIT))
        self.query = TaskQueryEncoder(dim)
        self.compat = CompatEncoder(dim, compat_dim)
        self.pre = PreWeightNet(dim, hidden)
        self.thresh = ThresholdNet(dim, compat_dim, gate_dim)
        self.effi = EffiWeightNet(dim, gate_dim, hidden)

    def forward(self, f_base, f_aux, f_prev_pooled, src, tgt, src_name="", tgt_name="",
                use_pre=True, use_threshold=True, use_effi=True):
        """``f_base``/``f_aux`` are finest-scale maps (B, D, h, w)."""
        B = f_base.shape[0]
        e_task = self.task_embed[tgt]
        e_modal = self.modal_embed[src]
        q = task_query(f_base, e_task[None], self.q_context[tgt][None], self.query)
        m, attn = retrieve_memory(q, self.memory[tgt])
        if use_pre:
            x_ta = self.pre.task_aware_features(pool(f_base), pool(f_aux), f_prev_pooled)
            w_global, _ = self.pre(x_ta, m)
        else:
            w_global = f_base.new_full((B,), 0.5)
        compat = self.compat(e_modal[None], e_task[None])
        tau, x_gate, _ = self.thresh(w_global, m, compat, self.history[src, tgt])
        if not use_threshold:
            tau = f_base.new_full((B,), TAU_NEUTRAL)
        spatial = None
        if use_effi:
            scalar, spatial_logit = self.effi.parts(w_global, tau, m, x_gate, e_task[None], e_modal[None],
                                                    f_base, f_aux)
            w_eff = effective_weight_from_logits(scalar + spatial_logit)
            spatial = torch.sigmoid(spatial_logit)
        else:
            w = w_global
            if use_threshold:
                # soft gate so the threshold still matters without the spatial net
                w = w * torch.sigmoid((w_global - tau) / SOFT_GATE_TEMP)
            w = w.clamp(EPS, 1.0 - EPS)
            w_eff = w.reshape(B, 1, 1, 1).expand(B, 1, *f_base.shape[-2:])
        return FusionDecision(source=src_name, target=tgt_name, w_global=w_global, tau=tau,
                              w_eff=w_eff, x_gate=x_gate, attention=attn, spatial=spatial)

    @torch.no_grad()
    def record_quality(self, src, tgt, q_current):
        self.history[src, tgt] = update_history(self.history[src, tgt], float(q_current))
