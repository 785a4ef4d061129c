"""Progressive K->N generator: key frame baseline plus gated auxiliary frames."""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .cmim import CMIM
from .config import AblationConfig, ModelConfig
from .encoder import MultiScaleEncoder
from .fusion import FusionDecision, FusionWeights, pool
from .taskhead import ModalitySpec, TaskHeadNet, score_quality
from .types import ContractError, K2NTask, ModalityId


@dataclass
class TargetOutput:
    target: ModalityId
    candidates: List[torch.Tensor]  # K_head x (B, 1, H, W)
    scores: torch.Tensor  # (B, K_head)
    winners: torch.Tensor  # (B,) long
    final: torch.Tensor  # (B, 1, H, W)
    decisions: List[FusionDecision] = field(default_factory=list)
    f_shared: Optional[torch.Tensor] = None


def first_argmax(scores: torch.Tensor) -> torch.Tensor:
    """Row-wise argmax with ties resolved to the lowest index."""
    s = scores.detach().cpu().numpy()
    return torch.as_tensor(np.argmax(s, axis=1), dtype=torch.long, device=scores.device)


class MedK2N(nn.Module):
    def __init__(self, schema: Sequence[ModalityId], cfg: ModelConfig):
        super().__init__()
        self.schema = tuple(schema)
        self.cfg = cfg
        M = len(self.schema)
        self.encoder = MultiScaleEncoder(cfg.dim)
        self.fusion = FusionWeights(M, cfg.dim, cfg.mem_slots)
        self.taskhead = TaskHeadNet(M, cfg.dim, cfg.k_head)
        self.cmim = CMIM(self.schema, cfg.cmim_dim)
        self.register_buffer("bands", torch.tensor([[0.0, 1.0]] * M))

    def modality_spec(self, m: ModalityId) -> ModalitySpec:
        lo, hi = self.bands[m.index].tolist()
        return ModalitySpec(m.name, lo, hi)

    def set_bands(self, bands: Dict[str, tuple]):
        for m in self.schema:
            if m.name in bands:
                self.bands[m.index] = torch.tensor(bands[m.name], dtype=self.bands.dtype)

    def encode_inputs(self, images: Dict[str, torch.Tensor], order):
        B = images[order[0].name].shape[0]
        x = torch.cat([images[m.name] for m in order], dim=0)
        if x.ndim == 3:
            x = x[:, None]
        fm = self.encoder(x)
        return [f.reshape(len(order), B, *f.shape[1:]) for f in fm.scales]

    def forward(self, images: Dict[str, torch.Tensor], task: K2NTask,
                ablation: Optional[AblationConfig] = None, gt: Optional[Dict[str, torch.Tensor]] = None,
                mode: str = "train"):
        """Generate every target of ``task``.

        ``images`` maps modality name to (B, H, W) or (B, 1, H, W) tensors.
        ``mode='train'`` scores candidates against ``gt``; ``'infer'`` uses the
        learned quality head.
        """
        ablation = ablation or AblationConfig()
        order = task.ordered_inputs()
        for m in order:
            if m.name not in images:
                raise ContractError(f"input modality {m.name} missing from batch")
        scales = self.encode_inputs(images, order)
        finest = scales[-1]  # (K, B, D, h, w)
        if ablation.baseline_fusion:
            f_base = finest.mean(dim=0)
            aux = []
        else:
            f_base = finest[0]
            aux = list(zip(order[1:], finest[1:]))
        B = f_base.shape[0]
        prev = f_base.new_zeros(B, f_base.shape[1])
        outputs = {}
        for tgt in task.ordered_targets():
            decisions, weighted = [], []
            for src, f_aux in aux:
                d = self.fusion(f_base, f_aux, prev, src.index, tgt.index, src.name, tgt.name,
                                use_pre=ablation.pre_weight, use_threshold=ablation.threshold,
                                use_effi=ablation.effective_weight)
                decisions.append(d)
                weighted.append((d.w_eff, f_aux))
            c_task = self.fusion.task_embed[tgt.index]
            enc, cands = self.taskhead(f_base, weighted, c_task, tgt.index)
            if mode == "train":
                if gt is None or tgt.name not in gt:
                    raise ContractError(f"train-mode scoring needs ground truth for {tgt.name}")
                ref = gt[tgt.name]
                ref = ref if ref.ndim == 4 else ref[:, None]
                scores = torch.stack([score_quality(c.detach(), ref, mode="train") for c in cands], dim=1)
            else:
                spec = self.modality_spec(tgt)
                scores = torch.stack([score_quality(c, spec=spec, mode="infer",
                                                    quality_head=self.taskhead.quality,
                                                    target_index=tgt.index) for c in cands], dim=1)
            winners = first_argmax(scores)
            stacked = torch.stack(cands, dim=1)  # (B, K, 1, H, W)
            final = stacked[torch.arange(B), winners]
            outputs[tgt.name] = TargetOutput(tgt, cands, scores, winners, final, decisions, enc.f_shared)
            prev = pool(enc.f_shared)
        return outputs
