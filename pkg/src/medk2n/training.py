"""Loss assembly and the curriculum training loop."""

import json
import math
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import save_model
from .cmim import identity_contrastive_loss, metric_loss, pretrain_identity
from .config import AblationConfig, LossWeights, RunConfig, STAGES, architecture_hash
from .curriculum import UNIFORM, lr_at, sample_pattern, stage_loss_mask, stage_of
from .dataset import augment, modality_bands
from .metrics import ssim_torch
from .model import MedK2N
from .types import PairedSample

LOSER_WEIGHT = 0.1
ERROR_MAP_WEIGHT = 0.05
QUALITY_HEAD_WEIGHT = 1.0
IDENTITY_PRETRAIN_EPOCHS = 20


def total_loss(pred, gt, cmim_terms, lam: LossWeights):
    """``l1*L1 + ssim*(1 - SSIM) + causal*L_causal + metric*L_metric``.

    ``cmim_terms`` is ``(L_causal, L_metric)``; entries may be None when the
    matching weight is zero. Returns ``(total, parts)``.
    """
    lam.validate()
    pred = pred if pred.ndim == 4 else pred[:, None]
    gt = gt if gt.ndim == 4 else gt[:, None]
    parts = {"l1": torch.mean(torch.abs(pred - gt)),
             "ssim": 1.0 - ssim_torch(pred, gt)}
    causal, metric = cmim_terms if cmim_terms is not None else (None, None)
    zero = pred.new_zeros(())
    parts["causal"] = causal if causal is not None else zero
    parts["metric"] = metric if metric is not None else zero
    total = (lam.l1 * parts["l1"] + lam.ssim * parts["ssim"]
             + lam.causal * parts["causal"] + lam.metric * parts["metric"])
    return total, parts


def batch_tensors(samples: Sequence[PairedSample], names=None, dtype=torch.float32):
    names = names or [m.name for m in samples[0].schema if m.name in samples[0].slices]
    return {n: torch.as_tensor(np.stack([s.slices[n] for s in samples]), dtype=dtype) for n in names}


def per_image_l1(pred, gt):
    return torch.abs(pred - gt).mean(dim=(1, 2, 3))


class Trainer:
    def __init__(self, cfg: RunConfig, train: List[PairedSample], val: List[PairedSample] = (),
                 log_path=None, ckpt_dir=None, rank=0, quiet=True):
        self.cfg = cfg.validate()
        self.schema = train[0].schema
        self.train_set = list(train)
        self.val_set = list(val)
        self.ablation: AblationConfig = cfg.ablation_flags
        self.rank = rank
        self.quiet = quiet
        torch.manual_seed(cfg.seed)
        self.model = MedK2N(self.schema, cfg.model)
        self.model.set_bands(modality_bands(self.train_set))
        self.arch_hash = architecture_hash(cfg.architecture())
        lr = cfg.optim.lr * (1.1 if cfg.optim.lr_boost_multi_target else 1.0)
        self.base_lr = lr
        self.opt = torch.optim.Adam(self.model.parameters(), lr=lr, betas=tuple(cfg.optim.betas))
        self.clip_groups = [
            [p for n, p in self.model.named_parameters() if not n.startswith("cmim.")],
            list(self.model.cmim.parameters())]
        self.steps_per_epoch = math.ceil(math.ceil(len(self.train_set) / cfg.optim.batch_size)
                                         / cfg.optim.accumulation)
        self.total_steps = self.steps_per_epoch * cfg.optim.epochs
        self.step = 0
        self.q_prev: Dict[str, float] = {}
        self.log_path = Path(log_path) if log_path else None
        self.ckpt_dir = Path(ckpt_dir) if ckpt_dir else None
        self.history = []
        self.identity_pretrained = False

    # -- loss for one batch -------------------------------------------------

    def batch_loss(self, images, task, stage, rng, feedback=True):
        """Total loss for one batch. ``feedback=False`` leaves the performance
        history and the previous-quality record untouched."""
        cfg = self.cfg
        lam = cfg.loss
        use_cmim = self.ablation.cmim
        causal_on, metric_on = (True, True)
        if self.ablation.curriculum and stage in STAGES:
            causal_on, metric_on = stage_loss_mask(stage)
        out = self.model(images, task, self.ablation, gt=images, mode="train")
        total = 0.0
        record = {"l1": 0.0, "ssim": 0.0, "causal": 0.0, "metric": 0.0, "quality": 0.0,
                  "error_map": 0.0}
        text_bank = self.model.cmim.text_bank() if use_cmim else None
        diag = []
        for name, o in out.items():
            gt = images[name][:, None]
            B = gt.shape[0]
            cmim_terms = (None, None)
            if use_cmim and (causal_on or metric_on):
                cmim_terms = self.cmim_terms(o, images, text_bank, causal_on, metric_on, rng)
            lt, parts = total_loss(o.final, gt, cmim_terms, lam)
            loser = 0.0
            for k, c in enumerate(o.candidates):
                lost = (o.winners != k).to(c.dtype)
                rec = lam.l1 * per_image_l1(c, gt) + lam.ssim * (1.0 - ssim_torch(c, gt, reduce=False))
                loser = loser + (lost * rec).mean()
            q_loss = 0.0
            for k, c in enumerate(o.candidates):
                q_pred = self.model.taskhead.quality(c.detach(), o.target.index)
                q_loss = q_loss + F.mse_loss(q_pred, o.scores[:, k])
            e_loss = 0.0
            if self.ablation.effective_weight and o.decisions:
                # local error map is a regression target for the spatial head only
                err = torch.abs(o.final.detach() - gt)
                err = F.adaptive_avg_pool2d(err, o.decisions[0].w_eff.shape[-2:])
                err = err / (err.amax(dim=(2, 3), keepdim=True) + 1e-6)
                for d in o.decisions:
                    e_loss = e_loss + F.mse_loss(d.spatial, err)
            total = total + lt + LOSER_WEIGHT * loser + QUALITY_HEAD_WEIGHT * q_loss + ERROR_MAP_WEIGHT * e_loss
            for key in ("l1", "ssim", "causal", "metric"):
                record[key] += float(parts[key].detach())
            record["quality"] += float(q_loss.detach()) if torch.is_tensor(q_loss) else q_loss
            record["error_map"] += float(e_loss.detach()) if torch.is_tensor(e_loss) else e_loss
            # quality feedback
            q_now = float(o.scores[torch.arange(B), o.winners].mean())
            dq = q_now - self.q_prev.get(name, q_now)
            if feedback:
                self.q_prev[name] = q_now
                for d in o.decisions:
                    self.model.fusion.record_quality(self.schema_index(d.source), o.target.index, q_now)
            diag.append({"target": name, "q": q_now, "delta_q": dq,
                         "fusion": [d.summary() for d in o.decisions]})
        record["total"] = float(total.detach())
        return total, record, diag

    def cmim_terms(self, o, images, text_bank, causal_on, metric_on, rng):
        """``(L_causal, L_metric)`` for one target output: identity of the
        generated image against the templates, and a triplet pulling it toward
        the real target and away from a real image of another modality."""
        cfg, lam = self.cfg, self.cfg.loss
        cmim = self.model.cmim
        name = o.target.name
        gt = images[name][:, None]
        B = gt.shape[0]
        v_gen = cmim.vision(o.final)
        causal = metric = None
        if causal_on and lam.causal > 0:
            labels = torch.full((B,), o.target.index, dtype=torch.long)
            causal = identity_contrastive_loss(v_gen, text_bank, labels, cfg.model.temperature)
        if metric_on and lam.metric > 0:
            others = [m.name for m in self.schema if m.name != name and m.name in images]
            neg_name = others[int(rng.integers(len(others)))]
            v_ref = cmim.vision(gt)
            v_neg = cmim.vision(images[neg_name][:, None])
            metric = metric_loss(v_gen, v_ref, v_neg, cfg.model.margin) / B
        return causal, metric

    def pretrain_identity(self, epochs=IDENTITY_PRETRAIN_EPOCHS):
        """Train and freeze the identity encoders on the real training images."""
        names = [m.name for m in self.schema]
        imgs, labels = [], []
        for s in self.train_set:
            for m in self.schema:
                if m.name in s.slices:
                    imgs.append(s.slices[m.name])
                    labels.append(m.index)
        x = torch.as_tensor(np.stack(imgs)[:, None], dtype=torch.float32)
        hist = pretrain_identity(self.model.cmim, x, labels, epochs=epochs, seed=self.cfg.seed,
                                 temperature=self.cfg.model.temperature)
        with torch.no_grad():
            acc = float((self.model.cmim.nearest_modality(x) == torch.as_tensor(labels)).float().mean())
        self.identity_pretrained = True
        self._log({"identity_pretrain": {"losses": hist, "real_accuracy": acc, "modalities": names}})
        return hist

    def objective(self, images, task, rng):
        """Plain ``L_total`` summed over targets, without the auxiliary head
        terms. Winner selection is the only non-smooth step."""
        out = self.model(images, task, self.ablation, gt=images, mode="train")
        use_cmim = self.ablation.cmim
        text_bank = self.model.cmim.text_bank() if use_cmim else None
        total = 0.0
        for name, o in out.items():
            terms = self.cmim_terms(o, images, text_bank, True, True, rng) if use_cmim else None
            lt, _ = total_loss(o.final, images[name][:, None], terms, self.cfg.loss)
            total = total + lt
        return total

    def schema_index(self, name):
        for m in self.schema:
            if m.name == name:
                return m.index
        raise KeyError(name)

    # -- epochs ---------------------------------------------------------------

    def stage_for(self, epoch):
        if self.ablation.curriculum and self.cfg.curriculum.enabled:
            return stage_of(epoch, self.cfg.curriculum)
        return UNIFORM

    def _log(self, rec):
        self.history.append(rec)
        if self.log_path:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def train_epoch(self, epoch):
        cfg = self.cfg
        bs, acc = cfg.optim.batch_size, cfg.optim.accumulation
        stage = self.stage_for(epoch)
        order = np.random.default_rng([cfg.seed, epoch, 7919]).permutation(len(self.train_set))
        batches = [order[i:i + bs] for i in range(0, len(order), bs)]
        self.model.train()
        epoch_losses = []
        self.opt.zero_grad()
        pending = 0
        for b, idx in enumerate(batches):
            task = sample_pattern(stage, self.schema, cfg.seed, epoch, b, self.rank)
            rng = np.random.default_rng([cfg.seed, epoch, b, self.rank, 1])
            samples = [self.train_set[i] for i in idx]
            samples = [s for s in samples if s.has(list(task.inputs) + list(task.targets))]
            if not samples:
                continue
            if cfg.data.augment:
                samples = [augment(s, np.random.default_rng([cfg.seed, epoch, b, int(i)]))
                           for s, i in zip(samples, idx)]
            images = batch_tensors(samples)
            loss, rec, diag = self.batch_loss(images, task, stage, rng)
            (loss / acc).backward()
            pending += 1
            epoch_losses.append(rec["total"])
            if pending == acc or b == len(batches) - 1:
                lr = lr_at(min(self.step, self.total_steps), self.total_steps, self.base_lr)
                for g in self.opt.param_groups:
                    g["lr"] = lr
                if cfg.optim.grad_clip > 0:
                    # the identity encoders are clipped on their own so their
                    # gradients never throttle the generator step
                    for group in self.clip_groups:
                        torch.nn.utils.clip_grad_norm_(group, cfg.optim.grad_clip)
                self.opt.step()
                self.opt.zero_grad()
                pending = 0
                self.step += 1
                self._log({"step": self.step, "epoch": epoch, "stage": stage, "task": task.describe(),
                           "lr": lr, "losses": rec, "targets": diag})
        return float(np.mean(epoch_losses)) if epoch_losses else float("nan")

    def save(self, path, epoch=None):
        meta = {"config": self.cfg.to_dict(), "epoch": epoch, "ablation": self.cfg.ablation,
                "schema": [[m.name, m.description_text] for m in self.schema]}
        return save_model(self.model, path, self.arch_hash, meta)

    def fit(self, on_epoch=None):
        bounds = set(b - 1 for b in self.cfg.curriculum.boundaries())
        if self.ablation.cmim and not self.identity_pretrained:
            self.pretrain_identity()
        losses = []
        for epoch in range(self.cfg.optim.epochs):
            t0 = time.time()
            loss = self.train_epoch(epoch)
            losses.append(loss)
            if not self.quiet:
                print(f"epoch {epoch:3d} [{self.stage_for(epoch)}] loss {loss:.4f} ({time.time() - t0:.1f}s)",
                      flush=True)
            if self.ckpt_dir is not None and epoch in bounds and self.stage_for(epoch) != UNIFORM:
                self.save(self.ckpt_dir / f"stage_{self.stage_for(epoch)}.mk2n", epoch)
            if on_epoch:
                on_epoch(epoch, loss)
        if self.ckpt_dir is not None:
            self.save(self.ckpt_dir / "final.mk2n", self.cfg.optim.epochs - 1)
        return losses
