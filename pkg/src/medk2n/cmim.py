"""Modality-identity losses: image/text dual encoders, contrastive and triplet terms."""

from typing import Dict, List, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .types import ModalityId

DEFAULT_TEMPERATURE = 0.07
DEFAULT_MARGIN = 0.2


class VocabularyError(KeyError):
    pass


def tokenize(text: str) -> List[str]:
    return text.lower().replace("-", " ").split()


class Vocabulary:
    def __init__(self, texts: Sequence[str]):
        words = sorted({w for t in texts for w in tokenize(t)})
        self.index: Dict[str, int] = {w: i for i, w in enumerate(words)}

    def __len__(self):
        return len(self.index)

    def encode(self, text: str) -> List[int]:
        ids = []
        for w in tokenize(text):
            if w not in self.index:
                raise VocabularyError(f"token {w!r} not in the modality template vocabulary")
            ids.append(self.index[w])
        return ids


class VisionEncoder(nn.Module):
    def __init__(self, out_dim=32, width=16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, width // 2, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(width // 2, width, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.GELU())
        self.proj = nn.Linear(2 * width + 2, out_dim)

    def forward(self, img):
        if img.ndim == 2:
            img = img[None, None]
        elif img.ndim == 3:
            img = img[:, None]
        h = self.net(img)
        stats = torch.stack([img.mean(dim=(1, 2, 3)), img.std(dim=(1, 2, 3))], dim=1)
        z = self.proj(torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3)), stats], dim=1))
        return F.normalize(z, dim=-1)


class TextEncoder(nn.Module):
    """Mean embedding-bag over template tokens, projected and normalised."""

    def __init__(self, vocab: Vocabulary, out_dim=32, embed_dim=32):
        super().__init__()
        self.vocab = vocab
        self.bag = nn.EmbeddingBag(len(vocab), embed_dim, mode="mean")
        self.proj = nn.Linear(embed_dim, out_dim)

    def forward(self, texts: Sequence[str]):
        ids, offsets = [], []
        for t in texts:
            offsets.append(len(ids))
            ids.extend(self.vocab.encode(t))
        ids_t = torch.as_tensor(ids, dtype=torch.long, device=self.proj.weight.device)
        off_t = torch.as_tensor(offsets, dtype=torch.long, device=self.proj.weight.device)
        return F.normalize(self.proj(self.bag(ids_t, off_t)), dim=-1)


def embed_image(image, encoder: VisionEncoder):
    return encoder(torch.as_tensor(image, dtype=encoder.proj.weight.dtype))


def embed_text(description: str, encoder: TextEncoder):
    return encoder([description])[0]


def identity_logits(V, T, temperature=DEFAULT_TEMPERATURE):
    """Cosine similarities of image embeddings ``V`` (B, d) against text
    embeddings ``T`` (M, d), divided by the temperature."""
    return F.normalize(V, dim=-1) @ F.normalize(T, dim=-1).transpose(0, 1) / temperature


def identity_contrastive_loss(V, T, labels, temperature=DEFAULT_TEMPERATURE):
    """Contrastive loss where row ``b`` of ``V`` should match ``T[labels[b]]``."""
    return F.cross_entropy(identity_logits(V, T, temperature), labels)


def contrastive_loss(V, T, temperature=DEFAULT_TEMPERATURE):
    """Aligned image/text contrastive loss: ``V[j]`` pairs with ``T[j]``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    labels = torch.arange(V.shape[0], device=V.device)
    return identity_contrastive_loss(V, T, labels, temperature)


def metric_loss(v_gen, v_ref, v_neg, margin=DEFAULT_MARGIN):
    """Sum over rows of ``max(0, margin + d(gen, ref) - d(gen, neg))``."""
    if not (v_gen.shape == v_ref.shape == v_neg.shape):
        raise ValueError("anchor, positive and negative batches must match in shape")
    d_pos = torch.linalg.vector_norm(v_gen - v_ref, dim=-1)
    d_neg = torch.linalg.vector_norm(v_gen - v_neg, dim=-1)
    return torch.clamp(margin + d_pos - d_neg, min=0.0).sum()


class CMIM(nn.Module):
    def __init__(self, schema: Sequence[ModalityId], out_dim=32, width=16):
        super().__init__()
        self.templates = [m.description_text for m in schema]
        self.vision = VisionEncoder(out_dim, width)
        self.text = TextEncoder(Vocabulary(self.templates), out_dim)

    def text_bank(self):
        return self.text(self.templates)

    def nearest_modality(self, images):
        with torch.no_grad():
            return identity_logits(self.vision(images), self.text_bank()).argmax(dim=-1)


def pretrain_identity(cmim: CMIM, images, labels, epochs=20, lr=2e-3, batch_size=32, seed=0,
                      temperature=DEFAULT_TEMPERATURE, freeze=True):
    """Fit both encoders on real images against their modality templates,
    then freeze them.

    Stands in for a pretrained image/text tower: the identity losses later
    score generated images against a fixed, already-confident judge.
    ``images`` is (N, 1, H, W), ``labels`` (N,) schema indices. Returns the
    mean loss per epoch.
    """
    cmim.requires_grad_(True)
    opt = torch.optim.Adam(cmim.parameters(), lr=lr)
    labels = torch.as_tensor(labels, dtype=torch.long)
    rng = np.random.default_rng([seed, 4241])
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(images))
        losses = []
        for i in range(0, len(order), batch_size):
            idx = torch.as_tensor(order[i:i + batch_size])
            loss = identity_contrastive_loss(cmim.vision(images[idx]), cmim.text_bank(), labels[idx],
                                             temperature)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        history.append(float(np.mean(losses)))
    opt.zero_grad(set_to_none=True)
    if freeze:
        cmim.requires_grad_(False)
    return history
