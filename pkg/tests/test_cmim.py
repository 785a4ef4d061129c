import math

import numpy as np
import pytest
import torch

from medk2n.cmim import (CMIM, TextEncoder, VisionEncoder, Vocabulary, VocabularyError, contrastive_loss,
                         embed_image, embed_text, metric_loss, pretrain_identity)
from medk2n.types import default_schema


def contrastive_loop(V, T, tau):
    N = len(V)
    total = 0.0
    for j in range(N):
        sims = []
        for k in range(N):
            dot = sum(a * b for a, b in zip(V[j], T[k]))
            nv = math.sqrt(sum(a * a for a in V[j]))
            nt = math.sqrt(sum(b * b for b in T[k]))
            sims.append(dot / (nv * nt) / tau)
        top = max(sims)
        lse = top + math.log(sum(math.exp(s - top) for s in sims))
        total += lse - sims[j]
    return total / N


def metric_loop(g, r, n, alpha):
    total = 0.0
    for a, p, q in zip(g, r, n):
        dp = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, p)))
        dn = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, q)))
        total += max(0.0, alpha + dp - dn)
    return total


def _unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture
def cmim():
    torch.manual_seed(0)
    return CMIM(default_schema()).double()


def test_image_embedding_norm(cmim, rng):
    v = embed_image(rng.random((2, 32, 32)), cmim.vision)
    np.testing.assert_allclose(v.norm(dim=-1).detach().numpy(), 1.0, atol=1e-6)
    v1 = embed_image(rng.random((32, 32)), cmim.vision)
    assert v1.shape == (1, 32)


def test_image_embedding_deterministic(cmim, rng):
    x = rng.random((1, 32, 32))
    assert torch.equal(embed_image(x, cmim.vision), embed_image(x, cmim.vision))


def test_text_embeddings(cmim):
    texts = cmim.templates
    a, b = embed_text(texts[0], cmim.text), embed_text(texts[0], cmim.text)
    assert torch.equal(a, b)
    assert a.norm().item() == pytest.approx(1.0, abs=1e-6)
    bank = cmim.text_bank()
    for i in range(len(texts)):
        for j in range(i + 1, len(texts)):
            assert torch.dot(bank[i], bank[j]).item() < 1.0


def test_unknown_token(cmim):
    with pytest.raises(VocabularyError):
        embed_text("computed tomography", cmim.text)


def test_contrastive_singleton_is_zero(rng):
    V = torch.tensor(_unit(rng, 1, 8))
    T = torch.tensor(_unit(rng, 1, 8))
    assert contrastive_loss(V, T, 0.07).item() == 0.0


def test_contrastive_orthonormal_hand_oracle():
    tau = 0.07
    E = torch.eye(3, dtype=torch.float64)
    expected = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + 2 * math.exp(0.0)))
    assert contrastive_loss(E, E, tau).item() == pytest.approx(expected, rel=1e-12)


def test_contrastive_matches_loop(rng):
    for n in (2, 4, 7):
        V, T = _unit(rng, n, 5), _unit(rng, n, 5)
        got = contrastive_loss(torch.tensor(V), torch.tensor(T), 0.07).item()
        assert got == pytest.approx(contrastive_loop(V.tolist(), T.tolist(), 0.07), abs=1e-10)
        assert got >= 0


def test_contrastive_negative_permutation_invariant(rng):
    V, T = _unit(rng, 5, 6), _unit(rng, 5, 6)
    base = contrastive_loss(torch.tensor(V), torch.tensor(T)).item()
    perm = np.array([0, 3, 1, 4, 2])
    # permuting both rows keeps the pairing and only reorders negatives
    assert contrastive_loss(torch.tensor(V[perm]), torch.tensor(T[perm])).item() == pytest.approx(base, abs=1e-12)


def test_contrastive_rejects_bad_temperature(rng):
    with pytest.raises(ValueError):
        contrastive_loss(torch.tensor(_unit(rng, 2, 3)), torch.tensor(_unit(rng, 2, 3)), 0.0)


def test_metric_hinge_boundary():
    g = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    neg = torch.tensor([[math.cos(0.2), math.sin(0.2)]], dtype=torch.float64)
    alpha = float(torch.linalg.vector_norm(g - neg))
    assert metric_loss(g, g, neg, alpha).item() == pytest.approx(0.0, abs=1e-15)


def test_metric_equal_distances_gives_n_alpha(rng):
    g = torch.tensor(_unit(rng, 4, 3))
    assert metric_loss(g, -g, -g, 0.2).item() == pytest.approx(4 * 0.2)


def test_metric_matches_loop(rng):
    g, r, n = (_unit(rng, 6, 5) for _ in range(3))
    got = metric_loss(torch.tensor(g), torch.tensor(r), torch.tensor(n), 0.2).item()
    assert got == pytest.approx(metric_loop(g.tolist(), r.tolist(), n.tolist(), 0.2), abs=1e-12)


def test_metric_nonincreasing_in_negative_distance():
    g = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    r = torch.tensor([[0.8, 0.6]], dtype=torch.float64)
    vals = []
    for ang in np.linspace(0.1, math.pi, 12):
        n = torch.tensor([[math.cos(ang), math.sin(ang)]], dtype=torch.float64)
        vals.append(metric_loss(g, r, n, 0.5).item())
    assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))


def test_metric_shape_check():
    with pytest.raises(ValueError):
        metric_loss(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(3, 3))


def test_pretrain_identity_fits_then_freezes():
    from medk2n.dataset import PhantomSpec, generate_phantom
    data = generate_phantom(PhantomSpec(seed=0, n_cases=6, image_size=32))
    schema = data[0].schema
    model = CMIM(schema, out_dim=8).double()
    x = torch.tensor(np.stack([s.slices[m.name] for s in data for m in schema])[:, None])
    y = [m.index for _ in data for m in schema]
    hist = pretrain_identity(model, x, y, epochs=30, batch_size=8)
    assert hist[-1] < hist[0]
    assert (model.nearest_modality(x) == torch.tensor(y)).float().mean() >= 0.9
    img = x[:2].clone().requires_grad_(True)
    model.vision(img).sum().backward()
    assert img.grad is not None and img.grad.abs().sum() > 0
    assert all(p.grad is None and not p.requires_grad for p in model.parameters())


def test_nearest_modality_shape(cmim, rng):
    idx = cmim.nearest_modality(torch.tensor(rng.random((3, 1, 32, 32))))
    assert idx.shape == (3,) and idx.dtype == torch.long


def test_gradcheck_embed_image():
    torch.manual_seed(1)
    enc = VisionEncoder(out_dim=4, width=4).double()
    x = torch.rand(1, 1, 16, 16, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(enc, (x,), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_gradcheck_contrastive_and_metric(rng):
    V = torch.tensor(_unit(rng, 3, 4), requires_grad=True)
    T = torch.tensor(_unit(rng, 3, 4), requires_grad=True)
    assert torch.autograd.gradcheck(lambda a, b: contrastive_loss(a, b, 0.07), (V, T),
                                    eps=1e-6, atol=1e-8, rtol=1e-4)
    g, r, n = (torch.tensor(_unit(rng, 3, 4), requires_grad=True) for _ in range(3))
    assert torch.autograd.gradcheck(lambda a, b, c: metric_loss(a, b, c, 0.2), (g, r, n),
                                    eps=1e-6, atol=1e-8, rtol=1e-4)


def test_gradcheck_text_encoder_projection():
    vocab = Vocabulary(["alpha beta", "beta gamma"])
    enc = TextEncoder(vocab, out_dim=3, embed_dim=4).double()
    W = enc.proj.weight.detach().clone().requires_grad_(True)

    def f(w):
        with torch.no_grad():
            enc.proj.weight.copy_(w.detach())
        bag = enc.bag(torch.tensor([0, 1, 1, 2]), torch.tensor([0, 2]))
        return torch.nn.functional.normalize(bag @ w.T + enc.proj.bias, dim=-1)
    assert torch.autograd.gradcheck(f, (W,), eps=1e-6, atol=1e-8, rtol=1e-4)
