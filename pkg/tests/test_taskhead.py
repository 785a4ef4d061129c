import numpy as np
import pytest
import torch

from medk2n.metrics import ssim
from medk2n.taskhead import (CandidateHead, CandidateSet, ModalitySpec, QualityHead, SharedEnc,
                             TaskHeadNet, generate_candidates, score_quality, select_and_feedback,
                             select_winner, shared_encode, weighted_aux_sum)
from medk2n.types import ContractError

D = 6


def _f(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_weighted_aux_sum_matches_loop():
    fb = _f(2, D, 4, 4)
    aux = [(torch.rand(2, 1, 4, 4, dtype=torch.float64), _f(2, D, 4, 4, seed=1)),
           (torch.rand(2, 1, 4, 4, dtype=torch.float64), _f(2, D, 4, 4, seed=2))]
    got = weighted_aux_sum(fb, aux).numpy()
    exp = np.zeros(got.shape)
    for w, F in aux:
        w, F = w.numpy(), F.numpy()
        for b in range(2):
            for c in range(D):
                for i in range(4):
                    for j in range(4):
                        exp[b, c, i, j] += w[b, 0, i, j] * F[b, c, i, j]
    np.testing.assert_allclose(got, exp, atol=1e-12)


def test_shared_encode_zero_weights_equals_empty():
    enc = SharedEnc(D).double()
    fb, fa, c = _f(2, D, 4, 4), _f(2, D, 4, 4, seed=3), _f(D, seed=4)
    zero = shared_encode(fb, [(torch.zeros(2, 1, 4, 4, dtype=torch.float64), fa)], c, enc)
    empty = shared_encode(fb, [], c, enc)
    torch.testing.assert_close(zero.f_shared, empty.f_shared)


def test_blend_is_scale_free():
    # aux copies of the base at any weight leave the blend unchanged
    enc = SharedEnc(D).double()
    fb, c = _f(2, D, 4, 4), _f(D, seed=4)
    empty = shared_encode(fb, [], c, enc).f_shared
    for w in (0.3, 1.0):
        aux = [(torch.full((2, 1, 4, 4), w, dtype=torch.float64), fb.clone()) for _ in range(3)]
        torch.testing.assert_close(shared_encode(fb, aux, c, enc).f_shared, empty)


def test_unit_weight_passes_raw_features():
    fb, fa = _f(1, D, 3, 3), _f(1, D, 3, 3, seed=5)
    torch.testing.assert_close(weighted_aux_sum(fb, [(torch.ones(1, 1, 3, 3, dtype=torch.float64), fa)]), fa)


def test_shape_mismatch():
    fb = _f(1, D, 4, 4)
    with pytest.raises(ContractError):
        weighted_aux_sum(fb, [(torch.ones(1, 1, 4, 4), _f(1, D, 3, 4))])
    with pytest.raises(ContractError):
        weighted_aux_sum(fb, [(torch.ones(1, 1, 2, 2), _f(1, D, 4, 4))])


def test_candidates_range_and_diversity():
    torch.manual_seed(0)
    heads = [CandidateHead(D, k).double() for k in (3, 5, 7)]
    enc = shared_encode(_f(2, D, 4, 4), [], _f(D), SharedEnc(D).double())
    cands = generate_candidates(enc, heads)
    assert len(cands) == 3
    for c in cands:
        assert c.shape == (2, 1, 16, 16) and c.min() >= 0 and c.max() <= 1
    for i in range(3):
        for j in range(i + 1, 3):
            assert (cands[i] - cands[j]).abs().max() > 0
    assert [h.dec1.kernel_size[0] for h in heads] == [3, 5, 7]


def test_identical_heads_identical_candidates():
    h = CandidateHead(D, 3).double()
    h2 = CandidateHead(D, 3).double()
    h2.load_state_dict(h.state_dict())
    enc = shared_encode(_f(1, D, 4, 4), [], _f(D), SharedEnc(D).double())
    a, b = generate_candidates(enc, [h, h2])
    assert torch.equal(a, b)


def test_single_head():
    enc = shared_encode(_f(1, D, 4, 4), [], _f(D), SharedEnc(D).double())
    assert len(generate_candidates(enc, [CandidateHead(D, 3).double()])) == 1
    with pytest.raises(ContractError):
        generate_candidates(enc, [])


def test_taskhead_kernel_cycle():
    net = TaskHeadNet(2, D, k_head=4)
    assert [h.dec1.kernel_size[0] for h in net.heads[0]] == [3, 5, 7, 3]


def test_train_quality_identity_is_one():
    g = torch.rand(2, 1, 16, 16, dtype=torch.float64)
    q = score_quality(g, g, mode="train")
    torch.testing.assert_close(q, torch.ones(2, dtype=torch.float64))


def test_train_quality_inverted_below_half(rng):
    gt = rng.random((24, 24))
    q = score_quality(torch.tensor(1 - gt)[None, None], torch.tensor(gt)[None, None], mode="train")
    assert q.item() < 0.5
    assert q.item() == pytest.approx((1 + ssim(1 - gt, gt)) / 2, abs=1e-12)


def test_train_quality_needs_reference():
    with pytest.raises(ContractError):
        score_quality(torch.rand(1, 1, 16, 16), None, mode="train")
    with pytest.raises(ContractError):
        score_quality(torch.rand(1, 1, 16, 16), mode="infer")
    with pytest.raises(ContractError):
        score_quality(torch.rand(1, 1, 16, 16), mode="bogus")


def test_infer_quality_band_penalty():
    qh = QualityHead(2).double()
    img = torch.full((1, 1, 16, 16), 0.9, dtype=torch.float64)
    free = score_quality(img, spec=ModalitySpec("x", 0.0, 1.0), mode="infer", quality_head=qh)
    pen = score_quality(img, spec=ModalitySpec("x", 0.1, 0.3), mode="infer", quality_head=qh)
    assert pen.item() < free.item()
    assert 0.0 <= pen.item() <= 1.0


def test_modality_spec_band_validation():
    with pytest.raises(ContractError):
        ModalitySpec("x", 0.5, 0.2)


def test_select_winner_rules():
    assert select_winner([0.3, 0.9, 0.5]) == 1
    assert select_winner([0.4, 0.4, 0.4]) == 0
    s = np.array([0.2, 0.7, 0.1])
    assert select_winner(s * 3.7 + 1.0) == select_winner(s)
    with pytest.raises(ContractError):
        select_winner([])


def test_select_and_feedback_delta():
    cands = [torch.zeros(1), torch.ones(1), torch.full((1,), 2.0)]
    cs = CandidateSet(cands, scores=np.array([0.3, 0.9, 0.5]))
    y, dq = select_and_feedback(cs, q_previous=0.6)
    assert torch.equal(y, cands[1]) and cs.winner_index == 1 and dq == pytest.approx(0.3)
    with pytest.raises(ContractError):
        select_and_feedback(CandidateSet([], scores=np.array([])), 0.0)


def test_gradcheck_shared_encode():
    enc = SharedEnc(D).double()
    fb = _f(1, D, 3, 3).requires_grad_(True)
    fa = _f(1, D, 3, 3, seed=1).requires_grad_(True)
    w = torch.rand(1, 1, 3, 3, dtype=torch.float64, requires_grad=True)
    c = _f(D, seed=2)
    assert torch.autograd.gradcheck(lambda a, b, ww: shared_encode(a, [(ww, b)], c, enc).f_shared,
                                    (fb, fa, w), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_gradcheck_candidate_head():
    head = CandidateHead(4, 3).double()
    x = torch.randn(1, 4, 3, 3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(head, (x,), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_gradcheck_train_quality():
    ref = torch.rand(1, 1, 12, 12, dtype=torch.float64)
    x = torch.rand(1, 1, 12, 12, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: score_quality(t, ref, mode="train"), (x,),
                                    eps=1e-6, atol=1e-8, rtol=1e-4)
