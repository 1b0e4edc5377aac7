import math

import pytest
import torch

from moase_tta.numeric import DTYPE, DomainError, Polarity, Rng, check_gradients
from moase_tta.sdd import (
    ExpertSpec,
    ScoreReducer,
    SparsityExpert,
    TokenMask,
    channel_mask,
    expert_bottleneck,
    keep_budget,
    sdd_mask,
    sparsify,
    token_scores,
)


def _t(values):
    return torch.tensor(values, dtype=DTYPE)


def _expert(channels: int, rank: int, seed: int = 0) -> SparsityExpert:
    return SparsityExpert(1, ExpertSpec(Polarity.TOP, 0.5, rank), channels, Rng(seed))


def test_token_scores_examples():
    features = _t([[[0.0, 0.0], [3.0, 4.0], [-1.0, 1.0]]])
    assert token_scores(features)[0].tolist() == pytest.approx([0.0, 5.0, math.sqrt(2.0)], abs=1e-12)
    assert token_scores(features, ScoreReducer.MEAN_ABS).tolist() == [[0.0, 3.5, 1.0]]


def test_token_scores_rejects_empty_channels():
    with pytest.raises(DomainError):
        token_scores(torch.zeros(1, 2, 0, dtype=DTYPE))


def test_sdd_mask_examples():
    scores = _t([[0.1, 0.9, 0.5, 0.7]])
    assert sdd_mask(scores, 0.5, Polarity.TOP).bits.tolist() == [[0.0, 1.0, 0.0, 1.0]]
    assert sdd_mask(scores, 1.0, Polarity.TOP).bits.tolist() == [[1.0, 1.0, 1.0, 1.0]]
    assert sdd_mask(scores, 0.25, Polarity.BOTTOM).bits.tolist() == [[1.0, 0.0, 0.0, 0.0]]


def test_sdd_mask_rejects_empty_and_bad_ratio():
    with pytest.raises(DomainError):
        sdd_mask(torch.zeros(2, 0, dtype=DTYPE), 0.5, Polarity.TOP)
    with pytest.raises(DomainError):
        sdd_mask(_t([[1.0, 2.0]]), 0.0, Polarity.TOP)
    with pytest.raises(DomainError):
        sdd_mask(_t([[1.0, 2.0]]), None, Polarity.TOP, budgets=torch.tensor([3]))


def test_sdd_mask_ties_keep_lower_index():
    scores = _t([[1.0, 1.0, 1.0, 1.0], [2.0, 1.0, 1.0, 0.0]])
    assert sdd_mask(scores, 0.5, Polarity.TOP).bits.tolist() == [[1.0, 1.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0]]
    assert sdd_mask(scores, 0.5, Polarity.BOTTOM).bits.tolist() == [[1.0, 1.0, 0.0, 0.0], [0.0, 1.0, 0.0, 1.0]]


def test_sdd_mask_cardinality_and_ordering_over_random_triples():
    rng = Rng(11)
    for _ in range(1000):
        tokens = int(rng.integers(1, 65))
        q = float(rng.uniform(1)) * 0.999 + 0.001
        polarity = Polarity.TOP if int(rng.integers(0, 2)) else Polarity.BOTTOM
        scores = rng.integers(0, 8, 3, tokens).to(DTYPE)
        mask = sdd_mask(scores, q, polarity)
        expected = max(1, math.floor(tokens * q))
        assert mask.bits.sum(dim=1).tolist() == [float(expected)] * 3
        for row, bits in zip(scores, mask.bits):
            kept, dropped = row[bits == 1], row[bits == 0]
            if dropped.numel() == 0:
                continue
            if polarity is Polarity.TOP:
                assert kept.min() >= dropped.max()
            else:
                assert kept.max() <= dropped.min()


def test_top_and_bottom_masks_are_complements_for_distinct_scores():
    rng = Rng(12)
    for tokens in (2, 5, 16):
        scores = rng.normal(4, tokens)
        for k in range(1, tokens):
            top = sdd_mask(scores, None, Polarity.TOP, budgets=torch.full((4,), k))
            bottom = sdd_mask(scores, None, Polarity.BOTTOM, budgets=torch.full((4,), tokens - k))
            assert torch.equal(top.bits + bottom.bits, torch.ones_like(top.bits))


def test_keep_budget_clamps_to_one():
    assert keep_budget(3, 0.1) == 1
    assert keep_budget(10, 0.55) == 5


def test_expert_bottleneck_identity_and_constant():
    features = Rng(13).normal(2, 3, 4)
    expert = _expert(4, 4)
    expert.up.identity_()
    expert.down.identity_()
    assert torch.allclose(expert_bottleneck(features, expert), features)

    constant = _expert(4, 2)
    with torch.no_grad():
        constant.down.bias.copy_(_t([1.0, -1.0, 0.5, 2.0]))
    out = expert_bottleneck(features, constant)
    assert torch.equal(out, _t([1.0, -1.0, 0.5, 2.0]).expand(2, 3, 4))


def test_fresh_expert_outputs_zero():
    out = expert_bottleneck(Rng(14).normal(2, 3, 4), _expert(4, 2))
    assert torch.equal(out, torch.zeros(2, 3, 4, dtype=DTYPE))


def test_expert_bottleneck_rejects_channel_mismatch():
    with pytest.raises(DomainError):
        expert_bottleneck(torch.zeros(1, 2, 3, dtype=DTYPE), _expert(4, 2))


def test_expert_bottleneck_gradient_matches_finite_differences():
    expert = _expert(4, 2, seed=15)
    expert.up.uniform_(Rng(16))
    features = Rng(17).normal(2, 3, 4).requires_grad_(True)
    assert check_gradients(lambda f: expert_bottleneck(f, expert).tanh().sum(), [features])


def test_sparsify_examples():
    features = Rng(18).normal(1, 4, 3)
    ones = TokenMask(bits=torch.ones(1, 4, dtype=DTYPE), budgets=torch.tensor([4]), thresholds=_t([0.0]))
    assert torch.equal(sparsify(ones, features), features)

    zeros = TokenMask(bits=torch.zeros(1, 4, dtype=DTYPE), budgets=torch.tensor([0]), thresholds=_t([0.0]))
    assert torch.equal(sparsify(zeros, features), torch.zeros_like(features))

    alternate = TokenMask(bits=_t([[0.0, 1.0, 0.0, 1.0]]), budgets=torch.tensor([2]), thresholds=_t([0.0]))
    out = sparsify(alternate, features)
    assert torch.equal(out[0, 1], features[0, 1]) and torch.equal(out[0, 3], features[0, 3])
    assert torch.equal(out[0, 0], torch.zeros(3, dtype=DTYPE)) and torch.equal(out[0, 2], torch.zeros(3, dtype=DTYPE))


def test_sparsify_rejects_shape_mismatch():
    mask = TokenMask(bits=torch.ones(1, 3, dtype=DTYPE), budgets=torch.tensor([3]), thresholds=_t([0.0]))
    with pytest.raises(DomainError):
        sparsify(mask, torch.zeros(1, 4, 2, dtype=DTYPE))


def test_straight_through_gradient_contract():
    features = Rng(19).normal(2, 5, 3).requires_grad_(True)
    weights = Rng(20).normal(2, 5, 3)
    mask = sdd_mask(token_scores(features), 0.4, Polarity.TOP)
    (sparsify(mask, features) * weights).sum().backward()
    kept = mask.bits.unsqueeze(-1).expand_as(weights).bool()
    assert torch.equal(features.grad[kept], weights[kept])
    assert torch.equal(features.grad[~kept], torch.zeros_like(weights[~kept]))


def test_channel_mask_selects_channels():
    features = _t([[[1.0, 0.0, 3.0, 0.5], [1.0, 0.0, 3.0, 0.5]]])
    mask = channel_mask(features, 0.5, Polarity.TOP)
    assert mask.bits.tolist() == [[1.0, 0.0, 1.0, 0.0]]
    low = channel_mask(features, 0.25, Polarity.BOTTOM, ScoreReducer.MEAN_ABS)
    assert low.bits.tolist() == [[0.0, 1.0, 0.0, 0.0]]


def test_expert_spec_validation():
    with pytest.raises(DomainError):
        ExpertSpec(Polarity.TOP, 1.0, 2)
    with pytest.raises(DomainError):
        ExpertSpec(Polarity.BOTTOM, 0.5, 0)
    assert ExpertSpec("<=", 0.25, 1).polarity is Polarity.BOTTOM
