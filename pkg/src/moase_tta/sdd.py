"""Spatial Differentiable Dropout: token scores, Top/Bottom-K masks and expert bottlenecks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import torch
from torch import nn

from .numeric import AffineMap, DomainError, Polarity, Rng, kth_order_statistic


class ScoreReducer(str, Enum):
    """Channel reduction used to score tokens."""

    L2_NORM = "l2-norm"
    MEAN_ABS = "mean-abs"


@dataclass(slots=True)
class ExpertSpec:
    """Polarity, base keep-ratio and bottleneck rank of one expert."""

    polarity: Polarity
    keep_ratio: float
    rank: int

    def __post_init__(self) -> None:
        self.polarity = Polarity.parse(self.polarity)
        if not 0.0 < self.keep_ratio < 1.0:
            raise DomainError(f"keep_ratio must lie in (0, 1), got {self.keep_ratio}", operation="expert_spec")
        if self.rank < 1:
            raise DomainError(f"rank must be >= 1, got {self.rank}", operation="expert_spec")


@dataclass(slots=True)
class TokenMask:
    """Binary keep mask [B, N] with the per-row budget and threshold that produced it."""

    bits: torch.Tensor
    budgets: torch.Tensor
    thresholds: torch.Tensor

    def broadcast(self) -> torch.Tensor:
        """The mask broadcast along channels, [B, N, 1]."""
        return self.bits.unsqueeze(-1)


class SparsityExpert(nn.Module):
    """Rank-r token-wise bottleneck `down(up(F))` with its SDD selection settings."""

    def __init__(self, expert_id: int, spec: ExpertSpec, channels: int, rng: Rng) -> None:
        super().__init__()
        self.expert_id = expert_id
        self.polarity = spec.polarity
        self.keep_ratio = spec.keep_ratio
        self.rank = spec.rank
        # up starts at zero so a fresh expert contributes exactly nothing.
        self.up = AffineMap(channels, spec.rank).zero_()
        self.down = AffineMap(spec.rank, channels).kaiming_(rng)

    @property
    def spec(self) -> ExpertSpec:
        return ExpertSpec(self.polarity, self.keep_ratio, self.rank)

    def extra_repr(self) -> str:
        return f"id={self.expert_id}, polarity={self.polarity.value}, q={self.keep_ratio}, rank={self.rank}"


class _StraightThroughMask(torch.autograd.Function):
    """Multiply by a frozen binary mask; the gradient is masked the same way."""

    @staticmethod
    def forward(ctx, features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        ctx.save_for_backward(mask)
        return features * mask

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        (mask,) = ctx.saved_tensors
        return grad_output * mask, None


def _check_features(features: torch.Tensor, operation: str) -> None:
    if features.ndim != 3:
        raise DomainError(f"expected [B, N, D] features, got {tuple(features.shape)}", operation=operation)
    if features.shape[-1] == 0:
        raise DomainError("empty channel dimension", operation=operation)


def token_scores(features: torch.Tensor, reducer: ScoreReducer = ScoreReducer.L2_NORM) -> torch.Tensor:
    """Token activation scores [B, N]; scores are not differentiated."""
    _check_features(features, "token_scores")
    detached = features.detach()
    if ScoreReducer(reducer) is ScoreReducer.L2_NORM:
        return torch.linalg.vector_norm(detached, dim=-1)
    return detached.abs().mean(dim=-1)


def keep_budget(tokens: int, keep_ratio: float) -> int:
    """K = floor(N * q), clamped to at least one token."""
    return max(1, math.floor(tokens * keep_ratio))


def sdd_mask(
    scores: torch.Tensor,
    keep_ratio: float | None,
    polarity: Polarity | str,
    *,
    budgets: torch.Tensor | None = None,
) -> TokenMask:
    """Top-K (TOP) or bottom-K (BOTTOM) token mask per row of `scores`.

    Either a keep ratio q in (0, 1] or explicit per-row `budgets` must be given.
    Ties at the threshold keep the lower token index.
    """
    polarity = Polarity.parse(polarity)
    if scores.ndim != 2:
        raise DomainError(f"expected [B, N] scores, got {tuple(scores.shape)}", operation="sdd_mask")
    rows, tokens = scores.shape
    if tokens == 0:
        raise DomainError("no tokens to select from", operation="sdd_mask")

    if budgets is None:
        if keep_ratio is None or not 0.0 < keep_ratio <= 1.0:
            raise DomainError(f"keep_ratio must lie in (0, 1], got {keep_ratio}", operation="sdd_mask")
        budgets = torch.full((rows,), keep_budget(tokens, keep_ratio), dtype=torch.long)
    else:
        budgets = torch.as_tensor(budgets, dtype=torch.long)
        if budgets.shape != (rows,) or (budgets < 1).any() or (budgets > tokens).any():
            raise DomainError(f"budgets must be {rows} integers in [1, {tokens}]", operation="sdd_mask")

    scores = scores.detach()
    thresholds = kth_order_statistic(scores, budgets, polarity)
    tau = thresholds.unsqueeze(-1)
    strict = scores > tau if polarity is Polarity.TOP else scores < tau
    ties = scores == tau
    remaining = budgets - strict.sum(dim=-1)
    keep_ties = ties & (torch.cumsum(ties.long(), dim=-1) <= remaining.unsqueeze(-1))
    bits = (strict | keep_ties).to(scores.dtype)
    return TokenMask(bits=bits, budgets=budgets, thresholds=thresholds)


def expert_bottleneck(features: torch.Tensor, expert: SparsityExpert) -> torch.Tensor:
    """Token-wise `down(up(F))`, shape preserved."""
    _check_features(features, "expert_bottleneck")
    if features.shape[-1] != expert.up.in_features or expert.down.out_features != features.shape[-1]:
        raise DomainError(
            f"expert {expert.expert_id} expects {expert.up.in_features} channels, got {features.shape[-1]}",
            operation="expert_bottleneck",
        )
    return expert.down(expert.up(features))


def sparsify(mask: TokenMask, features: torch.Tensor) -> torch.Tensor:
    """Zero the dropped tokens of `features`; gradients pass only through kept tokens."""
    _check_features(features, "sparsify")
    if tuple(mask.bits.shape) != tuple(features.shape[:2]):
        raise DomainError(
            f"mask {tuple(mask.bits.shape)} does not match features {tuple(features.shape)}",
            operation="sparsify",
        )
    return _StraightThroughMask.apply(features, mask.broadcast().to(features.dtype))


def channel_mask(
    features: torch.Tensor,
    keep_ratio: float,
    polarity: Polarity | str,
    reducer: ScoreReducer = ScoreReducer.L2_NORM,
) -> TokenMask:
    """Channel-wise variant of the SDD rule: selects channels instead of tokens.

    Diagnostic only; the model always masks tokens.
    """
    _check_features(features, "channel_mask")
    transposed = features.detach().transpose(1, 2)
    return sdd_mask(token_scores(transposed, reducer), keep_ratio, polarity)
