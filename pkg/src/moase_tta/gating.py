"""Domain-Aware Router, Activation Sparsity Gate and the MoASE aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

from .numeric import DTYPE, AffineMap, DomainError, Polarity, Rng, softmax
from .sdd import (
    ExpertSpec,
    ScoreReducer,
    SparsityExpert,
    TokenMask,
    expert_bottleneck,
    sdd_mask,
    sparsify,
    token_scores,
)

DEFAULT_ETA = 0.1
DEFAULT_Q_MIN = 0.05
DEFAULT_Q_MAX = 0.95
DAR_KEEP_RATIO = 0.5
HEAD_INIT_STD = 0.02


@dataclass(slots=True)
class RoutingWeights:
    """Per-sample expert weights on the simplex, [B, E]."""

    phi: torch.Tensor
    low_mask: TokenMask | None = None

    def mean(self) -> list[float]:
        return self.phi.detach().mean(dim=0).tolist()


@dataclass(slots=True)
class KeepRatioAdjustment:
    """ASG offsets and the clipped keep-ratios / budgets they produce."""

    epsilon: torch.Tensor
    eta: float
    q_min: float
    q_max: float
    adjusted: torch.Tensor
    budgets: torch.Tensor


@dataclass(slots=True)
class MoaseVariant:
    """Switches for the module ablation; all on is the full layer."""

    use_sdd: bool = True
    use_asg: bool = True
    dar_low_only: bool = True


@dataclass(slots=True)
class MoaseOutput:
    features: torch.Tensor
    routing: RoutingWeights
    adjustment: KeepRatioAdjustment
    masks: list[TokenMask] = field(default_factory=list)


class GatingHeads(nn.Module):
    """Router head over pooled low-activation features and gate head over pooled features."""

    def __init__(self, channels: int, num_experts: int, rng: Rng | None = None) -> None:
        super().__init__()
        self.dar_head = AffineMap(channels, num_experts)
        self.asg_head = AffineMap(channels, num_experts)
        if rng is None:
            self.dar_head.zero_()
            self.asg_head.zero_()
        else:
            self.dar_head.normal_(rng, HEAD_INIT_STD)
            self.asg_head.normal_(rng, HEAD_INIT_STD)

    @property
    def num_experts(self) -> int:
        return self.dar_head.out_features


def default_expert_layout(
    num_experts: int,
    hidden_size: int,
    agnostic_experts: int | None = None,
) -> list[ExpertSpec]:
    """Spread keep-ratios and ranks across domain-agnostic (TOP) and domain-specific (BOTTOM) experts.

    Each polarity group of size n gets keep-ratios 0.5 * (n - j) / n; agnostic experts use the
    full hidden size as rank, specific experts a quarter of it.
    """
    if num_experts < 1 or hidden_size < 1:
        raise DomainError("num_experts and hidden_size must be >= 1", operation="default_expert_layout")
    if agnostic_experts is None:
        agnostic_experts = num_experts // 2
    if not 0 <= agnostic_experts <= num_experts:
        raise DomainError(
            f"agnostic_experts must lie in [0, {num_experts}], got {agnostic_experts}",
            operation="default_expert_layout",
        )
    groups = (
        (Polarity.TOP, agnostic_experts, hidden_size),
        (Polarity.BOTTOM, num_experts - agnostic_experts, max(1, hidden_size // 4)),
    )
    layout: list[ExpertSpec] = []
    for polarity, count, rank in groups:
        for j in range(count):
            layout.append(ExpertSpec(polarity, 0.5 * (count - j) / count, rank))
    return layout


def dar_route(
    features: torch.Tensor,
    heads: GatingHeads,
    *,
    reducer: ScoreReducer = ScoreReducer.L2_NORM,
    low_only: bool = True,
) -> RoutingWeights:
    """Route each sample from the mean of its low-activation half of the tokens."""
    if features.ndim != 3:
        raise DomainError(f"expected [B, N, D] features, got {tuple(features.shape)}", operation="dar_route")
    tokens = features.shape[1]
    if tokens < 2:
        raise DomainError(f"routing needs N >= 2 tokens, got {tokens}", operation="dar_route")
    if not low_only:
        return RoutingWeights(phi=softmax(heads.dar_head(features.mean(dim=1)), 1.0))

    low_mask = sdd_mask(token_scores(features, reducer), DAR_KEEP_RATIO, Polarity.BOTTOM)
    low = sparsify(low_mask, features)
    pooled = low.sum(dim=1) / low_mask.budgets.to(features.dtype).unsqueeze(-1)
    return RoutingWeights(phi=softmax(heads.dar_head(pooled), 1.0), low_mask=low_mask)


def asg_offsets(features: torch.Tensor, heads: GatingHeads) -> torch.Tensor:
    """Per-sample keep-ratio offsets in (-1, 1), [B, E]."""
    if features.ndim != 3 or features.shape[0] == 0 or features.shape[1] == 0:
        raise DomainError(
            f"expected non-empty [B, N, D] features, got {tuple(features.shape)}", operation="asg_offsets"
        )
    return torch.tanh(heads.asg_head(features.mean(dim=1)))


def adjust_keep_ratio(
    base: torch.Tensor | Sequence[float],
    epsilon: torch.Tensor,
    eta: float,
    q_min: float,
    q_max: float,
    tokens: int,
) -> KeepRatioAdjustment:
    """q_hat = clip(q + eta * eps, q_min, q_max); K_hat = max(1, floor(N * q_hat))."""
    if not 0.0 < q_min < q_max <= 1.0:
        raise DomainError(f"need 0 < q_min < q_max <= 1, got [{q_min}, {q_max}]", operation="adjust_keep_ratio")
    if tokens < 1:
        raise DomainError(f"N must be >= 1, got {tokens}", operation="adjust_keep_ratio")
    base = torch.as_tensor(base, dtype=DTYPE)
    if epsilon.ndim != 2 or epsilon.shape[1] != base.shape[0]:
        raise DomainError(
            f"epsilon {tuple(epsilon.shape)} does not match {base.shape[0]} experts", operation="adjust_keep_ratio"
        )
    adjusted = torch.clamp(base.unsqueeze(0) + eta * epsilon.detach(), q_min, q_max)
    budgets = torch.floor(tokens * adjusted).long().clamp(1, tokens)
    return KeepRatioAdjustment(
        epsilon=epsilon, eta=eta, q_min=q_min, q_max=q_max, adjusted=adjusted, budgets=budgets
    )


def moase_forward(
    features: torch.Tensor,
    experts: Sequence[SparsityExpert],
    heads: GatingHeads,
    *,
    eta: float = DEFAULT_ETA,
    q_min: float = DEFAULT_Q_MIN,
    q_max: float = DEFAULT_Q_MAX,
    reducer: ScoreReducer = ScoreReducer.L2_NORM,
    variant: MoaseVariant | None = None,
) -> MoaseOutput:
    """Y(b) = sum_i phi(b, i) * sparsified expert output i."""
    variant = variant or MoaseVariant()
    if not experts:
        raise DomainError("at least one expert is required", operation="moase_forward")
    if heads.num_experts != len(experts):
        raise DomainError(
            f"heads route {heads.num_experts} experts but {len(experts)} were given", operation="moase_forward"
        )
    batch, tokens, _ = features.shape

    routing = dar_route(features, heads, reducer=reducer, low_only=variant.dar_low_only)
    if variant.use_asg:
        epsilon = asg_offsets(features, heads)
    else:
        epsilon = torch.zeros(batch, len(experts), dtype=features.dtype)
    base = [expert.keep_ratio for expert in experts]
    adjustment = adjust_keep_ratio(base, epsilon, eta, q_min, q_max, tokens)

    scores = token_scores(features, reducer)
    output = torch.zeros_like(features)
    masks: list[TokenMask] = []
    for i, expert in enumerate(experts):
        expert_out = expert_bottleneck(features, expert)
        if variant.use_sdd:
            mask = sdd_mask(scores, None, expert.polarity, budgets=adjustment.budgets[:, i])
            masks.append(mask)
            expert_out = sparsify(mask, expert_out)
        output = output + routing.phi[:, i, None, None] * expert_out
    return MoaseOutput(features=output, routing=routing, adjustment=adjustment, masks=masks)


class MoaseLayer(nn.Module):
    """Experts plus gating heads; the adapter hosted next to the block's linear layer."""

    def __init__(
        self,
        channels: int,
        specs: Sequence[ExpertSpec],
        rng: Rng,
        *,
        eta: float = DEFAULT_ETA,
        q_min: float = DEFAULT_Q_MIN,
        q_max: float = DEFAULT_Q_MAX,
        reducer: ScoreReducer = ScoreReducer.L2_NORM,
        variant: MoaseVariant | None = None,
    ) -> None:
        super().__init__()
        if not specs:
            raise DomainError("at least one expert is required", operation="moase_layer")
        self.experts = nn.ModuleList(
            SparsityExpert(i + 1, spec, channels, rng) for i, spec in enumerate(specs)
        )
        self.heads = GatingHeads(channels, len(specs), rng)
        self.eta = eta
        self.q_min = q_min
        self.q_max = q_max
        self.reducer = ScoreReducer(reducer)
        self.variant = variant or MoaseVariant()

    def forward(self, features: torch.Tensor) -> MoaseOutput:
        return moase_forward(
            features,
            list(self.experts),
            self.heads,
            eta=self.eta,
            q_min=self.q_min,
            q_max=self.q_max,
            reducer=self.reducer,
            variant=self.variant,
        )
