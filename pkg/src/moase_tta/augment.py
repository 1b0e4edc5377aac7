"""Augmentation-strength policy and the parameterized augmenter."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.distributions import Normal
from torch.nn import functional as F

from .numeric import DTYPE, AffineMap, DomainError, Rng

FAMILIES: tuple[str, ...] = ("noise", "smooth", "contrast", "brightness", "cutout")
NOISE, SMOOTH, CONTRAST, BRIGHTNESS, CUTOUT = range(len(FAMILIES))


@dataclass(slots=True)
class AugmentConfig:
    """Per-family maximum scales, data range and policy settings."""

    noise_scale: float = 0.5
    smooth_scale: float = 0.5
    contrast_scale: float = 0.5
    brightness_scale: float = 0.5
    cutout_scale: float = 0.3
    data_low: float = -10.0
    data_high: float = 10.0
    sigma_min: float = 0.05
    init_std: float = 0.3
    policy_hidden: int = 16
    fixed_strength: float = 0.5

    def validate(self) -> None:
        for name in ("noise_scale", "smooth_scale", "contrast_scale", "brightness_scale", "cutout_scale"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0", operation="augment_config")
        if self.smooth_scale > 1.0 or self.cutout_scale > 1.0:
            raise DomainError("smooth_scale and cutout_scale are fractions in [0, 1]", operation="augment_config")
        if self.data_low >= self.data_high:
            raise DomainError("data_low must be below data_high", operation="augment_config")
        if not 0 < self.sigma_min < self.init_std:
            raise DomainError("need 0 < sigma_min < init_std", operation="augment_config")
        if self.policy_hidden < 1:
            raise DomainError("policy_hidden must be >= 1", operation="augment_config")

    @property
    def scales(self) -> tuple[float, ...]:
        return (self.noise_scale, self.smooth_scale, self.contrast_scale, self.brightness_scale, self.cutout_scale)


@dataclass(slots=True)
class PolicyState:
    """Batch entropy (nats) and mean confidence of the student's clean-view predictions."""

    batch_entropy: float
    mean_confidence: float
    classes: int

    def as_tensor(self) -> torch.Tensor:
        """Entropy normalized by ln C, and confidence; both in [0, 1]."""
        max_entropy = math.log(self.classes) if self.classes > 1 else 1.0
        return torch.tensor([self.batch_entropy / max_entropy, self.mean_confidence], dtype=DTYPE)


@dataclass(slots=True)
class StrengthVector:
    """A sampled strength vector with its (differentiable) log-probability and entropy."""

    a: torch.Tensor
    log_prob: torch.Tensor
    entropy: torch.Tensor

    @classmethod
    def fixed(cls, values: torch.Tensor) -> "StrengthVector":
        zero = torch.zeros((), dtype=DTYPE)
        return cls(a=values.to(DTYPE), log_prob=zero, entropy=zero)


def state_stats(probs: torch.Tensor) -> PolicyState:
    """Mean per-sample entropy and mean max-probability of a [B, C] probability batch."""
    if probs.ndim != 2 or probs.shape[0] == 0 or probs.shape[1] == 0:
        raise DomainError(f"expected non-empty [B, C] probabilities, got {tuple(probs.shape)}", operation="state_stats")
    probs = probs.detach()
    entropy = -torch.xlogy(probs, probs).sum(dim=1)
    confidence = probs.max(dim=1).values
    return PolicyState(
        batch_entropy=float(entropy.mean().clamp_min(0.0)),
        mean_confidence=float(confidence.mean()),
        classes=probs.shape[1],
    )


class AugmentPolicy(nn.Module):
    """Diagonal Gaussian policy pi(a | s) with tanh-bounded mean and floored std."""

    def __init__(self, config: AugmentConfig, rng: Rng, *, action_dim: int = len(FAMILIES), state_dim: int = 2) -> None:
        super().__init__()
        config.validate()
        self.sigma_min = config.sigma_min
        self.trunk = AffineMap(state_dim, config.policy_hidden).uniform_(rng)
        self.mean_head = AffineMap(config.policy_hidden, action_dim).normal_(rng, 0.01)
        raw = math.log(math.expm1(config.init_std - config.sigma_min))
        self.raw_std = nn.Parameter(torch.full((action_dim,), raw, dtype=DTYPE))

    @property
    def action_dim(self) -> int:
        return self.mean_head.out_features

    def distribution(self, state: torch.Tensor) -> Normal:
        mean = torch.tanh(self.mean_head(torch.tanh(self.trunk(state))))
        std = self.sigma_min + F.softplus(self.raw_std)
        return Normal(mean, std)

    def forward(self, state: torch.Tensor) -> Normal:
        return self.distribution(state)


def policy_sample(state: PolicyState | torch.Tensor, policy: AugmentPolicy, rng: Rng) -> StrengthVector:
    """Draw a ~ N(mu(s), diag sigma^2); log-prob and entropy stay differentiable in the policy."""
    state_tensor = state.as_tensor() if isinstance(state, PolicyState) else state.to(DTYPE)
    if not torch.isfinite(state_tensor).all():
        raise DomainError("policy state must be finite", operation="policy_sample")
    dist = policy.distribution(state_tensor)
    noise = rng.normal(policy.action_dim)
    a = (dist.mean + dist.stddev * noise).detach()
    return StrengthVector(a=a, log_prob=dist.log_prob(a).sum(), entropy=dist.entropy().sum())


def fixed_strengths(config: AugmentConfig) -> StrengthVector:
    """Mid-range strengths used when the policy branch is off."""
    return StrengthVector.fixed(torch.full((len(FAMILIES),), config.fixed_strength, dtype=DTYPE))


def _smooth(x: torch.Tensor) -> torch.Tensor:
    padded = F.pad(x.unsqueeze(1), (1, 1), mode="replicate")
    return F.avg_pool1d(padded, kernel_size=3, stride=1).squeeze(1)


@torch.no_grad()
def param_augment(
    x: torch.Tensor,
    strength: StrengthVector | torch.Tensor,
    rng: Rng,
    config: AugmentConfig | None = None,
) -> torch.Tensor:
    """Apply noise, smoothing, contrast, brightness and cutout in that order, then clamp.

    A zero strength vector returns the input unchanged.
    """
    config = config or AugmentConfig()
    a = strength.a if isinstance(strength, StrengthVector) else torch.as_tensor(strength, dtype=DTYPE)
    if a.shape != (len(FAMILIES),):
        raise DomainError(f"expected {len(FAMILIES)} strengths, got {tuple(a.shape)}", operation="param_augment")
    if x.ndim != 2:
        raise DomainError(f"expected [B, D] inputs, got {tuple(x.shape)}", operation="param_augment")
    if not torch.isfinite(x).all():
        raise DomainError("inputs must be finite", operation="param_augment")
    out = x.clone()
    if not bool((a != 0).any()):
        return out

    s = config.scales
    batch, dim = out.shape
    sigma = s[NOISE] * abs(float(a[NOISE]))
    if sigma > 0:
        out = out + sigma * rng.normal(batch, dim)
    mix = min(1.0, s[SMOOTH] * abs(float(a[SMOOTH])))
    if mix > 0:
        out = (1.0 - mix) * out + mix * _smooth(out)
    contrast = s[CONTRAST] * float(a[CONTRAST])
    if contrast != 0:
        mean = out.mean(dim=1, keepdim=True)
        out = mean + (1.0 + contrast) * (out - mean)
    shift = s[BRIGHTNESS] * float(a[BRIGHTNESS])
    if shift != 0:
        out = out + shift
    length = math.floor(min(1.0, s[CUTOUT] * abs(float(a[CUTOUT]))) * dim)
    if length >= 1:
        starts = rng.integers(0, dim - length + 1, batch).unsqueeze(1)
        positions = torch.arange(dim).unsqueeze(0)
        hole = (positions >= starts) & (positions < starts + length)
        out = out.masked_fill(hole, 0.0)
    return out.clamp(config.data_low, config.data_high)


# Stream corruption family -> (strength slot, sign). Contrast corruptions flatten the signal.
CORRUPTIONS: dict[str, tuple[int, float] | None] = {
    "gauss-noise": (NOISE, 1.0),
    "smooth": (SMOOTH, 1.0),
    "contrast": (CONTRAST, -1.0),
    "brightness": (BRIGHTNESS, 1.0),
    "occlude": (CUTOUT, 1.0),
    "identity": None,
}
MAX_SEVERITY = 5


def severity_strength(family: str, severity: int) -> torch.Tensor:
    """Strength vector for a corruption: one slot set to +-severity / 5, the rest zero."""
    if family not in CORRUPTIONS:
        raise DomainError(f"unknown corruption family {family!r}", operation="severity_strength")
    if not 1 <= severity <= MAX_SEVERITY:
        raise DomainError(f"severity must lie in [1, {MAX_SEVERITY}], got {severity}", operation="severity_strength")
    a = torch.zeros(len(FAMILIES), dtype=DTYPE)
    slot = CORRUPTIONS[family]
    if slot is not None:
        index, sign = slot
        a[index] = sign * severity / MAX_SEVERITY
    return a
