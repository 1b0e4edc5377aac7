"""Numeric kernel shared by every moase_tta module.

All tensors are float64 torch tensors; reverse-mode gradients come from torch autograd.
Every public operation validates its preconditions and raises :class:`DomainError`.
"""

from __future__ import annotations

from enum import Enum
from typing import Callable, Sequence

import torch
from torch import nn

DTYPE = torch.float64
PROB_FLOOR = 1e-12

_SEED_MIX = 0x9E3779B97F4A7C15
_STREAM_MIX = 0xBF58476D1CE4E5B9
_MASK64 = 0xFFFF_FFFF_FFFF_FFFF


class DomainError(ValueError):
    """Raised when an operation is called outside its domain."""

    def __init__(self, message: str, *, operation: str) -> None:
        super().__init__(f"{operation}: {message}")
        self.operation = operation


class Polarity(str, Enum):
    """Token selection polarity: keep the top-K (>=) or the bottom-K (<=) scores."""

    TOP = "top"
    BOTTOM = "bottom"

    @classmethod
    def parse(cls, value: "str | Polarity") -> "Polarity":
        if isinstance(value, Polarity):
            return value
        aliases = {
            "top": cls.TOP,
            ">=": cls.TOP,
            "≥": cls.TOP,
            "ge": cls.TOP,
            "agnostic": cls.TOP,
            "bottom": cls.BOTTOM,
            "<=": cls.BOTTOM,
            "≤": cls.BOTTOM,
            "le": cls.BOTTOM,
            "specific": cls.BOTTOM,
        }
        try:
            return aliases[str(value).strip().lower()]
        except KeyError:
            raise DomainError(f"unknown polarity {value!r}", operation="polarity") from None


class Rng:
    """Seeded random stream: identical (seed, stream, call sequence) gives identical draws."""

    def __init__(self, seed: int, stream: int = 0) -> None:
        self.seed = int(seed)
        self.stream = int(stream)
        mixed = (self.seed * _SEED_MIX + (self.stream + 1) * _STREAM_MIX) & _MASK64
        self.generator = torch.Generator().manual_seed(mixed)

    def spawn(self, stream: int) -> "Rng":
        """Return an independent stream sharing this seed."""
        return Rng(self.seed, stream)

    def normal(self, *shape: int) -> torch.Tensor:
        return torch.randn(shape, generator=self.generator, dtype=DTYPE)

    def uniform(self, *shape: int) -> torch.Tensor:
        return torch.rand(shape, generator=self.generator, dtype=DTYPE)

    def integers(self, low: int, high: int, *shape: int) -> torch.Tensor:
        return torch.randint(low, high, shape, generator=self.generator)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"


def configure_determinism(threads: int = 1) -> None:
    """Pin torch to deterministic kernels and a fixed reduction order."""
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


def _check_logits(logits: torch.Tensor, temperature: float, dim: int, operation: str) -> None:
    if temperature <= 0:
        raise DomainError(f"temperature must be > 0, got {temperature}", operation=operation)
    if logits.numel() == 0 or logits.shape[dim] == 0:
        raise DomainError("empty logits", operation=operation)
    if not torch.isfinite(logits).all():
        raise DomainError("logits must be finite", operation=operation)


def softmax(logits: torch.Tensor, temperature: float = 1.0, dim: int = -1) -> torch.Tensor:
    """Temperature softmax along `dim`, computed after max-subtraction."""
    _check_logits(logits, temperature, dim, "softmax")
    scaled = logits / temperature
    shifted = scaled - scaled.amax(dim=dim, keepdim=True).detach()
    return torch.softmax(shifted, dim=dim)


def log_softmax(logits: torch.Tensor, temperature: float = 1.0, dim: int = -1) -> torch.Tensor:
    """Temperature log-softmax along `dim`; finite for logits up to +-1e4."""
    _check_logits(logits, temperature, dim, "log_softmax")
    scaled = logits / temperature
    shifted = scaled - scaled.amax(dim=dim, keepdim=True).detach()
    return torch.log_softmax(shifted, dim=dim)


def kl_divergence(p: torch.Tensor, q: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """KL(p || q) along `dim` in nats, with q floored at 1e-12 before the log."""
    if p.shape != q.shape:
        raise DomainError(f"shape mismatch {tuple(p.shape)} vs {tuple(q.shape)}", operation="kl_divergence")
    if p.numel() == 0:
        raise DomainError("empty distributions", operation="kl_divergence")
    for name, dist in (("p", p), ("q", q)):
        total = dist.detach().sum(dim=dim)
        if (dist.detach() < -1e-12).any() or ((total - 1.0).abs() > 1e-6).any():
            raise DomainError(f"{name} is not on the probability simplex", operation="kl_divergence")
    terms = torch.xlogy(p, p) - p * torch.log(q.clamp_min(PROB_FLOOR))
    return terms.sum(dim=dim).clamp_min(0.0)


def kl_from_log_probs(log_p: torch.Tensor, log_q: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """KL(p || q) given log-probabilities; the stable form used by the losses."""
    if log_p.shape != log_q.shape:
        raise DomainError(
            f"shape mismatch {tuple(log_p.shape)} vs {tuple(log_q.shape)}", operation="kl_from_log_probs"
        )
    return (log_p.exp() * (log_p - log_q)).sum(dim=dim)


def kth_order_statistic(
    scores: torch.Tensor,
    k: "int | torch.Tensor",
    polarity: "Polarity | str",
) -> torch.Tensor:
    """K-th largest (TOP) or K-th smallest (BOTTOM) score along the last axis.

    `k` is either a single integer or one integer per leading row.
    """
    polarity = Polarity.parse(polarity)
    if scores.ndim == 0 or scores.shape[-1] == 0:
        raise DomainError("scores must have at least one element", operation="kth_order_statistic")
    n = scores.shape[-1]

    def _select(rows: torch.Tensor, kk: int) -> torch.Tensor:
        if not 1 <= kk <= n:
            raise DomainError(f"K={kk} outside [1, {n}]", operation="kth_order_statistic")
        rank = n - kk + 1 if polarity is Polarity.TOP else kk
        return torch.kthvalue(rows, rank, dim=-1).values

    if isinstance(k, int):
        return _select(scores, k)

    k = torch.as_tensor(k, dtype=torch.long)
    if k.shape != scores.shape[:-1]:
        raise DomainError("one K per row is required", operation="kth_order_statistic")
    detached = scores.detach()
    out = torch.empty(scores.shape[:-1], dtype=scores.dtype)
    for kk in torch.unique(k).tolist():
        rows = k == kk
        out[rows] = _select(detached[rows], int(kk))
    return out


class AffineMap(nn.Linear):
    """float64 affine map `weight @ x + bias` with shape checking."""

    def __init__(self, in_features: int, out_features: int, *, bias: bool = True) -> None:
        if in_features < 1 or out_features < 1:
            raise DomainError(
                f"extents must be >= 1, got {in_features}->{out_features}", operation="affine_map"
            )
        super().__init__(in_features, out_features, bias=bias, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 0 or x.shape[-1] != self.in_features:
            raise DomainError(
                f"expected trailing extent {self.in_features}, got {tuple(x.shape)}",
                operation="affine_forward",
            )
        return super().forward(x)

    @torch.no_grad()
    def zero_(self) -> "AffineMap":
        self.weight.zero_()
        if self.bias is not None:
            self.bias.zero_()
        return self

    @torch.no_grad()
    def identity_(self) -> "AffineMap":
        if self.in_features != self.out_features:
            raise DomainError("identity requires a square map", operation="affine_map")
        self.weight.copy_(torch.eye(self.in_features, dtype=DTYPE))
        if self.bias is not None:
            self.bias.zero_()
        return self

    @torch.no_grad()
    def normal_(self, rng: Rng, std: float) -> "AffineMap":
        self.weight.copy_(rng.normal(self.out_features, self.in_features) * std)
        if self.bias is not None:
            self.bias.zero_()
        return self

    @torch.no_grad()
    def kaiming_(self, rng: Rng) -> "AffineMap":
        """Fan-in scaled normal initialization."""
        return self.normal_(rng, (2.0 / self.in_features) ** 0.5)

    @torch.no_grad()
    def uniform_(self, rng: Rng) -> "AffineMap":
        bound = 1.0 / self.in_features**0.5
        self.weight.copy_((rng.uniform(self.out_features, self.in_features) * 2 - 1) * bound)
        if self.bias is not None:
            self.bias.copy_((rng.uniform(self.out_features) * 2 - 1) * bound)
        return self


def affine_forward(affine: AffineMap, x: torch.Tensor) -> torch.Tensor:
    return affine(x)


def affine_backward(affine: AffineMap, x: torch.Tensor, upstream: torch.Tensor) -> torch.Tensor:
    """Accumulate weight/bias gradients for `upstream` and return the input gradient."""
    x = x.detach().clone().requires_grad_(True)
    y = affine(x)
    if upstream.shape != y.shape:
        raise DomainError(
            f"upstream shape {tuple(upstream.shape)} != output {tuple(y.shape)}", operation="affine_backward"
        )
    y.backward(upstream)
    assert x.grad is not None
    return x.grad


def check_gradients(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    *,
    step: float = 1e-4,
    rtol: float = 1e-3,
    atol: float = 1e-6,
) -> bool:
    """Compare autograd against central finite differences."""
    return torch.autograd.gradcheck(fn, tuple(inputs), eps=step, atol=atol, rtol=rtol, raise_exception=False)
