"""Domain-shift diagnostics: JS divergence, intra-class divergence and the target-error bound."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Hashable, Iterable

import numpy as np
import torch

from .numeric import DTYPE, DomainError, kl_divergence

SOURCE_DOMAIN = "source"
LN2 = math.log(2.0)


@dataclass(slots=True)
class DiagnosticsConfig:
    window: int = 256
    bins: int = 32
    source_samples: int = 512

    def validate(self) -> None:
        if self.window < 1 or self.source_samples < 1:
            raise DomainError("window and source_samples must be >= 1", operation="diagnostics_config")
        if self.bins < 2:
            raise DomainError(f"bins must be >= 2, got {self.bins}", operation="diagnostics_config")


@dataclass(slots=True)
class BoundReport:
    """Terms of eps_T <= eps_S + d + label discrepancy; slack = RHS - LHS."""

    eps_target: float
    eps_source: float
    divergence: float
    label_disc: float
    slack: float

    @property
    def holds(self) -> bool:
        return self.slack >= 0


@dataclass(slots=True)
class LabeledDomain:
    """Inputs with labels under the source (f_S) and target (f_T) labeling functions."""

    inputs: torch.Tensor
    source_labels: torch.Tensor | None
    target_labels: torch.Tensor | None


class FeatureBank:
    """Pre-classifier features keyed by (domain, class), FIFO-bounded per key."""

    def __init__(self, capacity: int = 256, source_domain: Hashable = SOURCE_DOMAIN) -> None:
        if capacity < 1:
            raise DomainError(f"capacity must be >= 1, got {capacity}", operation="feature_bank")
        self.capacity = capacity
        self.source_domain = source_domain
        self._entries: dict[tuple[Hashable, int], deque[np.ndarray]] = {}
        self._dim: int | None = None
        self._direction: np.ndarray | None = None

    def add(self, domain: Hashable, label: int, feature: np.ndarray | torch.Tensor) -> None:
        vector = np.asarray(feature.detach().cpu() if isinstance(feature, torch.Tensor) else feature, dtype=np.float64)
        vector = vector.reshape(-1)
        if self._dim is None:
            self._dim = vector.shape[0]
        elif vector.shape[0] != self._dim:
            raise DomainError(f"feature length {vector.shape[0]} != {self._dim}", operation="feature_bank")
        key = (domain, int(label))
        if key not in self._entries:
            self._entries[key] = deque(maxlen=self.capacity)
        self._entries[key].append(vector)
        if domain == self.source_domain:
            self._direction = None

    def add_batch(self, domain: Hashable, labels: Iterable[int], features: torch.Tensor | np.ndarray) -> None:
        for label, feature in zip(labels, features):
            self.add(domain, int(label), feature)

    def entries(self) -> list[tuple[Hashable, int, np.ndarray]]:
        return [(domain, label, f) for (domain, label), queue in self._entries.items() for f in queue]

    def domains(self) -> list[Hashable]:
        return list(dict.fromkeys(domain for domain, _ in self._entries))

    def labels(self, domain: Hashable | None = None) -> list[int]:
        found = {label for d, label in self._entries if domain is None or d == domain}
        return sorted(found)

    def features(self, domain: Hashable | None = None, label: int | None = None) -> np.ndarray:
        rows = [
            f
            for (d, c), queue in self._entries.items()
            if (domain is None or d == domain) and (label is None or c == label)
            for f in queue
        ]
        if not rows:
            return np.zeros((0, self._dim or 0))
        return np.stack(rows)

    def principal_direction(self, domain: Hashable | None = None) -> np.ndarray:
        """Unit first principal direction of `domain` (default: the source domain), sign-fixed."""
        domain = self.source_domain if domain is None else domain
        if domain == self.source_domain and self._direction is not None:
            return self._direction
        feats = self.features(domain)
        if feats.shape[0] == 0:
            raise DomainError(f"no features for domain {domain!r}", operation="principal_direction")
        centered = feats - feats.mean(axis=0, keepdims=True)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        direction = vt[0]
        if direction[np.argmax(np.abs(direction))] < 0:
            direction = -direction
        if domain == self.source_domain:
            self._direction = direction
        return direction

    def source_range(self, direction: np.ndarray | None = None) -> tuple[float, float]:
        """Projection range of the source features, widened when degenerate."""
        direction = self.principal_direction() if direction is None else direction
        projections = self.features(self.source_domain) @ direction
        if projections.size == 0:
            raise DomainError("source domain is empty", operation="source_range")
        low, high = float(projections.min()), float(projections.max())
        if high - low < 1e-12:
            low, high = low - 0.5, high + 0.5
        return low, high


def js_divergence(p: np.ndarray | Iterable[float], q: np.ndarray | Iterable[float]) -> float:
    """JS(P, Q) in nats, in [0, ln 2]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise DomainError(f"histogram bins differ: {p.shape} vs {q.shape}", operation="js_divergence")
    if (p < 0).any() or (q < 0).any() or p.sum() <= 0 or q.sum() <= 0:
        raise DomainError("histograms must be nonnegative with positive mass", operation="js_divergence")
    p_t = torch.as_tensor(p / p.sum(), dtype=DTYPE)
    q_t = torch.as_tensor(q / q.sum(), dtype=DTYPE)
    mixture = (p_t + q_t) / 2
    value = 0.5 * float(kl_divergence(p_t, mixture)) + 0.5 * float(kl_divergence(q_t, mixture))
    return min(max(value, 0.0), LN2)


def intra_class_divergence(bank: FeatureBank, label: int, domain: Hashable | None = None) -> float:
    """Mean squared distance of class features to their centroid."""
    feats = bank.features(domain, label)
    if feats.shape[0] == 0:
        raise DomainError(f"class {label} has no features", operation="intra_class_divergence")
    centroid = feats.mean(axis=0, keepdims=True)
    return float(((feats - centroid) ** 2).sum(axis=1).mean())


def feature_histogram(
    bank: FeatureBank,
    domain: Hashable,
    bins: int = 32,
    value_range: tuple[float, float] | None = None,
    direction: np.ndarray | None = None,
) -> np.ndarray:
    """Normalized histogram of features projected on the source principal direction.

    Projections outside the range land in the edge bins.
    """
    if bins < 2:
        raise DomainError(f"bins must be >= 2, got {bins}", operation="feature_histogram")
    feats = bank.features(domain)
    if feats.shape[0] == 0:
        raise DomainError(f"domain {domain!r} has no features", operation="feature_histogram")
    if direction is None:
        has_source = bank.features(bank.source_domain).shape[0] > 0
        direction = bank.principal_direction(None if has_source else domain)
    if value_range is None:
        if bank.features(bank.source_domain).shape[0]:
            value_range = bank.source_range(direction)
        else:
            projected = feats @ direction
            value_range = (float(projected.min()) - 0.5, float(projected.max()) + 0.5)
    low, high = value_range
    projections = np.clip(feats @ direction, low, high)
    counts, _ = np.histogram(projections, bins=bins, range=(low, high))
    return counts / counts.sum()


def _error_rate(predictions: torch.Tensor, labels: torch.Tensor) -> float:
    return float((predictions.reshape(-1) != labels.reshape(-1)).to(DTYPE).mean())


def bound_check(
    predict: Callable[[torch.Tensor], torch.Tensor],
    source: LabeledDomain,
    target: LabeledDomain,
    source_histogram: np.ndarray,
    target_histogram: np.ndarray,
) -> BoundReport:
    """Evaluate both sides of the target-error bound with JS standing in for the divergence."""
    for name, domain in (("source", source), ("target", target)):
        if domain.source_labels is None or domain.target_labels is None:
            raise DomainError(f"{name} domain is missing labels", operation="bound_check")
    eps_source = _error_rate(predict(source.inputs), source.source_labels)
    eps_target = _error_rate(predict(target.inputs), target.target_labels)
    label_disc = min(
        _error_rate(source.source_labels, source.target_labels),
        _error_rate(target.source_labels, target.target_labels),
    )
    divergence = js_divergence(source_histogram, target_histogram)
    slack = (eps_source + divergence + label_disc) - eps_target
    return BoundReport(
        eps_target=eps_target,
        eps_source=eps_source,
        divergence=divergence,
        label_disc=label_disc,
        slack=slack,
    )
