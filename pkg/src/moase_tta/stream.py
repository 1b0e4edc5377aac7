"""Synthetic continual-domain stream: Gaussian class blobs under cycled corruptions."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Iterator

import torch

from .augment import AugmentConfig, param_augment, severity_strength
from .config import DomainSpec, StreamConfig
from .numeric import DTYPE, DomainError, Rng

TASK_STREAM = 20
DATA_STREAM = 21
CORRUPT_STREAM = 22
SOURCE_TRAIN_STREAM = 23
SOURCE_EVAL_STREAM = 24


@dataclass(slots=True)
class BlobTask:
    """C isotropic Gaussian blobs in `input_dim` dimensions; the class is the generating blob."""

    means: torch.Tensor
    noise_std: float

    @classmethod
    def from_config(cls, config: StreamConfig) -> "BlobTask":
        rng = Rng(config.seed, TASK_STREAM)
        means = config.separation * rng.normal(config.classes, config.input_dim) / math.sqrt(config.input_dim)
        return cls(means=means, noise_std=config.noise_std)

    @property
    def classes(self) -> int:
        return self.means.shape[0]

    @property
    def input_dim(self) -> int:
        return self.means.shape[1]

    def sample(self, count: int, rng: Rng) -> tuple[torch.Tensor, torch.Tensor]:
        if count < 1:
            raise DomainError(f"count must be >= 1, got {count}", operation="blob_sample")
        labels = rng.integers(0, self.classes, count)
        inputs = self.means[labels] + self.noise_std * rng.normal(count, self.input_dim)
        return inputs, labels


@dataclass(slots=True)
class StreamBatch:
    """Unlabeled batch handed to the adapter; the labels travel separately to the evaluator."""

    inputs: torch.Tensor
    domain_id: int
    name: str
    round: int
    index: int
    fingerprint: str = ""


def corrupt(x: torch.Tensor, spec: DomainSpec, rng: Rng, augment: AugmentConfig | None = None) -> torch.Tensor:
    """Apply the domain's corruption through the augmentation kernels at its fixed strength."""
    return param_augment(x, severity_strength(spec.family, spec.severity), rng, augment)


def corruption_fingerprint(spec: DomainSpec, augment: AugmentConfig | None = None) -> str:
    """sha256 of the corruption parameters a domain applies."""
    augment = augment or AugmentConfig()
    digest = hashlib.sha256()
    digest.update(f"{spec.family}|{spec.severity}|{spec.duration}".encode("utf-8"))
    digest.update(severity_strength(spec.family, spec.severity).numpy().tobytes())
    digest.update(torch.tensor(augment.scales, dtype=DTYPE).numpy().tobytes())
    return digest.hexdigest()


def generate_stream(
    config: StreamConfig,
    augment: AugmentConfig | None = None,
) -> Iterator[tuple[StreamBatch, torch.Tensor]]:
    """Yield (batch, hidden labels) over every domain of every round, in order."""
    config.validate()
    task = BlobTask.from_config(config)
    data_rng = Rng(config.seed, DATA_STREAM)
    corrupt_rng = Rng(config.seed, CORRUPT_STREAM)
    index = 0
    for round_index in range(config.rounds):
        for domain_id, spec in enumerate(config.domains):
            fingerprint = corruption_fingerprint(spec, augment)
            for _ in range(spec.duration):
                inputs, labels = task.sample(config.batch_size, data_rng)
                batch = StreamBatch(
                    inputs=corrupt(inputs, spec, corrupt_rng, augment),
                    domain_id=domain_id,
                    name=spec.name,
                    round=round_index,
                    index=index,
                    fingerprint=fingerprint,
                )
                index += 1
                yield batch, labels


def source_split(config: StreamConfig, count: int, *, train: bool) -> tuple[torch.Tensor, torch.Tensor]:
    """Clean labeled samples for source pretraining (train) or evaluation."""
    task = BlobTask.from_config(config)
    return task.sample(count, Rng(config.seed, SOURCE_TRAIN_STREAM if train else SOURCE_EVAL_STREAM))


def labeled_domain_sample(
    config: StreamConfig,
    spec: DomainSpec,
    count: int,
    rng: Rng,
    augment: AugmentConfig | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Corrupted samples of one domain with their labels; f_S and f_T agree on the blob task."""
    inputs, labels = BlobTask.from_config(config).sample(count, rng)
    return corrupt(inputs, spec, rng, augment), labels
