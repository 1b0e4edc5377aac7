"""Small token backbone hosting MoASE, instantiated as a student/teacher pair."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

import torch
from torch import nn
from torch.nn import functional as F

from .gating import (
    DEFAULT_ETA,
    DEFAULT_Q_MAX,
    DEFAULT_Q_MIN,
    MoaseLayer,
    MoaseVariant,
    RoutingWeights,
    default_expert_layout,
)
from .log_utils import DEFAULT_LOG_PATH, write_log
from .numeric import DTYPE, AffineMap, DomainError, Rng
from .sdd import ExpertSpec, ScoreReducer

CHECKPOINT_FORMAT = "moase-tta-checkpoint"
CHECKPOINT_VERSION = 1
DEFAULT_BETAS = (0.9, 0.99)
# Desk-scale episodes run a few hundred steps; the benchmark rate is kept for the presets.
DEFAULT_LR = 1e-3
BENCHMARK_LR = 1e-4
# The adapter draws from its own stream so the backbone init does not depend on the expert layout.
ADAPTER_INIT_STREAM = 31


@dataclass(slots=True)
class BackboneConfig:
    """Extents of the backbone and the layout of its MoASE adapter."""

    input_dim: int = 16
    tokens: int = 8
    channels: int = 8
    classes: int = 4
    num_experts: int = 4
    hidden_size: int = 8
    agnostic_experts: int | None = None
    experts: list[ExpertSpec] | None = None
    dropout: float = 0.1
    eta: float = DEFAULT_ETA
    q_min: float = DEFAULT_Q_MIN
    q_max: float = DEFAULT_Q_MAX
    reducer: ScoreReducer = ScoreReducer.L2_NORM
    use_sdd: bool = True
    use_asg: bool = True
    dar_low_only: bool = True

    def validate(self) -> None:
        for name in ("input_dim", "tokens", "channels", "classes", "num_experts", "hidden_size"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1, got {getattr(self, name)}", operation="backbone_config")
        if self.num_experts % 2:
            raise DomainError(f"num_experts must be even, got {self.num_experts}", operation="backbone_config")
        if self.tokens < 2:
            raise DomainError("the router needs at least 2 tokens", operation="backbone_config")
        if not 0.0 <= self.dropout < 1.0:
            raise DomainError(f"dropout must lie in [0, 1), got {self.dropout}", operation="backbone_config")
        if self.experts is not None and len(self.experts) != self.num_experts:
            raise DomainError(
                f"{len(self.experts)} explicit experts for num_experts={self.num_experts}",
                operation="backbone_config",
            )
        self.reducer = ScoreReducer(self.reducer)

    def expert_layout(self) -> list[ExpertSpec]:
        if self.experts is not None:
            return list(self.experts)
        return default_expert_layout(self.num_experts, self.hidden_size, self.agnostic_experts)

    @property
    def variant(self) -> MoaseVariant:
        return MoaseVariant(use_sdd=self.use_sdd, use_asg=self.use_asg, dar_low_only=self.dar_low_only)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["reducer"] = ScoreReducer(self.reducer).value
        if self.experts is not None:
            data["experts"] = [
                {"polarity": spec.polarity.value, "keep_ratio": spec.keep_ratio, "rank": spec.rank}
                for spec in self.experts
            ]
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BackboneConfig":
        data = dict(data)
        if data.get("experts") is not None:
            data["experts"] = [spec if isinstance(spec, ExpertSpec) else ExpertSpec(**spec) for spec in data["experts"]]
        config = cls(**data)
        config.validate()
        return config


@dataclass(slots=True)
class ForwardOutput:
    logits: torch.Tensor
    features: torch.Tensor
    routing: RoutingWeights | None = None


class Backbone(nn.Module):
    """Token embedder -> residual block (linear + MoASE in parallel) -> mean pool -> classifier."""

    def __init__(self, config: BackboneConfig, rng: Rng) -> None:
        super().__init__()
        config.validate()
        self.config = config
        self.embed = AffineMap(config.input_dim, config.tokens * config.channels).uniform_(rng)
        self.block_linear = AffineMap(config.channels, config.channels).uniform_(rng)
        self.classifier = AffineMap(config.channels, config.classes).uniform_(rng)
        self.moase = MoaseLayer(
            config.channels,
            config.expert_layout(),
            rng.spawn(ADAPTER_INIT_STREAM),
            eta=config.eta,
            q_min=config.q_min,
            q_max=config.q_max,
            reducer=config.reducer,
            variant=config.variant,
        )

    def forward(
        self,
        x: torch.Tensor,
        *,
        use_adapter: bool = True,
        dropout_rng: Rng | None = None,
    ) -> ForwardOutput:
        """Logits [B, C] and pre-classifier features [B, D].

        Dropout on the block activation is applied only when `dropout_rng` is given.
        """
        config = self.config
        if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] != config.input_dim:
            raise DomainError(
                f"expected non-empty [B, {config.input_dim}] input, got {tuple(x.shape)}", operation="forward"
            )
        tokens = self.embed(x).view(x.shape[0], config.tokens, config.channels)
        pre_activation = self.block_linear(tokens)
        routing = None
        if use_adapter:
            adapted = self.moase(tokens)
            pre_activation = pre_activation + adapted.features
            routing = adapted.routing
        hidden = F.gelu(pre_activation)
        if dropout_rng is not None and config.dropout > 0:
            keep = (dropout_rng.uniform(*hidden.shape) >= config.dropout).to(hidden.dtype)
            hidden = hidden * keep / (1.0 - config.dropout)
        features = (tokens + hidden).mean(dim=1)
        return ForwardOutput(logits=self.classifier(features), features=features, routing=routing)

    def backbone_parameters(self) -> Iterable[nn.Parameter]:
        """Parameters outside the adapter."""
        for name, param in self.named_parameters():
            if not name.startswith("moase."):
                yield param


@dataclass
class ModelPair:
    """Student, EMA teacher and the frozen source snapshot they started from."""

    config: BackboneConfig
    student: Backbone
    teacher: Backbone
    source: dict[str, torch.Tensor]
    step: int = 0
    metadata: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_student(cls, config: BackboneConfig, student: Backbone) -> "ModelPair":
        teacher = copy.deepcopy(student)
        teacher.requires_grad_(False)
        teacher.eval()
        return cls(config=config, student=student, teacher=teacher, source=snapshot_parameters(student))


def snapshot_parameters(module: nn.Module) -> dict[str, torch.Tensor]:
    return {name: param.detach().clone() for name, param in module.named_parameters()}


def build_model(config: BackboneConfig, rng: Rng) -> ModelPair:
    """Fresh student/teacher pair with identical parameters and a source snapshot."""
    config.validate()
    return ModelPair.from_student(config, Backbone(config, rng))


def build_optimizer(
    params: Iterable[nn.Parameter],
    lr: float = DEFAULT_LR,
    betas: tuple[float, float] = DEFAULT_BETAS,
) -> torch.optim.Adam:
    return torch.optim.Adam(list(params), lr=lr, betas=betas)


@torch.no_grad()
def restore_stochastic(
    student: nn.Module,
    snapshot: dict[str, torch.Tensor],
    rate: float,
    rng: Rng,
) -> int:
    """Reset each scalar parameter to its snapshot value with probability `rate`.

    Returns the number of restored scalars.
    """
    if not 0.0 <= rate <= 1.0:
        raise DomainError(f"rate must lie in [0, 1], got {rate}", operation="restore_stochastic")
    restored = 0
    for name, param in student.named_parameters():
        if name not in snapshot or snapshot[name].shape != param.shape:
            raise DomainError(f"snapshot does not match parameter {name}", operation="restore_stochastic")
        if rate == 0.0:
            continue
        mask = rng.uniform(*param.shape) < rate
        param.copy_(torch.where(mask, snapshot[name], param))
        restored += int(mask.sum())
    return restored


def parameter_hash(module: nn.Module) -> str:
    """sha256 over parameter names, shapes and raw float64 bytes."""
    digest = hashlib.sha256()
    for name, param in module.named_parameters():
        digest.update(name.encode("utf-8"))
        digest.update(str(tuple(param.shape)).encode("utf-8"))
        digest.update(param.detach().to(DTYPE).contiguous().numpy().tobytes())
    return digest.hexdigest()


def parameter_distance(first: nn.Module, second: nn.Module) -> float:
    """Euclidean distance between two parameter sets of equal structure."""
    total = torch.zeros((), dtype=DTYPE)
    for (_, a), (_, b) in zip(first.named_parameters(), second.named_parameters(), strict=True):
        total = total + ((a.detach() - b.detach()) ** 2).sum()
    return float(total.sqrt())


def save_checkpoint(pair: ModelPair, path: Path, log_path: Path = DEFAULT_LOG_PATH) -> Path:
    """Write the pair as a torch-serialized dict of float64 state dicts."""
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": pair.config.to_dict(),
        "step": pair.step,
        "metadata": dict(pair.metadata),
        "student": pair.student.state_dict(),
        "teacher": pair.teacher.state_dict(),
        "source": dict(pair.source),
    }
    torch.save(payload, path)
    write_log(f"Checkpoint saved -> {path}", log_path)
    return path


def load_checkpoint(path: Path, log_path: Path = DEFAULT_LOG_PATH) -> ModelPair:
    """Rebuild a pair from `save_checkpoint` output, bit-exact."""
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise DomainError(f"{path} is not a {CHECKPOINT_FORMAT} file", operation="load_checkpoint")
    config = BackboneConfig.from_dict(payload["config"])
    student = Backbone(config, Rng(0))
    student.load_state_dict(payload["student"])
    pair = ModelPair.from_student(config, student)
    pair.teacher.load_state_dict(payload["teacher"])
    pair.source = {name: tensor.clone() for name, tensor in payload["source"].items()}
    pair.step = int(payload["step"])
    pair.metadata = dict(payload.get("metadata", {}))
    write_log(f"Checkpoint loaded <- {path} (step={pair.step})", log_path)
    return pair
