"""Domain-adaptive on-policy distillation: EMA teacher, losses, reward, policy and the step."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

import torch

from .augment import (
    AugmentConfig,
    AugmentPolicy,
    StrengthVector,
    fixed_strengths,
    param_augment,
    policy_sample,
    state_stats,
)
from .log_utils import DEFAULT_LOG_PATH, log_event
from .model import (
    BENCHMARK_LR,
    DEFAULT_BETAS,
    DEFAULT_LR,
    ForwardOutput,
    ModelPair,
    build_optimizer,
    parameter_hash,
    restore_stochastic,
)
from .numeric import DTYPE, DomainError, Rng, kl_from_log_probs, log_softmax, softmax

# Rng stream ids used by the trainer.
POLICY_INIT_STREAM = 10
POLICY_STREAM = 11
AUGMENT_STREAM = 12
DROPOUT_STREAM = 13
RESTORE_STREAM = 14

# (ema_alpha, views, temperature, opd_weight) per benchmark profile.
BENCHMARK_PRESETS: dict[str, tuple[float, int, float, float]] = {
    "cifar10": (0.999, 2, 1.0, 0.5),
    "cifar100": (0.998, 1, 2.5, 0.1),
    "imagenet": (0.995, 1, 2.0, 0.3),
    "acdc": (0.999, 1, 1.5, 0.1),
}


class NumericAbortError(RuntimeError):
    """Raised when an adaptation step meets a non-finite parameter or loss."""

    def __init__(self, message: str, *, step: int, state: dict[str, Any]) -> None:
        super().__init__(message)
        self.step = step
        self.state = state


class AdaptMode(str, Enum):
    SOURCE_FROZEN = "source-frozen"
    MEAN_TEACHER = "mean-teacher-only"
    MOASE = "moase"
    MOASE_PLUS = "moase++"

    @property
    def adapts(self) -> bool:
        return self is not AdaptMode.SOURCE_FROZEN

    @property
    def distills(self) -> bool:
        return self in (AdaptMode.MOASE, AdaptMode.MOASE_PLUS)

    @property
    def learns_policy(self) -> bool:
        return self is AdaptMode.MOASE_PLUS


@dataclass(slots=True)
class DaopdConfig:
    """Distillation and policy hyperparameters.

    Defaults suit desk-scale episodes of a few hundred steps; `preset` loads the benchmark profiles.
    """

    ema_alpha: float = 0.99
    views: int = 2
    temperature: float = 1.0
    opd_weight: float = 0.5
    strength_penalty: float = 0.1
    policy_beta: float = 0.01
    baseline_momentum: float = 0.9

    def validate(self) -> None:
        if not 0.0 <= self.ema_alpha < 1.0:
            raise DomainError(f"ema_alpha must lie in [0, 1), got {self.ema_alpha}", operation="daopd_config")
        if self.views < 1:
            raise DomainError(f"views must be >= 1, got {self.views}", operation="daopd_config")
        if self.temperature <= 0:
            raise DomainError(f"temperature must be > 0, got {self.temperature}", operation="daopd_config")
        for name in ("opd_weight", "strength_penalty", "policy_beta"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0", operation="daopd_config")
        if not 0.0 <= self.baseline_momentum < 1.0:
            raise DomainError("baseline_momentum must lie in [0, 1)", operation="daopd_config")

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "DaopdConfig":
        try:
            alpha, views, temperature, weight = BENCHMARK_PRESETS[name]
        except KeyError:
            raise DomainError(
                f"unknown preset {name!r}; choose from {sorted(BENCHMARK_PRESETS)}", operation="daopd_config"
            ) from None
        config = cls(ema_alpha=alpha, views=views, temperature=temperature, opd_weight=weight, **overrides)
        config.validate()
        return config


@dataclass(slots=True)
class TrainerConfig:
    """Optimizer and restoration settings for the online loop."""

    learning_rate: float = DEFAULT_LR
    beta1: float = DEFAULT_BETAS[0]
    beta2: float = DEFAULT_BETAS[1]
    policy_lr: float = 1e-3
    restore_rate: float = 0.001
    trace_hashes: bool = False

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.policy_lr <= 0:
            raise DomainError("learning rates must be > 0", operation="trainer_config")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise DomainError("Adam betas must lie in [0, 1)", operation="trainer_config")
        if not 0.0 <= self.restore_rate <= 1.0:
            raise DomainError(f"restore_rate must lie in [0, 1], got {self.restore_rate}", operation="trainer_config")

    @classmethod
    def benchmark(cls, **overrides: Any) -> "TrainerConfig":
        """Trainer settings that go with the benchmark presets (student lr 1e-4)."""
        config = cls(**{"learning_rate": BENCHMARK_LR, **overrides})
        config.validate()
        return config


@dataclass(slots=True)
class RewardBaseline:
    """EMA of past rewards."""

    value: float = 0.0
    momentum: float = 0.9

    def update(self, reward_value: float) -> float:
        self.value = self.momentum * self.value + (1.0 - self.momentum) * reward_value
        return self.value


@dataclass(slots=True)
class StepRecord:
    """Outcome of one evaluate-then-adapt step."""

    step: int
    predictions: torch.Tensor
    features: torch.Tensor
    routing_mean: list[float]
    consistency: float = 0.0
    daopd: float = 0.0
    view_kl: float | None = None
    reward: float | None = None
    baseline: float = 0.0
    strengths: list[float] = field(default_factory=list)
    restored: int = 0
    hashes: dict[str, str] = field(default_factory=dict)


@torch.no_grad()
def ema_update(pair: ModelPair, alpha: float) -> None:
    """theta_T <- alpha * theta_T + (1 - alpha) * theta_S."""
    if not 0.0 <= alpha < 1.0:
        raise DomainError(f"alpha must lie in [0, 1), got {alpha}", operation="ema_update")
    for teacher_param, student_param in zip(
        pair.teacher.parameters(), pair.student.parameters(), strict=True
    ):
        teacher_param.mul_(alpha).add_(student_param.detach(), alpha=1.0 - alpha)
    pair.teacher.eval()


def _check_pair(student_logits: torch.Tensor, teacher_logits: torch.Tensor, operation: str) -> None:
    if student_logits.shape != teacher_logits.shape or student_logits.ndim != 2:
        raise DomainError(
            f"logit shapes differ or are not [B, C]: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}",
            operation=operation,
        )


def consistency_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """Batch mean of -<p_T, log p_S> at temperature 1, teacher detached."""
    _check_pair(student_logits, teacher_logits, "consistency_loss")
    teacher_probs = softmax(teacher_logits.detach(), 1.0)
    return -(teacher_probs * log_softmax(student_logits, 1.0)).sum(dim=1).mean()


def reverse_kl(student_logits: torch.Tensor, teacher_logits: torch.Tensor, temperature: float) -> torch.Tensor:
    """Batch mean KL(p_S || p_T) with both sides softened by T, teacher detached."""
    _check_pair(student_logits, teacher_logits, "reverse_kl")
    log_student = log_softmax(student_logits, temperature)
    log_teacher = log_softmax(teacher_logits.detach(), temperature)
    return kl_from_log_probs(log_student, log_teacher).clamp_min(0.0).mean()


def scale_gradient(value: torch.Tensor, factor: float) -> torch.Tensor:
    """Same forward value, gradient multiplied by `factor`."""
    return value.detach() + factor * (value - value.detach())


def daopd_terms(
    student_views: Sequence[torch.Tensor],
    teacher_views: Sequence[torch.Tensor],
    temperature: float,
) -> list[torch.Tensor]:
    """Per-view reverse KL terms."""
    if not student_views:
        raise DomainError("at least one view is required", operation="daopd_loss")
    if len(student_views) != len(teacher_views):
        raise DomainError(
            f"{len(student_views)} student views vs {len(teacher_views)} teacher views", operation="daopd_loss"
        )
    return [reverse_kl(s, t, temperature) for s, t in zip(student_views, teacher_views)]


def weighted_daopd(terms: Sequence[torch.Tensor], temperature: float, opd_weight: float) -> torch.Tensor:
    """(w / V) * sum of terms, with the gradient corrected by T^2."""
    loss = (opd_weight / len(terms)) * torch.stack(list(terms)).sum()
    return scale_gradient(loss, temperature**2)


def daopd_loss(
    student_views: Sequence[torch.Tensor],
    teacher_views: Sequence[torch.Tensor],
    temperature: float,
    opd_weight: float,
) -> torch.Tensor:
    return weighted_daopd(daopd_terms(student_views, teacher_views, temperature), temperature, opd_weight)


def reward(view_kl: float, a: torch.Tensor, strength_penalty: float) -> float:
    """R = -KL - lambda * ||a||^2."""
    if view_kl < 0:
        raise DomainError(f"view_kl must be >= 0, got {view_kl}", operation="reward")
    value = -float(view_kl) - strength_penalty * float((a.detach() ** 2).sum())
    if not math.isfinite(value):
        raise DomainError("reward is not finite", operation="reward")
    return value


def policy_objective(
    log_prob: torch.Tensor,
    reward_value: float,
    baseline: float,
    entropy: torch.Tensor,
    policy_beta: float,
) -> torch.Tensor:
    """J = (R - b) * log pi(a|s) + beta * H; maximized."""
    return (float(reward_value) - float(baseline)) * log_prob + policy_beta * entropy


def non_finite_parameters(module: torch.nn.Module) -> list[str]:
    """Names of parameters holding NaN or infinite entries."""
    return [name for name, param in module.named_parameters() if not torch.isfinite(param).all()]


class DaopdTrainer:
    """Runs the evaluate-then-adapt loop for one ModelPair.

    Each step updates student, then policy, then teacher, then applies stochastic restoration.
    """

    def __init__(
        self,
        pair: ModelPair,
        *,
        mode: AdaptMode | str,
        daopd: DaopdConfig,
        trainer: TrainerConfig,
        augment: AugmentConfig,
        rng: Rng,
        log_path: Path = DEFAULT_LOG_PATH,
    ) -> None:
        daopd.validate()
        trainer.validate()
        augment.validate()
        self.pair = pair
        self.mode = AdaptMode(mode)
        self.daopd = daopd
        self.trainer = trainer
        self.augment = augment
        self.log_path = log_path
        self.baseline = RewardBaseline(momentum=daopd.baseline_momentum)
        self.optimizer = build_optimizer(
            pair.student.parameters(), trainer.learning_rate, (trainer.beta1, trainer.beta2)
        )
        self.policy: AugmentPolicy | None = None
        self.policy_optimizer: torch.optim.Adam | None = None
        if self.mode.learns_policy:
            self.policy = AugmentPolicy(augment, rng.spawn(POLICY_INIT_STREAM))
            self.policy_optimizer = build_optimizer(
                self.policy.parameters(), trainer.policy_lr, (trainer.beta1, trainer.beta2)
            )
        self._policy_rng = rng.spawn(POLICY_STREAM)
        self._augment_rng = rng.spawn(AUGMENT_STREAM)
        self._dropout_rng = rng.spawn(DROPOUT_STREAM)
        self._restore_rng = rng.spawn(RESTORE_STREAM)
        log_event(
            "trainer_ready",
            log_path,
            mode=self.mode.value,
            **{k: v for k, v in asdict(daopd).items()},
            restore_rate=trainer.restore_rate,
        )

    @torch.no_grad()
    def predict(self, x: torch.Tensor) -> ForwardOutput:
        """Student output on clean inputs, evaluation mode."""
        self.pair.student.eval()
        return self.pair.student(x)

    def _distillation_active(self) -> bool:
        return self.mode.distills and self.daopd.opd_weight > 0

    def _sample_strength(self, probs: torch.Tensor) -> StrengthVector:
        if self.policy is not None:
            return policy_sample(state_stats(probs), self.policy, self._policy_rng)
        return fixed_strengths(self.augment)

    def _abort(self, step: int, **state: Any) -> NumericAbortError:
        state["student_hash"] = parameter_hash(self.pair.student)
        state["teacher_hash"] = parameter_hash(self.pair.teacher)
        log_event("numeric_abort", self.log_path, step=step, **{k: v for k, v in state.items() if k != "strengths"})
        return NumericAbortError(f"non-finite state at step {step}", step=step, state=state)

    def check_parameters(self) -> None:
        """Abort when the student already holds NaN or infinite parameters."""
        broken = non_finite_parameters(self.pair.student)
        if broken:
            raise self._abort(self.pair.step, stage="student_parameters", parameters=broken)

    def adaptation_step(self, x: torch.Tensor) -> StepRecord:
        """Predict on clean x, then adapt student, policy and teacher on it."""
        if x.ndim != 2 or x.shape[0] == 0:
            raise DomainError(f"expected a non-empty [B, D] batch, got {tuple(x.shape)}", operation="adaptation_step")
        if not torch.isfinite(x).all():
            raise DomainError("batch contains non-finite inputs", operation="adaptation_step")
        pair = self.pair
        step = pair.step
        self.check_parameters()
        clean = self.predict(x)
        if not (torch.isfinite(clean.logits).all() and torch.isfinite(clean.features).all()):
            raise self._abort(step, stage="clean_prediction")
        probs = softmax(clean.logits, 1.0)
        record = StepRecord(
            step=step,
            predictions=probs.argmax(dim=1),
            features=clean.features.detach(),
            routing_mean=clean.routing.mean() if clean.routing is not None else [],
            baseline=self.baseline.value,
        )
        if not self.mode.adapts:
            pair.step += 1
            return record

        distill = self._distillation_active()
        strength = self._sample_strength(probs) if distill else None
        views = (
            [param_augment(x, strength, self._augment_rng, self.augment) for _ in range(self.daopd.views)]
            if strength is not None
            else []
        )

        # Student.
        student = pair.student
        student.train()
        student_clean = student(x, dropout_rng=self._dropout_rng)
        with torch.no_grad():
            teacher_clean = pair.teacher(x)
        cons = consistency_loss(student_clean.logits, teacher_clean.logits)
        terms: list[torch.Tensor] = []
        opd = torch.zeros((), dtype=DTYPE)
        if views:
            student_views = [student(view, dropout_rng=self._dropout_rng).logits for view in views]
            with torch.no_grad():
                teacher_views = [pair.teacher(view).logits for view in views]
            terms = daopd_terms(student_views, teacher_views, self.daopd.temperature)
            opd = weighted_daopd(terms, self.daopd.temperature, self.daopd.opd_weight)
        total = cons + opd
        if not torch.isfinite(total):
            raise self._abort(
                step,
                consistency=float(cons.detach()),
                daopd=float(opd.detach()),
                strengths=strength.a.tolist() if strength is not None else [],
            )
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        student.eval()
        record.consistency = float(cons.detach())
        record.daopd = float(opd.detach())
        if self.trainer.trace_hashes:
            record.hashes["student"] = parameter_hash(student)
            record.hashes["teacher_before_ema"] = parameter_hash(pair.teacher)

        # Policy.
        if strength is not None:
            record.strengths = strength.a.tolist()
            record.view_kl = float(torch.stack(terms).detach().mean())
            if self.policy is not None and self.policy_optimizer is not None:
                value = reward(record.view_kl, strength.a, self.daopd.strength_penalty)
                objective = policy_objective(
                    strength.log_prob, value, self.baseline.value, strength.entropy, self.daopd.policy_beta
                )
                self.policy_optimizer.zero_grad(set_to_none=True)
                (-objective).backward()
                self.policy_optimizer.step()
                self.baseline.update(value)
                record.reward = value
                record.baseline = self.baseline.value

        # Teacher, then restoration.
        ema_update(pair, self.daopd.ema_alpha)
        record.restored = restore_stochastic(student, pair.source, self.trainer.restore_rate, self._restore_rng)
        if self.trainer.trace_hashes:
            record.hashes["teacher"] = parameter_hash(pair.teacher)
        pair.step += 1
        return record
