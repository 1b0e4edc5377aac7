"""Source pretraining, evaluate-then-adapt episodes, sweeps and the bound diagnostic."""

from __future__ import annotations

import copy
import csv
import json
import time
from collections import defaultdict
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch
import yaml
from torch.nn import functional as F

from .config import SECTIONS, ConfigError, ExperimentConfig
from .daopd import AdaptMode, DaopdTrainer, NumericAbortError, StepRecord
from .diagnostics import (
    SOURCE_DOMAIN,
    BoundReport,
    FeatureBank,
    LabeledDomain,
    bound_check,
    feature_histogram,
    intra_class_divergence,
    js_divergence,
)
from .log_utils import DEFAULT_LOG_PATH, log_event, write_log
from .model import ModelPair, build_model, build_optimizer, parameter_hash
from .numeric import DomainError, Rng
from .stream import SOURCE_TRAIN_STREAM, BlobTask, StreamBatch, generate_stream, labeled_domain_sample, source_split

MODEL_STREAM = 30
TRAINER_STREAM = 40
BOUND_STREAM = 50

SUMMARY_COLUMNS = ("round", "domain", "batches", "mean_error", "js", "ic", "delta_prev_round")
SWEEP_COLUMNS = ("param", "value", "mode", "seed", "mean_error", "js", "ic")


@dataclass(slots=True)
class PretrainResult:
    pair: ModelPair
    accuracy: float
    steps: int
    reached: bool


@dataclass(slots=True)
class DomainSummary:
    round: int
    domain: str
    batches: int
    mean_error: float
    js: float
    ic: float
    delta_prev_round: float | None = None

    def as_row(self) -> dict[str, Any]:
        return {
            "round": self.round,
            "domain": self.domain,
            "batches": self.batches,
            "mean_error": f"{self.mean_error:.6f}",
            "js": f"{self.js:.6f}",
            "ic": f"{self.ic:.6f}",
            "delta_prev_round": "" if self.delta_prev_round is None else f"{self.delta_prev_round:.6f}",
        }


@dataclass
class EpisodeMetrics:
    """Per-step records, per-(round, domain) summaries and the adapted pair."""

    mode: AdaptMode
    records: list[dict[str, Any]] = field(default_factory=list)
    summary: list[DomainSummary] = field(default_factory=list)
    pair: ModelPair | None = None

    @property
    def mean_error(self) -> float:
        if not self.records:
            return float("nan")
        return float(np.mean([r["error"] for r in self.records]))

    def domain_mean(self, key: str, domain: str | None = None) -> float:
        """Mean of a summary column over domains (all domains when `domain` is None)."""
        rows = [getattr(s, key) for s in self.summary if domain is None or s.domain == domain]
        return float(np.mean(rows)) if rows else float("nan")


class Evaluator:
    """Holds the hidden labels side of the stream and scores online predictions."""

    def __init__(self) -> None:
        self._errors: dict[tuple[int, str], list[float]] = defaultdict(list)

    def score(self, batch: StreamBatch, predictions: torch.Tensor, labels: torch.Tensor) -> float:
        error = float((predictions != labels).double().mean())
        self._errors[(batch.round, batch.name)].append(error)
        return error

    def errors(self, round_index: int, name: str) -> list[float]:
        return list(self._errors[(round_index, name)])


@torch.no_grad()
def accuracy(pair: ModelPair, inputs: torch.Tensor, labels: torch.Tensor, *, use_adapter: bool = True) -> float:
    pair.student.eval()
    logits = pair.student(inputs, use_adapter=use_adapter).logits
    return float((logits.argmax(dim=1) == labels).double().mean())


def pretrain_source(config: ExperimentConfig, log_path: Path = DEFAULT_LOG_PATH) -> PretrainResult:
    """Supervised training of the backbone on clean blobs with the adapter switched off."""
    config.validate()
    settings = config.pretrain
    seed = config.stream.seed
    pair = build_model(config.model, Rng(seed, MODEL_STREAM))
    student = pair.student
    task = BlobTask.from_config(config.stream)
    train_rng = Rng(seed, SOURCE_TRAIN_STREAM)
    val_x, val_y = source_split(config.stream, settings.validation_samples, train=False)
    optimizer = build_optimizer(student.backbone_parameters(), settings.learning_rate)
    write_log(f"Pretraining source model (seed={seed}, steps<={settings.steps})", log_path)

    best = 0.0
    steps = 0
    for steps in range(1, settings.steps + 1):
        student.train()
        x, y = task.sample(settings.batch_size, train_rng)
        loss = F.cross_entropy(student(x, use_adapter=False).logits, y)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        if steps % settings.eval_every == 0 or steps == settings.steps:
            best = accuracy(pair, val_x, val_y)
            if best >= settings.target_accuracy:
                break
    student.eval()

    reached = best >= settings.target_accuracy
    trained = ModelPair.from_student(config.model, student)
    trained.metadata.update(
        {"source_accuracy": best, "pretrain_steps": steps, "reached": reached, "seed": seed}
    )
    log_event("pretrain_done", log_path, accuracy=best, steps=steps, reached=reached)
    if not reached:
        write_log(
            f"WARNING: source accuracy {best:.3f} below target {settings.target_accuracy:.3f} "
            f"after {steps} steps; episodes still run",
            log_path,
        )
    return PretrainResult(pair=trained, accuracy=best, steps=steps, reached=reached)


def _domain_key(batch: StreamBatch) -> str:
    return f"r{batch.round}:{batch.name}"


def _step_record(
    record: StepRecord,
    batch: StreamBatch,
    error: float,
    js: float,
    ic_per_class: dict[int, float],
    elapsed: float,
) -> dict[str, Any]:
    row: dict[str, Any] = {
        "step": record.step,
        "round": batch.round,
        "domain": batch.name,
        "domain_id": batch.domain_id,
        "error": error,
        "consistency": record.consistency,
        "daopd": record.daopd,
        "view_kl": record.view_kl,
        "reward": record.reward,
        "baseline": record.baseline,
        "routing": record.routing_mean,
        "strengths": record.strengths,
        "restored": record.restored,
        "js": js,
        "ic": {str(c): v for c, v in ic_per_class.items()},
        "wall_clock": elapsed,
    }
    if record.hashes:
        row["hashes"] = dict(record.hashes)
    return row


def _summaries(evaluator: Evaluator, sums: dict[tuple[int, str], list[tuple[float, float]]]) -> list[DomainSummary]:
    rows: list[DomainSummary] = []
    previous: dict[str, float] = {}
    for (round_index, name), values in sums.items():
        errors = evaluator.errors(round_index, name)
        mean_error = float(np.mean(errors))
        rows.append(
            DomainSummary(
                round=round_index,
                domain=name,
                batches=len(errors),
                mean_error=mean_error,
                js=float(np.mean([v[0] for v in values])),
                ic=float(np.mean([v[1] for v in values])),
                delta_prev_round=mean_error - previous[name] if name in previous else None,
            )
        )
        previous[name] = mean_error
    return rows


def write_metrics(metrics: EpisodeMetrics, out_dir: Path) -> tuple[Path, Path]:
    """metrics.jsonl (one object per step) and summary.csv."""
    out_dir.mkdir(parents=True, exist_ok=True)
    jsonl = out_dir / "metrics.jsonl"
    with jsonl.open("w", encoding="utf-8") as fp:
        for row in metrics.records:
            fp.write(json.dumps(row, sort_keys=True) + "\n")
    summary = out_dir / "summary.csv"
    with summary.open("w", encoding="utf-8", newline="") as fp:
        writer = csv.DictWriter(fp, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for row in metrics.summary:
            writer.writerow(row.as_row())
        writer.writerow(
            {
                "round": "",
                "domain": "overall",
                "batches": len(metrics.records),
                "mean_error": f"{metrics.mean_error:.6f}",
                "js": f"{metrics.domain_mean('js'):.6f}",
                "ic": f"{metrics.domain_mean('ic'):.6f}",
                "delta_prev_round": "",
            }
        )
    return jsonl, summary


def _dump_abort(error: NumericAbortError, out_dir: Path | None, log_path: Path) -> None:
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "abort_state.json"
    path.write_text(json.dumps({"step": error.step, "state": error.state}, indent=2, default=str), encoding="utf-8")
    write_log(f"Numeric abort state dumped -> {path}", log_path)


def run_episode(
    config: ExperimentConfig,
    source: ModelPair,
    mode: AdaptMode | str,
    *,
    out_dir: Path | None = None,
    log_path: Path = DEFAULT_LOG_PATH,
) -> EpisodeMetrics:
    """Evaluate-then-adapt over the whole stream, starting from a copy of `source`."""
    config.validate()
    mode = AdaptMode(mode)
    pair = copy.deepcopy(source)
    seed = config.stream.seed
    trainer = DaopdTrainer(
        pair,
        mode=mode,
        daopd=config.daopd,
        trainer=config.trainer,
        augment=config.augment,
        rng=Rng(seed, TRAINER_STREAM),
        log_path=log_path,
    )

    metrics = EpisodeMetrics(mode=mode, pair=pair)
    evaluator = Evaluator()
    sums: dict[tuple[int, str], list[tuple[float, float]]] = defaultdict(list)
    current: tuple[int, str] | None = None
    started = time.perf_counter()
    log_event("episode_start", log_path, mode=mode.value, seed=seed, source_hash=parameter_hash(pair.student)[:12])
    try:
        trainer.check_parameters()
        bank = FeatureBank(capacity=config.diagnostics.window)
        src_x, src_y = source_split(config.stream, config.diagnostics.source_samples, train=False)
        bank.add_batch(SOURCE_DOMAIN, src_y.tolist(), trainer.predict(src_x).features)
        direction = bank.principal_direction()
        value_range = bank.source_range(direction)
        bins = config.diagnostics.bins
        source_hist = feature_histogram(bank, SOURCE_DOMAIN, bins, value_range, direction)

        for batch, labels in generate_stream(config.stream, config.augment):
            if (batch.round, batch.name) != current:
                current = (batch.round, batch.name)
                log_event("domain_start", log_path, round=batch.round, domain=batch.name, step=pair.step)
            record = trainer.adaptation_step(batch.inputs)
            error = evaluator.score(batch, record.predictions, labels)
            key = _domain_key(batch)
            bank.add_batch(key, labels.tolist(), record.features)
            js = js_divergence(source_hist, feature_histogram(bank, key, bins, value_range, direction))
            ic = {c: intra_class_divergence(bank, c, key) for c in bank.labels(key)}
            sums[current].append((js, float(np.mean(list(ic.values())))))
            metrics.records.append(_step_record(record, batch, error, js, ic, time.perf_counter() - started))
    except NumericAbortError as exc:
        _dump_abort(exc, out_dir, log_path)
        raise

    metrics.summary = _summaries(evaluator, sums)
    for row in metrics.summary:
        log_event("domain_summary", log_path, round=row.round, domain=row.domain, error=row.mean_error, js=row.js)
    log_event("episode_done", log_path, mode=mode.value, mean_error=metrics.mean_error, steps=len(metrics.records))
    if out_dir is not None:
        write_metrics(metrics, out_dir)
    return metrics


def set_param(config: ExperimentConfig, name: str, value: Any) -> ExperimentConfig:
    """Copy of `config` with one field replaced; `name` is `field` or `section.field`."""
    if "." in name:
        section, key = name.split(".", 1)
        candidates = [section] if section in SECTIONS else []
    else:
        key = name
        candidates = ["daopd", "trainer", "model", "augment", "pretrain", "diagnostics", "stream"]
    for section in candidates:
        current = getattr(config, section)
        if key in {f.name for f in fields(current)}:
            updated = copy.deepcopy(config)
            setattr(updated, section, replace(copy.deepcopy(current), **{key: value}))
            updated.validate()
            return updated
    raise ConfigError("unknown sweep parameter", field_path=name)


def sweep(
    config: ExperimentConfig,
    param: str,
    values: Sequence[Any],
    *,
    mode: AdaptMode | str = AdaptMode.MOASE_PLUS,
    out_dir: Path | None = None,
    log_path: Path = DEFAULT_LOG_PATH,
) -> list[dict[str, Any]]:
    """One episode per value; the source model is retrained only when the model section changes."""
    if not values:
        raise ConfigError("no sweep values", field_path="values")
    rows: list[dict[str, Any]] = []
    pretrained: dict[str, PretrainResult] = {}
    for value in values:
        cell = set_param(config, param, value)
        model_key = json.dumps(cell.model.to_dict(), sort_keys=True)
        if model_key not in pretrained:
            pretrained[model_key] = pretrain_source(cell, log_path)
        metrics = run_episode(cell, pretrained[model_key].pair, mode, log_path=log_path)
        rows.append(
            {
                "param": param,
                "value": value,
                "mode": AdaptMode(mode).value,
                "seed": cell.stream.seed,
                "mean_error": metrics.mean_error,
                "js": metrics.domain_mean("js"),
                "ic": metrics.domain_mean("ic"),
            }
        )
        log_event("sweep_cell", log_path, param=param, value=value, mean_error=metrics.mean_error)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with (out_dir / "sweep.csv").open("w", encoding="utf-8", newline="") as fp:
            writer = csv.DictWriter(fp, fieldnames=SWEEP_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
    return rows


def domain_bound(config: ExperimentConfig, pair: ModelPair, domain_index: int = -1, samples: int = 512) -> BoundReport:
    """bound_check of `pair` between clean source data and one stream domain."""
    if not config.stream.domains:
        raise DomainError("stream has no domains", operation="domain_bound")
    spec = config.stream.domains[domain_index]
    src_x, src_y = source_split(config.stream, samples, train=False)
    bound_rng = Rng(config.stream.seed, BOUND_STREAM)
    tgt_x, tgt_y = labeled_domain_sample(config.stream, spec, samples, bound_rng, config.augment)

    @torch.no_grad()
    def predict(x: torch.Tensor) -> torch.Tensor:
        pair.student.eval()
        return pair.student(x).logits.argmax(dim=1)

    with torch.no_grad():
        pair.student.eval()
        bank = FeatureBank(capacity=samples)
        bank.add_batch(SOURCE_DOMAIN, src_y.tolist(), pair.student(src_x).features)
        bank.add_batch(spec.name, tgt_y.tolist(), pair.student(tgt_x).features)
    value_range = bank.source_range()
    hist_s = feature_histogram(bank, SOURCE_DOMAIN, config.diagnostics.bins, value_range)
    hist_t = feature_histogram(bank, spec.name, config.diagnostics.bins, value_range)
    return bound_check(
        predict,
        LabeledDomain(src_x, src_y, src_y),
        LabeledDomain(tgt_x, tgt_y, tgt_y),
        hist_s,
        hist_t,
    )


def diagnose(
    config: ExperimentConfig,
    source: ModelPair,
    mode: AdaptMode | str,
    *,
    out_dir: Path | None = None,
    log_path: Path = DEFAULT_LOG_PATH,
) -> tuple[EpisodeMetrics, BoundReport]:
    """Episode plus JS/IC series and the bound report for the last domain."""
    metrics = run_episode(config, source, mode, log_path=log_path)
    report = domain_bound(config, metrics.pair or source)
    log_event(
        "bound_check",
        log_path,
        eps_target=report.eps_target,
        eps_source=report.eps_source,
        divergence=report.divergence,
        slack=report.slack,
    )
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with (out_dir / "diag.jsonl").open("w", encoding="utf-8") as fp:
            for row in metrics.records:
                entry = {k: row[k] for k in ("step", "round", "domain", "js", "ic")}
                fp.write(json.dumps(entry, sort_keys=True) + "\n")
        (out_dir / "bound.json").write_text(
            json.dumps(
                {
                    "domain": config.stream.domains[-1].name,
                    "eps_target": report.eps_target,
                    "eps_source": report.eps_source,
                    "divergence": report.divergence,
                    "label_disc": report.label_disc,
                    "slack": report.slack,
                },
                indent=2,
            ),
            encoding="utf-8",
        )
    return metrics, report


def parse_values(raw: str) -> list[Any]:
    """Comma-separated sweep values, each parsed as a YAML scalar."""
    return [yaml.safe_load(part) for part in raw.split(",") if part.strip()]


def strip_wall_clock(records: Iterable[dict[str, Any]]) -> list[dict[str, Any]]:
    return [{k: v for k, v in r.items() if k != "wall_clock"} for r in records]
