import math

import pytest
import torch
from torch import nn
from torch.func import functional_call

from moase_tta.model import (
    BackboneConfig,
    build_model,
    build_optimizer,
    load_checkpoint,
    parameter_distance,
    parameter_hash,
    restore_stochastic,
    save_checkpoint,
    snapshot_parameters,
)
from moase_tta.numeric import DTYPE, DomainError, Rng, check_gradients, log_softmax


def _randomize_adapters(pair, seed: int = 100) -> None:
    for i, expert in enumerate(pair.student.moase.experts):
        expert.up.uniform_(Rng(seed + i))


def test_fresh_pair_is_identical(tiny_model_config):
    pair = build_model(tiny_model_config, Rng(1))
    assert parameter_distance(pair.student, pair.teacher) == 0.0
    x = Rng(2).normal(5, tiny_model_config.input_dim)
    with torch.no_grad():
        assert torch.equal(pair.student(x).logits, pair.teacher(x).logits)


def test_zero_initialized_adapter_matches_plain_backbone(tiny_model_config):
    pair = build_model(tiny_model_config, Rng(3))
    x = Rng(4).normal(7, tiny_model_config.input_dim)
    with torch.no_grad():
        assert torch.equal(pair.student(x).logits, pair.student(x, use_adapter=False).logits)


def test_zero_weights_give_classifier_bias(tiny_model_config):
    pair = build_model(tiny_model_config, Rng(5))
    bias = torch.arange(tiny_model_config.classes, dtype=DTYPE)
    with torch.no_grad():
        for param in pair.student.parameters():
            param.zero_()
        pair.student.classifier.bias.copy_(bias)
        logits = pair.student(torch.zeros(3, tiny_model_config.input_dim, dtype=DTYPE)).logits
    assert torch.equal(logits, bias.expand(3, -1))


def test_identical_rows_give_identical_logits(tiny_model_config):
    pair = build_model(tiny_model_config, Rng(6))
    _randomize_adapters(pair)
    row = Rng(7).normal(1, tiny_model_config.input_dim)
    with torch.no_grad():
        out = pair.student(row.expand(4, -1).clone())
    assert torch.allclose(out.logits, out.logits[:1].expand(4, -1), atol=1e-12)
    assert out.features.shape == (4, tiny_model_config.channels)


def test_forward_rejects_bad_batches(tiny_model_config):
    pair = build_model(tiny_model_config, Rng(8))
    with pytest.raises(DomainError):
        pair.student(torch.zeros(2, tiny_model_config.input_dim + 1, dtype=DTYPE))
    with pytest.raises(DomainError):
        pair.student(torch.zeros(0, tiny_model_config.input_dim, dtype=DTYPE))


def test_full_model_gradient_matches_finite_differences(tiny_model_config):
    pair = build_model(tiny_model_config, Rng(9))
    _randomize_adapters(pair)
    student = pair.student.eval()
    x = Rng(10).normal(4, tiny_model_config.input_dim)
    target = torch.tensor([0, 1, 2, 1])
    names = [n for n, _ in student.named_parameters() if not n.startswith(("embed", "moase.heads.asg_head"))]
    params = [dict(student.named_parameters())[n].detach().clone().requires_grad_(True) for n in names]

    def loss(*values):
        logits = functional_call(student, dict(zip(names, values)), (x,)).logits
        return -log_softmax(logits).gather(1, target.unsqueeze(1)).mean()

    assert check_gradients(loss, params)


def test_dropout_only_with_rng():
    config = BackboneConfig(dropout=0.5)
    pair = build_model(config, Rng(11))
    x = Rng(12).normal(6, config.input_dim)
    with torch.no_grad():
        plain = pair.student(x).logits
        dropped = pair.student(x, dropout_rng=Rng(13)).logits
        again = pair.student(x, dropout_rng=Rng(13)).logits
    assert not torch.equal(plain, dropped)
    assert torch.equal(dropped, again)


def test_config_validation():
    with pytest.raises(DomainError):
        BackboneConfig(num_experts=3).validate()
    with pytest.raises(DomainError):
        BackboneConfig(tokens=1).validate()
    with pytest.raises(DomainError):
        BackboneConfig(dropout=1.0).validate()
    with pytest.raises(DomainError):
        BackboneConfig(channels=0).validate()


def test_restore_stochastic_extremes(tiny_model_config):
    pair = build_model(tiny_model_config, Rng(14))
    snapshot = snapshot_parameters(pair.student)
    with torch.no_grad():
        for param in pair.student.parameters():
            param.add_(1.0)
    moved = parameter_hash(pair.student)
    assert restore_stochastic(pair.student, snapshot, 0.0, Rng(15)) == 0
    assert parameter_hash(pair.student) == moved
    total = sum(p.numel() for p in pair.student.parameters())
    assert restore_stochastic(pair.student, snapshot, 1.0, Rng(16)) == total
    for name, param in pair.student.named_parameters():
        assert torch.equal(param, snapshot[name])


def test_restore_stochastic_rate_is_binomial():
    module = nn.Linear(100, 100, bias=False, dtype=DTYPE)
    snapshot = {name: torch.zeros_like(p) for name, p in module.named_parameters()}
    restored = restore_stochastic(module, snapshot, 0.01, Rng(17))
    sigma = math.sqrt(10_000 * 0.01 * 0.99)
    assert abs(restored - 100) <= 3 * sigma
    assert int((module.weight == 0).sum()) >= restored


def test_restore_stochastic_rejects_bad_rate(tiny_model_config):
    pair = build_model(tiny_model_config, Rng(18))
    with pytest.raises(DomainError):
        restore_stochastic(pair.student, pair.source, 1.5, Rng(0))


def test_teacher_never_accumulates_gradients(tiny_model_config):
    pair = build_model(tiny_model_config, Rng(19))
    optimizer = build_optimizer(pair.student.parameters())
    logits = pair.student(Rng(20).normal(3, tiny_model_config.input_dim)).logits
    logits.pow(2).sum().backward()
    optimizer.step()
    assert all(p.grad is None and not p.requires_grad for p in pair.teacher.parameters())
    assert parameter_distance(pair.student, pair.teacher) > 0


def test_build_model_is_deterministic(tiny_model_config):
    first = build_model(tiny_model_config, Rng(21))
    second = build_model(tiny_model_config, Rng(21))
    assert parameter_hash(first.student) == parameter_hash(second.student)
    assert parameter_hash(first.student) != parameter_hash(build_model(tiny_model_config, Rng(22)).student)


def test_backbone_init_does_not_depend_on_the_expert_layout(tiny_model_config):
    balanced = build_model(tiny_model_config, Rng(23)).student
    tiny_model_config.agnostic_experts = 4
    agnostic = build_model(tiny_model_config, Rng(23)).student
    for (name, a), (_, b) in zip(balanced.named_parameters(), agnostic.named_parameters()):
        if not name.startswith("moase."):
            assert torch.equal(a, b), name


def test_checkpoint_round_trip_is_bit_exact(tmp_path, tiny_model_config, log_path):
    pair = build_model(tiny_model_config, Rng(24))
    _randomize_adapters(pair)
    with torch.no_grad():
        pair.teacher.classifier.bias.add_(0.25)
    pair.step = 42
    pair.metadata["source_accuracy"] = 0.97
    path = save_checkpoint(pair, tmp_path / "ckpt" / "source.pt", log_path)
    loaded = load_checkpoint(path, log_path)
    assert parameter_hash(loaded.student) == parameter_hash(pair.student)
    assert parameter_hash(loaded.teacher) == parameter_hash(pair.teacher)
    assert all(torch.equal(loaded.source[k], v) for k, v in pair.source.items())
    assert loaded.step == 42
    assert loaded.metadata["source_accuracy"] == 0.97
    assert loaded.config.to_dict() == pair.config.to_dict()
    assert "Checkpoint saved" in log_path.read_text()


def test_load_checkpoint_missing_file(tmp_path, log_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt", log_path)
