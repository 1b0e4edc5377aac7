import pytest
import torch

from moase_tta.config import ConfigError, DomainSpec, StreamConfig
from moase_tta.numeric import DomainError, Rng
from moase_tta.stream import (
    DATA_STREAM,
    BlobTask,
    corruption_fingerprint,
    generate_stream,
    labeled_domain_sample,
    source_split,
)


def _config(*families, duration=4, rounds=1, **overrides) -> StreamConfig:
    domains = [DomainSpec(name=f, family=f, duration=duration) for f in families]
    return StreamConfig(domains=domains, rounds=rounds, **overrides)


def _clean(config: StreamConfig, batches: int) -> list[torch.Tensor]:
    task = BlobTask.from_config(config)
    rng = Rng(config.seed, DATA_STREAM)
    return [task.sample(config.batch_size, rng) for _ in range(batches)]


def test_identity_domain_yields_clean_samples():
    config = _config("identity")
    for (batch, labels), (inputs, expected) in zip(generate_stream(config), _clean(config, 4)):
        assert torch.equal(batch.inputs, inputs)
        assert torch.equal(labels, expected)


def test_stream_is_deterministic():
    config = _config("gauss-noise", "occlude", rounds=2)
    first = list(generate_stream(config))
    second = list(generate_stream(config))
    assert len(first) == 16
    for (a, la), (b, lb) in zip(first, second):
        assert torch.equal(a.inputs, b.inputs) and torch.equal(la, lb)


def test_full_severity_noise_has_the_configured_std():
    config = _config("gauss-noise", duration=10)
    residuals = [batch.inputs - clean for (batch, _), (clean, _) in zip(generate_stream(config), _clean(config, 10))]
    assert float(torch.cat(residuals).std()) == pytest.approx(0.5, rel=0.05)


def test_full_severity_contrast_halves_the_spread():
    config = _config("contrast", duration=2)
    for (batch, _), (clean, _) in zip(generate_stream(config), _clean(config, 2)):
        centered = clean - clean.mean(dim=1, keepdim=True)
        assert torch.allclose(batch.inputs - batch.inputs.mean(dim=1, keepdim=True), 0.5 * centered, atol=1e-12)


def test_batches_carry_order_and_fingerprints():
    config = _config("smooth", "brightness", duration=2, rounds=2)
    batches = [batch for batch, _ in generate_stream(config)]
    assert [b.index for b in batches] == list(range(8))
    assert [(b.round, b.name) for b in batches[::2]] == [
        (0, "smooth"),
        (0, "brightness"),
        (1, "smooth"),
        (1, "brightness"),
    ]
    assert batches[0].fingerprint == batches[4].fingerprint
    assert batches[0].fingerprint != batches[2].fingerprint
    assert batches[2].fingerprint == corruption_fingerprint(config.domains[1])


def test_invalid_domain_is_rejected():
    with pytest.raises(ConfigError):
        list(generate_stream(_config("fog")))
    with pytest.raises(ConfigError):
        list(generate_stream(StreamConfig(domains=[])))


def test_source_splits_are_distinct_and_reproducible():
    config = StreamConfig()
    train_x, train_y = source_split(config, 32, train=True)
    again_x, _ = source_split(config, 32, train=True)
    eval_x, _ = source_split(config, 32, train=False)
    assert torch.equal(train_x, again_x)
    assert not torch.equal(train_x, eval_x)
    assert train_x.shape == (32, config.input_dim)
    assert int(train_y.max()) < config.classes


def test_labeled_domain_sample_shapes():
    config = StreamConfig()
    inputs, labels = labeled_domain_sample(config, config.domains[0], 20, Rng(3))
    assert inputs.shape == (20, config.input_dim)
    assert labels.shape == (20,)


def test_blob_task_rejects_empty_sample():
    with pytest.raises(DomainError):
        BlobTask.from_config(StreamConfig()).sample(0, Rng(0))
