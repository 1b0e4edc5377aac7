import os
import sys
import tempfile
from pathlib import Path

import pytest

os.environ.setdefault("MOASE_TTA_LOG_PATH", str(Path(tempfile.gettempdir()) / "moase_tta_tests" / "moase_tta.log"))
sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from moase_tta.config import DomainSpec, ExperimentConfig, PretrainConfig, StreamConfig  # noqa: E402
from moase_tta.model import BackboneConfig  # noqa: E402
from moase_tta.numeric import configure_determinism  # noqa: E402

configure_determinism()


@pytest.fixture
def log_path(tmp_path: Path) -> Path:
    return tmp_path / "moase_tta.log"


@pytest.fixture
def tiny_model_config() -> BackboneConfig:
    return BackboneConfig(input_dim=6, tokens=6, channels=4, classes=3, num_experts=4, hidden_size=4)


@pytest.fixture
def tiny_experiment() -> ExperimentConfig:
    return make_tiny_experiment()


def make_tiny_experiment() -> ExperimentConfig:
    """Three short domains on a small, well separated blob task."""
    domains = [
        DomainSpec(name="gauss-noise", family="gauss-noise", duration=3),
        DomainSpec(name="contrast", family="contrast", duration=3),
        DomainSpec(name="identity", family="identity", duration=3),
    ]
    return ExperimentConfig(
        model=BackboneConfig(input_dim=8, tokens=4, channels=4, classes=3, num_experts=4, hidden_size=4),
        stream=StreamConfig(classes=3, input_dim=8, separation=6.0, batch_size=16, domains=domains),
        pretrain=PretrainConfig(steps=300, eval_every=50, validation_samples=300),
    )
