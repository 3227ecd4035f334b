import numpy as np
import pytest

from wdrop.data import generate_synthetic
from wdrop.fewshot import EvalSettings, PipelineConfig, StageConfig, holdout_split, pretrain
from wdrop.regularize import RegularizerConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_split():
    # 10 classes split 6/2/2; val+novel gives a 4-class eval pool
    return generate_synthetic(n_classes=10, images_per_class=24, seed=0)


def tiny_config(**reg) -> PipelineConfig:
    return PipelineConfig(
        pretrain=StageConfig("pretrain", epochs=1, batch_size=16, lr=0.01, schedule="cosine"),
        finetune=StageConfig("finetune", steps=20, batch_size=0, lr=0.01, weight_decay=0.0),
        regularizer=RegularizerConfig(**reg) if reg else RegularizerConfig(),
        eval=EvalSettings(n_way=3, k_shots=(1,), q_queries=5, episodes=4, pool="val+novel"),
        holdout=4,
    )


@pytest.fixture(scope="session")
def tiny_ckpt(tiny_split):
    train, _ = holdout_split(tiny_split.subset("base"), 4)
    return pretrain(train, tiny_config(), seed=0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
