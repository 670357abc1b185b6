from __future__ import annotations

import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from stars.data import DataConfig  # noqa: E402
from stars.model import ModelConfig  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(embed_dim=8, encoder_layers=2, decoder_layers=1, heads=2, ffn_hidden=16,
                predictor_hidden=16, joints=2, max_segments=2, segment_length=4)
    base.update(kw)
    return ModelConfig(**base)


def desk_model_config(**kw) -> ModelConfig:
    base = dict(embed_dim=32, encoder_layers=4, decoder_layers=1, heads=4, ffn_hidden=64,
                predictor_hidden=128, joints=10, max_segments=10)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture
def desk_data_cfg() -> DataConfig:
    return DataConfig(target_length=40)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
