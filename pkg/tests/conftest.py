"""Shared fixtures: a tiny model configuration and seeded datasets."""

import numpy as np
import pytest

from core.models import ViTConfig
from core.vit import init_model, quantize_model
from utils.dataset_generator import synth_dataset
from utils.dataset_io import BatchPlan, calibration_batches


@pytest.fixture
def tiny_config():
    return ViTConfig(
        embed_dim=8, heads=2, blocks=2, tokens=4, classes=4, weight_bits=4, activation_bits=8
    )


@pytest.fixture
def tiny_dataset(tiny_config):
    return synth_dataset(64, tiny_config.tokens, tiny_config.embed_dim, tiny_config.classes, seed=3)


@pytest.fixture
def tiny_batches(tiny_dataset):
    return [b.samples for b in calibration_batches(tiny_dataset, BatchPlan(16))]


@pytest.fixture
def fp_model(tiny_config):
    return init_model(tiny_config, seed=11)


@pytest.fixture
def quant_model(fp_model, tiny_batches):
    return quantize_model(fp_model, tiny_batches, weight_bits=4, activation_bits=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_run_config(tmp_path):
    """Flags for a fast end-to-end command run."""
    return {
        "model.embed_dim": 8,
        "model.heads": 2,
        "model.blocks": 2,
        "model.tokens": 4,
        "model.classes": 4,
        "quant.weight_bits": 4,
        "data.synth_count": 64,
        "data.calib_size": 64,
        "data.batch_size": 16,
        "search.passes": 1,
        "search.population": 4,
        "search.cycles": 2,
        "search.samples": 2,
        "output_dir": str(tmp_path / "out"),
    }
