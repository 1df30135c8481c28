import numpy as np
import pytest

from core.error_handler import DimensionError, ParameterError, QuantParamError
from core.models import (
    BlockScales,
    Candidate,
    QuantParams,
    ScaleSegment,
    SearchSettings,
    ViTConfig,
    default_epsilon,
)


def test_block_scale_count_closed_form():
    assert ViTConfig().block_scale_count() == 315
    assert ViTConfig(embed_dim=8, heads=2, tokens=4, classes=4).block_scale_count() == 87


@pytest.mark.parametrize(
    "kwargs", [{"embed_dim": 30, "heads": 4}, {"blocks": 0}, {"tokens": -1}, {"weight_bits": 1}]
)
def test_vit_config_rejects_bad_shapes(kwargs):
    with pytest.raises(ParameterError):
        ViTConfig(**kwargs)


def test_vit_config_dict_round_trip():
    config = ViTConfig(embed_dim=16, heads=2)
    assert ViTConfig.from_dict(config.to_dict()) == config


@pytest.fixture
def scales():
    segments = (ScaleSegment("attn.w_o", 0, 3), ScaleSegment("attn.proj", 3, 1), ScaleSegment("mlp.fc2", 4, 1))
    return BlockScales(values=np.array([0.1, 0.2, 0.3, 1.0, 2.0]), segments=segments)


def test_block_scales_index_map(scales):
    assert len(scales) == 5
    assert scales.locate(2) == ("attn.w_o", 2)
    assert scales.locate(4) == ("mlp.fc2", 0)
    assert scales.point_slice("attn.proj") == slice(3, 4)
    np.testing.assert_array_equal(scales.mask("attn."), [True, True, True, True, False])
    with pytest.raises(DimensionError):
        scales.locate(5)


def test_block_scales_with_values_copies_and_validates(scales):
    values = np.full(5, 0.5, dtype=np.float32)
    updated = scales.with_values(values)
    values[0] = 9.0
    assert updated.values[0] == np.float32(0.5)
    assert scales.values[0] == np.float32(0.1)
    with pytest.raises(DimensionError):
        scales.with_values(np.ones(4))
    with pytest.raises(QuantParamError):
        scales.with_values(np.array([1.0, 1.0, 0.0, 1.0, 1.0]))


def test_block_scales_to_points(scales):
    points = scales.to_points()
    assert list(points) == ["attn.w_o", "attn.proj", "mlp.fc2"]
    np.testing.assert_array_equal(points["mlp.fc2"], [2.0])


def test_default_epsilon_by_bitwidth():
    assert default_epsilon(8) == 1e-3
    assert default_epsilon(4) == 1e-4
    assert default_epsilon(3) == 1e-4


def test_search_settings_validation():
    settings = SearchSettings()
    assert (settings.passes, settings.population, settings.cycles, settings.samples) == (10, 15, 3, 10)
    assert settings.evaluations_per_visit() == 17
    with pytest.raises(ParameterError):
        SearchSettings(samples=16)
    with pytest.raises(ParameterError):
        SearchSettings(epsilon=0.0)
    with pytest.raises(ParameterError):
        SearchSettings(passes=-1)


def test_candidate_rejects_non_finite_fitness():
    with pytest.raises(ParameterError):
        Candidate(scales=np.ones(2), fitness=float("nan"), birth_cycle=0, candidate_id=0)


def test_quant_params_dict_round_trip():
    params = QuantParams(scale=np.array([0.5, 0.25]), bitwidth=4, granularity="per_channel", axis=1)
    restored = QuantParams.from_dict(params.to_dict())
    np.testing.assert_array_equal(restored.scale, params.scale)
    assert (restored.bitwidth, restored.axis, restored.scheme) == (4, 1, "uniform")
    assert params.max_code == 7
    assert QuantParams(scale=np.ones(1), bitwidth=4, scheme="log2").max_code == 15
