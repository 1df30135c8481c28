import numpy as np
import pytest

from core.error_handler import CalibrationError, DimensionError, DomainError, QuantParamError
from core.models import QuantParams
from core.quantizer import (
    bias_correct,
    dequantize,
    fake_quant,
    fake_quant_stacked,
    init_scale_log2,
    init_scale_minmax,
    init_scale_omse,
    init_scale_percentile,
    quantize,
    quantize_log2,
    quantize_uniform,
)


def uniform(scale, bits=4, **kwargs):
    return QuantParams(scale=np.asarray(scale, dtype=np.float32), bitwidth=bits, **kwargs)


def test_uniform_error_within_half_step(rng):
    params = uniform([0.1], bits=8)
    x = rng.uniform(-12.7, 12.7, size=1000).astype(np.float32)
    err = np.abs(fake_quant(x, params) - x)
    assert err.max() <= 0.05 + 1e-6


def test_uniform_clips_to_max_code():
    q = quantize_uniform(np.array([100.0, -100.0], dtype=np.float32), uniform([1.0], bits=4))
    np.testing.assert_array_equal(q.codes, [7, -7])


def test_uniform_rounds_half_to_even():
    q = quantize_uniform(np.array([0.5, 1.5, 2.5, -0.5], dtype=np.float32), uniform([1.0]))
    np.testing.assert_array_equal(q.codes, [0, 2, 2, 0])


def test_uniform_is_monotone(rng):
    x = np.sort(rng.standard_normal(500).astype(np.float32))
    y = fake_quant(x, uniform([0.3], bits=3))
    assert np.all(np.diff(y) >= 0)


def test_per_channel_scales_apply_along_axis():
    w = np.array([[1.0, 10.0], [-2.0, 20.0]], dtype=np.float32)
    params = uniform([0.5, 5.0], granularity="per_channel", axis=1)
    q = quantize_uniform(w, params)
    np.testing.assert_array_equal(q.codes, [[2, 2], [-4, 4]])
    np.testing.assert_array_equal(dequantize(q), w)
    with pytest.raises(DimensionError):
        quantize_uniform(np.ones((2, 3), dtype=np.float32), params)


def test_log2_codes():
    params = QuantParams(scale=np.array([1.0]), bitwidth=4, scheme="log2")
    q = quantize_log2(np.array([1.0, 0.25, 0.0, 0.5], dtype=np.float32), params)
    np.testing.assert_array_equal(q.codes, [0, 2, 15, 1])
    np.testing.assert_allclose(dequantize(q)[:2], [1.0, 0.25])


def test_log2_rejects_negative_input():
    params = QuantParams(scale=np.array([1.0]), bitwidth=4, scheme="log2")
    with pytest.raises(DomainError):
        quantize(np.array([-0.1], dtype=np.float32), params)
    with pytest.raises(DomainError):
        init_scale_log2(np.array([-1.0, 2.0]), 8)


def test_passthrough_is_identity(rng):
    x = rng.standard_normal(50).astype(np.float32)
    np.testing.assert_array_equal(fake_quant(x, uniform([0.01], bits=32)), x)
    np.testing.assert_array_equal(fake_quant(x, None), x)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"scale": [0.0], "bitwidth": 4},
        {"scale": [-1.0], "bitwidth": 4},
        {"scale": [np.nan], "bitwidth": 4},
        {"scale": [1.0], "bitwidth": 1},
        {"scale": [1.0, 2.0], "bitwidth": 4},
        {"scale": [1.0], "bitwidth": 4, "granularity": "per_channel"},
        {"scale": [1.0], "bitwidth": 4, "scheme": "cubic"},
    ],
)
def test_invalid_params_are_rejected(kwargs):
    kwargs = dict(kwargs, scale=np.asarray(kwargs["scale"], dtype=np.float32))
    with pytest.raises(QuantParamError):
        QuantParams(**kwargs)


def test_minmax_scale_and_zero_tensor():
    x = np.array([-3.5, 1.0, 7.0], dtype=np.float32)
    assert init_scale_minmax(x, 4).scale[0] == pytest.approx(1.0)
    assert init_scale_minmax(np.zeros(4), 8).scale[0] == 1.0
    with pytest.raises(CalibrationError):
        init_scale_minmax(np.zeros(0), 8)


def test_minmax_per_channel():
    w = np.array([[1.0, -14.0], [-7.0, 0.0]], dtype=np.float32)
    params = init_scale_minmax(w, 4, granularity="per_channel", axis=1)
    np.testing.assert_allclose(params.scale, [1.0, 2.0])


def test_percentile_100_matches_minmax(rng):
    x = rng.standard_normal(257).astype(np.float32)
    assert init_scale_percentile(x, 8, pct=100).scale[0] == init_scale_minmax(x, 8).scale[0]
    assert init_scale_percentile(x, 8, pct=99.0).scale[0] < init_scale_minmax(x, 8).scale[0]
    with pytest.raises(QuantParamError):
        init_scale_percentile(x, 8, pct=0)


def test_omse_never_worse_than_minmax(rng):
    x = rng.standard_t(3, size=2000).astype(np.float32)
    mm = init_scale_minmax(x, 4)
    om = init_scale_omse(x, 4)

    def err(p):
        return float(np.mean((fake_quant(x, p).astype(np.float64) - x) ** 2))

    assert err(om) <= err(mm)


def test_omse_close_to_fine_grid_optimum(rng):
    x = rng.standard_normal(1000).astype(np.float32)
    mm = float(init_scale_minmax(x, 4).scale[0])
    om = init_scale_omse(x, 4)

    def err(scale):
        return float(np.mean((fake_quant(x, uniform([scale])).astype(np.float64) - x) ** 2))

    finest = min(err(s) for s in np.linspace(0.2, 1.2, 2001) * mm)
    assert err(float(om.scale[0])) <= 1.01 * finest


def test_omse_keeps_exactly_representable_minmax_scale():
    x = np.array([-7, -3, 0, 1, 7], dtype=np.float32) * 0.5
    assert init_scale_omse(x, 4).scale[0] == pytest.approx(0.5)


def test_log2_init_uses_peak():
    assert init_scale_log2(np.array([0.0, 0.3, 0.9]), 8).scale[0] == pytest.approx(0.9)
    assert init_scale_log2(np.zeros(3), 8).scale[0] == 1.0


def test_bias_correct_formula(rng):
    w = rng.standard_normal((3, 2)).astype(np.float32)
    w_hat = fake_quant(w, uniform([0.5]))
    b = np.array([0.1, -0.2], dtype=np.float32)
    x = rng.standard_normal((10, 4, 3)).astype(np.float32)
    expected = b + x.reshape(-1, 3).mean(axis=0) @ (w - w_hat)
    np.testing.assert_allclose(bias_correct(w, w_hat, b, x), expected, atol=1e-6)


def test_bias_correct_leaves_unquantized_layer_alone(rng):
    w = rng.standard_normal((3, 2)).astype(np.float32)
    b = np.array([0.1, -0.2], dtype=np.float32)
    x = rng.standard_normal((5, 3)).astype(np.float32)
    np.testing.assert_allclose(bias_correct(w, w, b, x), b)
    with pytest.raises(CalibrationError):
        bias_correct(w, w, b, np.zeros((0, 3)))


@pytest.mark.parametrize("bits", [3, 4, 8])
@pytest.mark.parametrize("granularity", ["per_tensor", "per_channel"])
def test_uniform_round_trip_clip_and_monotone_bounds(rng, bits, granularity):
    qmax = 2 ** (bits - 1) - 1
    if granularity == "per_tensor":
        params = uniform([0.37], bits=bits)
        scale = np.full((1, 10), 0.37, dtype=np.float32)
    else:
        scale = rng.uniform(0.05, 2.0, size=10).astype(np.float32)
        params = uniform(scale, bits=bits, granularity="per_channel", axis=1)
        scale = scale.reshape(1, 10)
    limit = qmax * scale
    x = (rng.uniform(-1.5, 1.5, size=(1000, 10)) * limit).astype(np.float32)
    y = fake_quant(x, params)

    inside = np.abs(x) <= limit
    err = np.abs(y - x)
    bound = np.broadcast_to(scale / 2 + scale * 1e-4, x.shape)
    assert np.all(err[inside] <= bound[inside])
    clip = np.float32(qmax) * scale
    assert np.all(np.abs(y) <= clip)
    np.testing.assert_array_equal(np.abs(y[~inside]), np.broadcast_to(clip, y.shape)[~inside])
    order = np.argsort(x, axis=0)
    assert np.all(np.diff(np.take_along_axis(y, order, axis=0), axis=0) >= 0)


def test_percentile_ignores_a_single_outlier():
    x = np.linspace(-1.0, 1.0, 1000).astype(np.float32)
    x[17] = 100.0
    params = init_scale_percentile(x, 4, pct=99)
    assert params.scale[0] == pytest.approx(1.0 / 7, rel=0.02)
    assert fake_quant(np.array([100.0], dtype=np.float32), params)[0] == np.float32(7) * params.scale[0]


def test_constant_tensor_gets_the_same_scale_for_any_percentile():
    x = np.full(64, -2.5, dtype=np.float32)
    scales = {float(init_scale_percentile(x, 8, pct=p).scale[0]) for p in (1, 50, 99.9, 100)}
    assert scales == {float(init_scale_minmax(x, 8).scale[0])}
    assert init_scale_minmax(np.array([-2.0, 1.0]), 4).scale[0] == pytest.approx(2 / 7)


def test_stacked_fake_quant_matches_slice_by_slice(rng):
    x = np.abs(rng.standard_normal((3, 4, 5, 5))).astype(np.float32)
    params = [
        QuantParams(scale=np.array([s]), bitwidth=8, scheme=scheme)
        for s, scheme in zip((0.5, 1.0, 2.0, 3.0), ("log2",) * 4)
    ]
    out = fake_quant_stacked(x, params, axis=1)
    for h, p in enumerate(params):
        np.testing.assert_array_equal(out[:, h], fake_quant(x[:, h], p))

    mixed = [uniform([0.1], bits=8), uniform([0.2], bits=32), uniform([0.3], bits=8), uniform([0.4], bits=8)]
    out = fake_quant_stacked(x, mixed, axis=1)
    for h, p in enumerate(mixed):
        np.testing.assert_array_equal(out[:, h], fake_quant(x[:, h], p))
    with pytest.raises(DimensionError):
        fake_quant_stacked(x, mixed[:3], axis=1)
