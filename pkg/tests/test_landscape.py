import numpy as np
import pytest

from core.error_handler import NumericError, ParameterError
from core.landscape import (
    EggCartonSurface,
    GridSpec,
    LandscapeGrid,
    count_local_maxima,
    count_local_minima,
    default_directions,
    egg_carton,
    roughness,
    scan_function,
    scan_landscape,
)
from core.losses import FitnessEvaluator
from core.vit import is_weight_point
from utils import grid_io
from utils.model_io import model_digest


def naive_extrema(values):
    n, m = values.shape
    count = 0
    for i in range(1, n - 1):
        for j in range(1, m - 1):
            around = [values[i + di, j + dj] for di in (-1, 0, 1) for dj in (-1, 0, 1) if di or dj]
            if all(values[i, j] < v for v in around) or all(values[i, j] > v for v in around):
                count += 1
    return count


class TestGridSpec:
    @pytest.mark.parametrize(
        "kwargs",
        [{"steps": 20}, {"steps": 1}, {"half_range": 0.0}, {"direction_b": 0}],
    )
    def test_rejects_invalid_specs(self, kwargs):
        values = dict(block_index=0, direction_a=0, direction_b=1, half_range=0.1)
        values.update(kwargs)
        with pytest.raises(ParameterError):
            GridSpec(**values)

    def test_offsets_are_symmetric_with_exact_center(self):
        offsets = GridSpec(0, 0, 1, half_range=0.3, steps=7).offsets()
        assert offsets[3] == 0.0
        assert offsets[0] == pytest.approx(-0.3)
        assert offsets[-1] == pytest.approx(0.3)

    def test_unit_vectors(self):
        spec = GridSpec(0, 2, np.array([3.0, 4.0, 0.0]), half_range=0.1)
        np.testing.assert_array_equal(spec.unit_vector(2, 3), [0.0, 0.0, 1.0])
        np.testing.assert_allclose(spec.unit_vector(spec.direction_b, 3), [0.6, 0.8, 0.0])
        with pytest.raises(ParameterError):
            spec.unit_vector(5, 3)


class TestRoughness:
    def test_plane_and_constant_are_smooth(self):
        i, j = np.meshgrid(np.arange(21), np.arange(21), indexing="ij")
        assert roughness(0.3 * i - 1.7 * j) == 0.0
        assert roughness(np.full((21, 21), 2.5)) == 0.0

    def test_matches_brute_force_count(self, rng):
        values = rng.standard_normal((15, 15))
        assert roughness(values) == naive_extrema(values) / 13**2

    def test_product_of_sines(self):
        x = np.linspace(-1, 1, 21)
        values = np.outer(np.sin(3 * np.pi * x), np.sin(3 * np.pi * x))
        assert roughness(values) == naive_extrema(values) / 19**2
        assert roughness(values) > 0

    def test_egg_carton_extrema_layout(self):
        x = np.linspace(0.0, 1.0, 201)
        ripple = np.sin(20 * x) ** 2
        values = ripple[:, None] + ripple[None, :]
        assert count_local_minima(values) == 36
        assert count_local_maxima(values) == 36

    def test_grid_rejects_non_finite(self):
        with pytest.raises(NumericError):
            LandscapeGrid(values=np.full((3, 3), np.inf), offsets=np.zeros(3))


class TestScanLandscape:
    def test_center_equals_unperturbed_loss_and_model_is_restored(self, quant_model, fp_model, tiny_batches):
        evaluator = FitnessEvaluator(quant_model, fp_model, tiny_batches)
        baseline = evaluator.score()
        digest = model_digest(quant_model)
        grid = scan_landscape(evaluator, GridSpec(0, 0, 1, half_range=1e-3, steps=5))
        assert grid.values.shape == (5, 5)
        assert grid.center == baseline
        assert model_digest(quant_model) == digest

    def test_vanishing_range_gives_flat_grid(self, quant_model, fp_model, tiny_batches):
        evaluator = FitnessEvaluator(quant_model, fp_model, tiny_batches)
        grid = scan_landscape(evaluator, GridSpec(1, 2, 3, half_range=1e-12, steps=3))
        np.testing.assert_array_equal(grid.values, np.full((3, 3), grid.center))
        assert roughness(grid) == 0.0

    def test_scan_function_on_analytic_surface(self):
        center = np.array([1.0, 2.0])
        grid = scan_function(lambda v: float(v[0] + 2 * v[1]), center, GridSpec(0, 0, 1, half_range=0.5, steps=3))
        np.testing.assert_allclose(grid.values, [[3.5, 4.5, 5.5], [4.0, 5.0, 6.0], [4.5, 5.5, 6.5]])

    def test_default_directions_pick_weight_coordinates(self, quant_model):
        a, b = default_directions(quant_model, 0)
        scales = quant_model.get_block_scales(0)
        assert a != b
        assert is_weight_point(scales.locate(a)[0])
        assert is_weight_point(scales.locate(b)[0])

    def test_grid_files(self, tmp_path):
        values = np.arange(9, dtype=np.float64).reshape(3, 3)
        grid = LandscapeGrid(values=values, offsets=np.array([-1.0, 0.0, 1.0]), metadata={"block": 1})
        path = tmp_path / "grid.csv"
        grid_io.write_csv(str(path), grid)
        restored = grid_io.read_csv(str(path))
        np.testing.assert_array_equal(restored.values, values)
        assert restored.metadata == {"block": 1}
        image = grid_io.to_pgm(values)
        assert image.startswith(b"P5\n3 3\n255\n")
        assert image[-1] == 255 and image[len(b"P5\n3 3\n255\n")] == 0
        assert set(grid_io.to_pgm(np.ones((2, 2)))[-4:]) == {0}


class TestEggCarton:
    def test_zero_amplitude_minimum_is_center(self):
        surface = EggCartonSurface(dim=3, frequency=40, amplitude=0.0, seed=4)
        x, value = surface.global_minimum()
        np.testing.assert_array_equal(x, surface.center)
        assert value == 0.0

    def test_pure_ripple_minima_sit_on_multiples_of_period(self):
        surface = EggCartonSurface(dim=2, frequency=20, quadratic_weight=0.0, seed=1)
        x, value = surface.global_minimum()
        np.testing.assert_allclose(np.round(x * 20 / np.pi), x * 20 / np.pi, atol=1e-9)
        assert value == pytest.approx(0.0, abs=1e-20)

    def test_one_dimensional_minimum_matches_brute_force(self):
        surface = egg_carton(dim=1, frequency=20, seed=2)
        x, value = surface.global_minimum()
        xs = np.linspace(-3.0, 5.0, 800_001)
        brute = surface.quadratic_weight * (xs - surface.center[0]) ** 2 + np.sin(20 * xs) ** 2
        assert value == pytest.approx(brute.min(), abs=1e-7)
        assert abs(x[0] - xs[np.argmin(brute)]) < 1e-3

    def test_center_is_seeded(self):
        a = egg_carton(5, 40, seed=9)
        b = egg_carton(5, 40, seed=9)
        np.testing.assert_array_equal(a.center, b.center)
        assert np.all((a.center >= 0.5) & (a.center <= 1.5))
        with pytest.raises(ParameterError):
            egg_carton(0, 40)
