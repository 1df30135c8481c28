"""End-to-end command runs on a tiny configuration."""

import json
import os
import subprocess

import numpy as np
import pytest

from app.app import compare_projection_scales, create_app, parse_sweep
from app.cli import main
from app.logger import ExperimentLogger
from core.error_handler import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_UNEXPECTED,
    ConfigError,
    DataFormatError,
    ErrorHandler,
    NumericError,
)
from utils import dataset_io, grid_io, manifest, model_io
from utils.data_io import load_data
from utils.search_log import read_csv

TINY = {
    "model": {"embed_dim": 8, "heads": 2, "blocks": 2, "tokens": 4, "classes": 4},
    "quant": {"weight_bits": 4},
    "data": {"synth_count": 64, "calib_size": 64, "batch_size": 16},
    "search": {"passes": 1, "population": 4, "cycles": 2, "samples": 2},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture
def models(config_file, tmp_path):
    """Paths of a full-precision and a quantized model built through the CLI."""
    out = tmp_path / "base"
    assert main(["init", "--config", config_file, "--output-dir", str(out)]) == EXIT_OK
    fp = str(out / "model.evqm")
    assert main(["quantize", "--config", config_file, "--output-dir", str(out), "--model", fp]) == EXIT_OK
    return fp, str(out / "quantized.evqm")


def run_search(config_file, models, out, *extra):
    fp, quant = models
    argv = ["search", "--config", config_file, "--output-dir", str(out), "--model", fp, "--quant-model", quant]
    return main(argv + list(extra))


def test_synth_writes_requested_count(config_file, tmp_path):
    path = tmp_path / "calib.evqd"
    assert main(["synth", "--config", config_file, "--output-dir", str(tmp_path), "--out", str(path), "--count", "20"]) == EXIT_OK
    data = dataset_io.load(str(path))
    assert (data.count, data.tokens, data.dim) == (20, 4, 8)
    assert (tmp_path / "manifest.json").exists()


def test_synth_splits_share_class_means(config_file, tmp_path):
    paths = {}
    for purpose in ("calib", "eval"):
        paths[purpose] = tmp_path / f"{purpose}.evqd"
        argv = ["synth", "--config", config_file, "--output-dir", str(tmp_path)]
        assert main(argv + ["--out", str(paths[purpose]), "--count", "64", "--purpose", purpose]) == EXIT_OK
    calib = dataset_io.load(str(paths["calib"]))
    held_out = dataset_io.load(str(paths["eval"]))
    assert not np.array_equal(calib.samples, held_out.samples)
    means = [calib.samples[calib.labels == c].mean(axis=0) for c in range(4)]
    distances = [((held_out.samples - m) ** 2).sum(axis=(1, 2)) for m in means]
    assert np.mean(np.argmin(distances, axis=0) == held_out.labels) > 0.9


def test_quantize_report(models):
    report = load_data(models[1].replace("quantized.evqm", "quantize_report.json"))
    assert report["weight_bits"] == 4
    assert 0.0 <= report["calib_agreement"] <= 1.0
    assert report["points"]["block.0.attn.softmax.0"]["scheme"] == "log2"


def test_search_artifacts(config_file, models, tmp_path):
    out = tmp_path / "search"
    assert run_search(config_file, models, out) == EXIT_OK
    trace = read_csv(str(out / "trace.csv"))
    assert len(trace) == 2 * 1 * (4 - 1 + 2)
    assert all(r.wall_ms == 0.0 for r in trace)
    summary = load_data(str(out / "search_summary.json"))
    assert summary["final_score"] <= summary["initial_score"]
    assert summary["evaluations"] == 1 + len(trace)
    assert "wall_seconds" not in summary
    manifest = load_data(str(out / "manifest.json"))
    assert set(manifest["outputs"]) >= {"searched.evqm", "trace.csv", "search_summary.json"}


def test_zero_passes_return_the_input_model(config_file, models, tmp_path):
    out = tmp_path / "p0"
    assert run_search(config_file, models, out, "--passes", "0") == EXIT_OK
    with open(models[1], "rb") as f:
        assert (out / "searched.evqm").read_bytes() == f.read()


def test_search_is_reproducible(config_file, models, tmp_path):
    for name in ("a", "b"):
        assert run_search(config_file, models, tmp_path / name, "--seed", "3") == EXIT_OK
    for artifact in ("searched.evqm", "trace.csv", "search_summary.json"):
        assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()


def test_sweep_runs_each_value(config_file, models, tmp_path):
    out = tmp_path / "sweep"
    assert run_search(config_file, models, out, "--sweep", "passes=0,1") == EXIT_OK
    report = load_data(str(out / "sweep.json"))
    assert [row["passes"] for row in report["rows"]] == [0, 1]
    assert (out / "sweep_passes_1" / "trace.csv").exists()


def test_landscape_center_matches_eval_loss(config_file, models, tmp_path):
    fp, quant = models
    common = ["--config", config_file, "--model", fp, "--quant-model", quant]
    assert main(["landscape", *common, "--output-dir", str(tmp_path / "ls"), "--steps", "5"]) == EXIT_OK
    assert main(["eval", *common, "--output-dir", str(tmp_path / "ev")]) == EXIT_OK
    grid = grid_io.read_csv(str(tmp_path / "ls" / "landscape.csv"))
    metrics = load_data(str(tmp_path / "ev" / "eval.json"))
    assert grid.values.shape == (5, 5)
    assert grid.center == pytest.approx(metrics["loss_infonce"], rel=1e-12)
    assert (tmp_path / "ls" / "landscape.pgm").read_bytes().startswith(b"P5\n5 5\n255\n")


def test_eval_compares_projection_scales(config_file, models, tmp_path):
    fp, quant = models
    out = tmp_path / "ev"
    argv = ["eval", "--config", config_file, "--output-dir", str(out), "--model", fp, "--quant-model", quant]
    assert main(argv + ["--compare-model", quant]) == EXIT_OK
    metrics = load_data(str(out / "eval.json"))
    assert set(metrics) >= {"agreement", "loss_infonce", "loss_mse", "loss_cosine", "loss_kl"}
    assert all(row["changed_codes"] == 0 for row in metrics["w_o_comparison"])


def test_compare_opt_equalizes_budgets(config_file, tmp_path):
    out = tmp_path / "cmp"
    argv = ["compare-opt", "--config", config_file, "--output-dir", str(out)]
    assert main(argv + ["--budget", "60", "--seeds", "2", "--dim", "3"]) == EXIT_OK
    report = load_data(str(out / "compare_opt.json"))
    assert len(report["rows"]) == 2
    for row in report["rows"]:
        assert row["es_evaluations"] == 60
        assert row["sgd_evaluations"] <= 60
        assert row["es"] <= row["start"]
        assert row["optimum"] <= row["es"] + 1e-12
    assert (out / "compare_opt.csv").read_text().startswith("seed,start,optimum,es,sgd,adam,adamw\n")


@pytest.mark.parametrize(
    "argv, code",
    [
        (["quantize", "--bits", "1"], EXIT_CONFIG),
        (["search", "--samples", "9"], EXIT_CONFIG),
        (["search", "--sweep", "bogus=1"], EXIT_CONFIG),
        (["eval", "--model", "missing.evqm"], EXIT_IO),
    ],
)
def test_failures_map_to_exit_codes(config_file, tmp_path, argv, code):
    assert main(argv + ["--config", config_file, "--output-dir", str(tmp_path)]) == code


def test_truncated_model_is_an_io_error(config_file, models, tmp_path):
    broken = tmp_path / "broken.evqm"
    with open(models[0], "rb") as f:
        broken.write_bytes(f.read()[:-3])
    argv = ["eval", "--config", config_file, "--output-dir", str(tmp_path), "--model", str(broken)]
    assert main(argv) == EXIT_IO


def test_unwritable_report_is_an_io_error(config_file, tmp_path):
    out = tmp_path / "q"
    (out / "quantize_report.json").mkdir(parents=True)
    assert main(["quantize", "--config", config_file, "--output-dir", str(out)]) == EXIT_IO
    assert not (out / "manifest.json").exists()


def test_passthrough_bits_reach_full_agreement(config_file, tmp_path):
    out = tmp_path / "fp32"
    assert main(["quantize", "--config", config_file, "--output-dir", str(out), "--bits", "32"]) == EXIT_OK
    report = load_data(str(out / "quantize_report.json"))
    assert report["activation_bits"] == 32
    assert report["calib_agreement"] == 1.0
    assert all(p["bitwidth"] == 32 for p in report["points"].values())


def test_parse_sweep():
    assert parse_sweep("passes=1..3") == ("passes", [1, 2, 3])
    assert parse_sweep("tau=0.05, 0.1") == ("tau", [0.05, 0.1])
    assert parse_sweep("loss=mse,kl") == ("loss", ["mse", "kl"])
    for bad in ("passes", "epsilon=1", "passes=3..1", "cycles=a"):
        with pytest.raises(ConfigError):
            parse_sweep(bad)


def test_projection_comparison_counts_changed_codes(tiny_run_config, quant_model):
    app = create_app(flags=tiny_run_config)
    other = quant_model.copy()
    block = other.blocks[1]
    block.set_point("attn.w_o", block.points["attn.w_o"].with_scale(block.points["attn.w_o"].scale * 2))
    rows = compare_projection_scales(quant_model, other)
    assert rows[0]["changed_codes"] == 0
    assert rows[1]["mean_relative_scale_change"] == pytest.approx(1.0)
    assert rows[1]["changed_codes"] > 0
    assert app.config.model.embed_dim == 8


def test_error_handler_exit_codes():
    assert ErrorHandler.get_exit_code(ConfigError("x")) == EXIT_CONFIG
    assert ErrorHandler.get_exit_code(DataFormatError("x", offset=3)) == EXIT_IO
    assert ErrorHandler.get_exit_code(FileNotFoundError("x")) == EXIT_IO
    assert ErrorHandler.get_exit_code(NumericError("x")) == EXIT_NUMERIC
    assert ErrorHandler.get_exit_code(RuntimeError("x")) == EXIT_UNEXPECTED
    result = ErrorHandler.handle_command_error(NumericError("nan score"), "search")
    assert result["message"] == "Numeric failure: nan score"
    assert not result["success"]
    assert "byte offset 3" in str(DataFormatError("bad", offset=3))


def test_event_format():
    line = ExperimentLogger.format_event("search", "done", "0123456789abcdef")
    assert line == "Event: search | Details: done | Run: 01234567"


def test_model_round_trip_through_cli(models):
    fp = model_io.load(models[0])
    quant = model_io.load(models[1])
    x = np.zeros((2, 4, 8), dtype=np.float32)
    assert fp.forward(x, quantized=False).shape == (2, 4)
    assert quant.config.weight_bits == 4


def test_revision_is_read_from_the_source_checkout(monkeypatch, tmp_path):
    calls = []

    def fake_run(argv, **kwargs):
        calls.append(kwargs["cwd"])
        return subprocess.CompletedProcess(argv, 0, stdout="abc1234\n", stderr="")

    monkeypatch.chdir(tmp_path)
    monkeypatch.setattr(manifest.subprocess, "run", fake_run)
    assert manifest.git_describe() == "abc1234"
    assert calls == [manifest.SOURCE_ROOT]
    assert os.path.isfile(os.path.join(manifest.SOURCE_ROOT, "utils", "manifest.py"))
