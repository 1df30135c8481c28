"""
Application module.

``EvolQApp`` implements every command of the toolkit on top of a resolved
RunConfig: dataset synthesis, model initialization, quantization, the
block-wise search (and its sweeps), landscape scanning, the optimizer
comparison and evaluation. Each command writes its artifacts and a
manifest under the output directory and returns a result dictionary.
"""

import hashlib
import json
import logging
import os
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from app.config import RunConfig, load_config
from app.logger import ExperimentLogger
from core.error_handler import ConfigError, ParameterError
from core.gradient_baseline import OPTIMIZERS, optimize
from core.landscape import GridSpec, default_directions, egg_carton, roughness, scan_landscape
from core.losses import LOSS_FUNCTIONS, FitnessEvaluator, batch_loss
from core.models import SearchSettings
from core.objectives import CountingObjective
from core.quantizer import quantize_uniform
from core.search_engine import EvolutionarySearch, evolve_vector
from core.vit import TinyViT, agreement, init_model, quantize_model
from utils import dataset_io, grid_io, model_io
from utils.data_io import save_data
from utils.dataset_generator import synth_dataset
from utils.manifest import write_manifest
from utils.search_log import SearchLog
from utils.seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

# Sweep keys and the configuration entries they set.
SWEEP_KEYS = {
    "passes": "search.passes",
    "cycles": "search.cycles",
    "calib_size": "data.calib_size",
    "seed": "seed",
    "loss": "loss.kind",
    "tau": "loss.tau",
}


def run_id(config: RunConfig) -> str:
    text = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:8]


def parse_sweep(spec: str) -> Tuple[str, List[Any]]:
    """
    Parse ``KEY=v1,v2,...`` or ``KEY=a..b`` (inclusive integer range).

    Raises:
        ConfigError: On an unknown key or a malformed value list.
    """
    key, sep, raw = spec.partition("=")
    key = key.strip()
    if not sep or key not in SWEEP_KEYS:
        raise ConfigError(f"sweep must look like KEY=v1,v2 with KEY in {sorted(SWEEP_KEYS)}")
    raw = raw.strip()
    try:
        if ".." in raw:
            low, high = (int(v) for v in raw.split("..", 1))
            if high < low:
                raise ValueError(f"empty range {raw}")
            return key, list(range(low, high + 1))
        values = [v.strip() for v in raw.split(",") if v.strip()]
        if not values:
            raise ValueError("no values")
        if key == "loss":
            return key, values
        if key == "tau":
            return key, [float(v) for v in values]
        return key, [int(v) for v in values]
    except ValueError as e:
        raise ConfigError(f"invalid sweep values '{raw}': {e}") from e


class EvolQApp:
    """Runs toolkit commands against one configuration."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.run_id = run_id(config)
        os.makedirs(config.output_dir, exist_ok=True)

    # -- helpers -----------------------------------------------------------

    def _out(self, name: str) -> str:
        return os.path.join(self.config.output_dir, name)

    def _finish(
        self,
        command: str,
        message: str,
        inputs: List[str],
        outputs: List[str],
        extra: Optional[Dict[str, Any]] = None,
    ) -> Dict[str, Any]:
        manifest = write_manifest(
            command, self.config.to_dict(), inputs, outputs, self.config.output_dir
        )
        ExperimentLogger.log_event(command, message, self.run_id)
        result = {
            "success": True,
            "message": message,
            "exit_code": 0,
            "outputs": outputs + [manifest],
        }
        result.update(extra or {})
        return result

    def _dataset(self, path: Optional[str], purpose: str, size: Optional[int]) -> dataset_io.DatasetFile:
        cfg = self.config
        if path:
            dataset = dataset_io.load(path)
        else:
            count = size or cfg.data.synth_count
            dataset = synth_dataset(
                count,
                cfg.model.tokens,
                cfg.model.embed_dim,
                cfg.model.classes,
                derive_seed(cfg.seed, "data"),
                cfg.data.class_separation,
                split=purpose,
            )
        if size is not None and size < dataset.count:
            dataset = dataset.subset(size)
        return dataset

    def _batches(self, dataset: dataset_io.DatasetFile) -> List[dataset_io.Batch]:
        plan = dataset_io.BatchPlan(self.config.data.batch_size, self.config.data.shuffle_seed)
        return dataset_io.calibration_batches(dataset, plan)

    def calibration_batches(self) -> List[dataset_io.Batch]:
        data = self.config.data
        return self._batches(self._dataset(data.calib_path, "calib", data.calib_size))

    def evaluation_batches(self) -> List[dataset_io.Batch]:
        data = self.config.data
        return self._batches(self._dataset(data.eval_path, "eval", data.eval_size))

    def fp_model(self) -> TinyViT:
        path = self.config.data.model_path
        if path:
            return model_io.load(path)
        return init_model(self.config.vit_config(), self.config.seed)

    def quantized_model(self, fp: TinyViT, calib: List[dataset_io.Batch]) -> TinyViT:
        path = self.config.data.quant_model_path
        if path:
            return model_io.load(path)
        q = self.config.quant
        return quantize_model(
            fp,
            [b.samples for b in calib],
            q.weight_bits,
            q.activation_bits,
            q.weight_init,
            q.percentile,
            q.bias_correction,
        )

    def evaluator(self, quant: TinyViT, fp: TinyViT, batches: List[dataset_io.Batch]) -> FitnessEvaluator:
        loss = self.config.loss
        labels = None
        if loss.label_aware_negatives:
            if any(b.labels is None for b in batches):
                raise ConfigError("label-aware negatives need a labeled dataset")
            labels = [b.labels for b in batches]
        return FitnessEvaluator(
            quant,
            fp,
            [b.samples for b in batches],
            loss_kind=loss.kind,
            tau=loss.tau,
            labels=labels,
            threads=self.config.threads,
        )

    # -- commands ----------------------------------------------------------

    def synth(self, output: str, count: Optional[int] = None, purpose: str = "calib") -> Dict[str, Any]:
        """Write a synthetic EVQD dataset."""
        cfg = self.config
        dataset = synth_dataset(
            count or cfg.data.synth_count,
            cfg.model.tokens,
            cfg.model.embed_dim,
            cfg.model.classes,
            derive_seed(cfg.seed, "data"),
            cfg.data.class_separation,
            split=purpose,
        )
        dataset_io.save(output, dataset)
        return self._finish("synth", f"{dataset.count} samples written to {output}", [], [output])

    def init(self, output: Optional[str] = None) -> Dict[str, Any]:
        """Write a freshly initialized full-precision model."""
        output = output or self._out("model.evqm")
        model = init_model(self.config.vit_config(), self.config.seed)
        digest = model_io.save(output, model)
        return self._finish("init", f"Model written to {output}", [], [output], {"digest": digest})

    def quantize(self) -> Dict[str, Any]:
        """Quantize the FP model and report per-point scale statistics and agreement."""
        cfg = self.config
        fp = self.fp_model()
        calib = self.calibration_batches()
        quant = quantize_model(
            fp,
            [b.samples for b in calib],
            cfg.quant.weight_bits,
            cfg.quant.activation_bits,
            cfg.quant.weight_init,
            cfg.quant.percentile,
            cfg.quant.bias_correction,
        )
        model_path = self._out("quantized.evqm")
        model_io.save(model_path, quant)

        points = {}
        for i, name, params in quant.all_points():
            points[f"block.{i}.{name}"] = {
                "bitwidth": params.bitwidth,
                "scheme": params.scheme,
                "count": int(params.scale.size),
                "min": float(params.scale.min()),
                "max": float(params.scale.max()),
                "mean": float(np.mean(params.scale, dtype=np.float64)),
            }
        agree = agreement(quant, fp, [b.samples for b in calib])
        report = {
            "weight_bits": cfg.quant.weight_bits,
            "activation_bits": cfg.quant.activation_bits,
            "weight_init": cfg.quant.weight_init,
            "bias_correction": cfg.quant.bias_correction,
            "calib_agreement": agree,
            "points": points,
        }
        report_path = self._out("quantize_report.json")
        save_data(report, report_path)
        return self._finish(
            "quantize",
            f"W{cfg.quant.weight_bits}A{cfg.quant.activation_bits} calibration agreement {agree:.4f}",
            [cfg.data.model_path, cfg.data.calib_path],
            [model_path, report_path],
            {"agreement": agree},
        )

    def search(self) -> Dict[str, Any]:
        """Run the block-wise search once; write model, trace and summary."""
        cfg = self.config
        fp = self.fp_model()
        calib = self.calibration_batches()
        quant = self.quantized_model(fp, calib)
        eval_batches = [b.samples for b in self.evaluation_batches()]
        agreement_before = agreement(quant, fp, eval_batches)

        settings = cfg.search_settings()
        log = SearchLog(timing=cfg.trace_timing)
        ExperimentLogger.log_event(
            "search_started",
            f"P={settings.passes} K={settings.population} C={settings.cycles} "
            f"S={settings.samples} eps={settings.epsilon:g} loss={cfg.loss.kind}",
            self.run_id,
        )
        engine = EvolutionarySearch(self.evaluator(quant, fp, calib), settings, log)
        summary = engine.run()
        agreement_after = agreement(quant, fp, eval_batches)

        model_path = self._out("searched.evqm")
        model_io.save(model_path, quant)
        trace_path = self._out("trace.csv")
        log.write_csv(trace_path)
        report = summary.to_dict()
        if not cfg.trace_timing:
            report.pop("wall_seconds")
        report.update(
            {
                "eval_agreement_before": agreement_before,
                "eval_agreement_after": agreement_after,
                "trace_rows": len(log),
                "statistics": log.get_statistics(),
            }
        )
        summary_path = self._out("search_summary.json")
        save_data(report, summary_path)
        logger.info(f"Search took {summary.wall_seconds:.2f}s for {summary.evaluations} evaluations")
        return self._finish(
            "search",
            f"calibration loss {summary.initial_score:.6g} -> {summary.final_score:.6g}, "
            f"eval agreement {agreement_before:.4f} -> {agreement_after:.4f}",
            [cfg.data.model_path, cfg.data.quant_model_path, cfg.data.calib_path, cfg.data.eval_path],
            [model_path, trace_path, summary_path],
            {"summary": report},
        )

    def sweep(self, spec: str) -> Dict[str, Any]:
        """Rerun ``search`` for every value of one setting, each in its own subdirectory."""
        key, values = parse_sweep(spec)
        base = self.config.to_dict()
        rows = []
        for value in values:
            data = json.loads(json.dumps(base))
            node = data
            parts = SWEEP_KEYS[key].split(".")
            for part in parts[:-1]:
                node = node[part]
            node[parts[-1]] = value
            data["output_dir"] = os.path.join(self.config.output_dir, f"sweep_{key}_{value}")
            try:
                config = RunConfig.model_validate(data)
            except ValueError as e:
                raise ConfigError(f"sweep value {key}={value} is invalid: {e}") from e
            result = EvolQApp(config).search()
            summary = result["summary"]
            rows.append(
                {
                    key: value,
                    "initial_score": summary["initial_score"],
                    "final_score": summary["final_score"],
                    "evaluations": summary["evaluations"],
                    "eval_agreement_before": summary["eval_agreement_before"],
                    "eval_agreement_after": summary["eval_agreement_after"],
                }
            )
        improved = sum(1 for r in rows if r["eval_agreement_after"] > r["eval_agreement_before"])
        report = {"key": key, "rows": rows, "improved_runs": improved, "runs": len(rows)}
        path = self._out("sweep.json")
        save_data(report, path)
        return self._finish(
            "sweep",
            f"{len(rows)} runs over {key}, {improved} improved held-out agreement",
            [],
            [path],
            {"sweep": report},
        )

    def landscape(self) -> Dict[str, Any]:
        """Scan the loss landscape of one block on the evaluation set."""
        cfg = self.config
        fp = self.fp_model()
        calib = self.calibration_batches()
        quant = self.quantized_model(fp, calib)
        ls = cfg.landscape
        if ls.block >= len(quant.blocks):
            raise ParameterError(f"block {ls.block} out of range for {len(quant.blocks)} blocks")
        default_a, default_b = default_directions(quant, ls.block)
        spec = GridSpec(
            block_index=ls.block,
            direction_a=ls.direction_a if ls.direction_a is not None else default_a,
            direction_b=ls.direction_b if ls.direction_b is not None else default_b,
            half_range=ls.half_range if ls.half_range is not None else 10 * cfg.epsilon(),
            steps=ls.steps,
            loss_kind=cfg.loss.kind,
        )
        evaluator = self.evaluator(quant, fp, self.evaluation_batches())
        grid = scan_landscape(evaluator, spec)
        grid.metadata.update({"seed": cfg.seed, "model_sha256": model_io.model_digest(quant)})

        csv_path = self._out("landscape.csv")
        grid_io.write_csv(csv_path, grid)
        outputs = [csv_path]
        if ls.heatmap:
            pgm_path = self._out("landscape.pgm")
            grid_io.write_pgm(pgm_path, grid)
            outputs.append(pgm_path)
        rough = roughness(grid)
        return self._finish(
            "landscape",
            f"{spec.steps}x{spec.steps} grid on block {spec.block_index}, roughness {rough:.4f}",
            [cfg.data.model_path, cfg.data.quant_model_path, cfg.data.eval_path],
            outputs,
            {"roughness": rough, "center": grid.center},
        )

    def compare_opt(self) -> Dict[str, Any]:
        """
        Paired ES vs SGD/Adam/AdamW runs on egg-carton surfaces.

        Every method gets the same number of objective evaluations: ES spends
        one on the start point, K-1 on the initial population and the rest on
        cycles; a gradient run spends one on the start point and, per step, two
        per coordinate plus one for the new loss.
        """
        cmp = self.config.compare
        if cmp.budget < cmp.population:
            raise ConfigError(f"budget {cmp.budget} is smaller than the population {cmp.population}")
        steps = max(1, (cmp.budget - 1) // (2 * cmp.dim + 1))
        rows = []
        for index in range(cmp.seeds):
            seed = self.config.seed + index
            surface = egg_carton(cmp.dim, cmp.frequency, cmp.amplitude, cmp.quadratic_weight, seed)
            rng = make_rng(derive_seed(seed, "start"))
            start = np.maximum(surface.center + rng.uniform(-cmp.start_noise, cmp.start_noise, cmp.dim), 1e-8)

            es_objective = CountingObjective(surface)
            settings = SearchSettings(
                passes=1,
                population=cmp.population,
                cycles=cmp.budget - cmp.population,
                samples=min(cmp.samples, cmp.population),
                epsilon=cmp.epsilon,
                seed=seed,
            )
            es = evolve_vector(start, es_objective, settings, make_rng(seed))
            row = {
                "seed": seed,
                "es": -es.best.fitness,
                "es_evaluations": es_objective.evaluations,
                "optimum": surface.global_minimum()[1],
                "start": surface(start),
            }
            for name in OPTIMIZERS:
                objective = CountingObjective(surface)
                result = optimize(objective, start, name, steps=steps, lr=cmp.lr)
                row[name] = result.final_loss
                row[f"{name}_evaluations"] = result.evaluations
            rows.append(row)
            logger.debug(f"compare-opt seed {seed}: {row}")

        wins = {name: sum(1 for r in rows if r["es"] < r[name]) for name in OPTIMIZERS}
        report = {"rows": rows, "es_wins": wins, "steps": steps, "budget": cmp.budget}
        json_path = self._out("compare_opt.json")
        save_data(report, json_path)
        csv_path = self._out("compare_opt.csv")
        columns = ["seed", "start", "optimum", "es"] + list(OPTIMIZERS)
        with open(csv_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(",".join(columns) + "\n")
            for r in rows:
                f.write(",".join(repr(r[c]) if c != "seed" else str(r[c]) for c in columns) + "\n")
        return self._finish(
            "compare-opt",
            ", ".join(f"ES beats {k} in {v}/{len(rows)}" for k, v in wins.items()),
            [],
            [json_path, csv_path],
            {"compare": report},
        )

    def eval(self, compare_model: Optional[str] = None) -> Dict[str, Any]:
        """Agreement and every loss of the quantized model against the FP model."""
        cfg = self.config
        fp = self.fp_model()
        quant = self.quantized_model(fp, self.calibration_batches())
        batches = self.evaluation_batches()
        samples = [b.samples for b in batches]
        metrics: Dict[str, Any] = {"agreement": agreement(quant, fp, samples)}
        for kind in LOSS_FUNCTIONS:
            losses = [
                batch_loss(quant.forward(x, quantized=True), fp.forward(x, quantized=False), kind, cfg.loss.tau)
                for x in samples
            ]
            metrics[f"loss_{kind}"] = float(sum(losses) / len(losses))
        if compare_model:
            metrics["w_o_comparison"] = compare_projection_scales(quant, model_io.load(compare_model))
        path = self._out("eval.json")
        save_data(metrics, path)
        return self._finish(
            "eval",
            f"agreement {metrics['agreement']:.4f}, {cfg.loss.kind} {metrics['loss_' + cfg.loss.kind]:.6g}",
            [cfg.data.model_path, cfg.data.quant_model_path, cfg.data.eval_path, compare_model],
            [path],
            {"metrics": metrics},
        )


def compare_projection_scales(model: TinyViT, other: TinyViT) -> List[Dict[str, Any]]:
    """
    Per block, how the output-projection (W^O) quantization differs between two models.

    Reports the mean relative change of the W^O channel scales and how many
    W^O weight codes differ.
    """
    if model.config.blocks != other.config.blocks:
        raise ParameterError("models have different block counts")
    rows = []
    for i, (a, b) in enumerate(zip(model.blocks, other.blocks)):
        pa, pb = a.points["attn.w_o"], b.points["attn.w_o"]
        relative = np.abs(pb.scale.astype(np.float64) - pa.scale) / pa.scale
        codes_a = quantize_uniform(a.weights["attn.w_o"], pa).codes
        codes_b = quantize_uniform(b.weights["attn.w_o"], pb).codes
        rows.append(
            {
                "block": i,
                "mean_relative_scale_change": float(relative.mean()),
                "changed_codes": int(np.sum(codes_a != codes_b)),
                "total_codes": int(codes_a.size),
            }
        )
    return rows


def create_app(config_path: Optional[str] = None, flags: Optional[Dict[str, Any]] = None) -> EvolQApp:
    return EvolQApp(load_config(config_path, flags))
