"""
maskcls command line

Batch commands for data generation, training, evaluation, inference dumps,
the controlled ablations and the gradient suite. Results are JSON on stdout
(and under --out); logs go to stderr; failures exit nonzero with a JSON error
record on stderr.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from . import engine as E
from . import schemas
from .data import (Dataset, Sample, SceneConfig, SegmentInfo, generate_dataset,
                   generate_scene, load_dataset, save_dataset)
from .errors import ConfigError, DatasetError, MaskClsError
from .inference import (InferenceConfig, compare_inference_strategies,
                        general_inference, semantic_inference, to_semantic)
from .losses import (LossWeights, classification_loss, dice_loss, focal_loss, mask_cls_loss,
                     mask_loss, per_pixel_ce_loss)
from .matching import build_cost_matrix, hungarian
from .metrics import MetricReport, evaluate_semantic, miou, panoptic_quality
from .model import (ModelConfig, forward, init_params, load_checkpoint, predict,
                    per_pixel_baseline_forward)
from .train import (EVAL_STRATEGIES, TrainConfig, Trainer, collect_query_class_stats,
                    evaluate_model, load_train_config, predict_semantic, split_eval)
from .utils import colorize, env_int, write_json

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = "MASKFORM_LOG_LEVEL"
GRAD_TOLERANCE = 1e-4
QUERY_SWEEP = (20, 50, 100, 150)
DEPTH_SWEEP = (1, 2, 3, 6)
CLASS_COUNTS = (16, 64)
TREND_SLACK = 0.02
DEFAULT_EVAL_FRACTION = 0.2
GRAD_COORDS = 32


def toy_config(num_classes: int, image_size: Tuple[int, int], **overrides: Any) -> TrainConfig:
    """Desk-scale MaskFormer config used by the ablations when no --config is given."""
    flat = {
        "model.num_classes": num_classes,
        "model.num_queries": 20,
        "model.decoder_layers": 2,
        "model.heads": 4,
        "model.hidden_dim": 32,
        "model.mask_dim": 32,
        "model.backbone_channels": [16, 32, 64],
        "model.image_size": list(image_size),
        "base_lr": 1e-3,
        "total_iters": 300,
        "batch_size": 4,
        "eval_fraction": DEFAULT_EVAL_FRACTION,
        "log_every": 50,
    }
    flat.update(overrides)
    return TrainConfig.from_flat(flat)


def _variant(base: TrainConfig, overrides: Dict[str, Any]) -> TrainConfig:
    flat = base.to_flat()
    flat.update(overrides)
    return TrainConfig.from_flat(flat)


def _with_background(cfg: TrainConfig, dataset: Dataset) -> TrainConfig:
    """Pad augmented samples with the background class the dataset was generated with."""
    if cfg.augment.background_class == dataset.background_class:
        return cfg
    logger.info(f"augment.background_class set to {dataset.background_class} from the dataset")
    return _variant(cfg, {"augment.background_class": dataset.background_class})


def _split(dataset: Dataset, base: TrainConfig) -> Tuple[List[Sample], List[Sample]]:
    train_set, eval_set = split_eval(dataset.samples, base.eval_fraction)
    if not eval_set or not train_set:
        raise ConfigError(f"{len(dataset)} samples with eval_fraction={base.eval_fraction} "
                          f"leave an empty train or eval split")
    return train_set, eval_set


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as handle:
            return np.asarray(handle.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise DatasetError(f"cannot read image ({exc})", path=path) from exc


def _table(rows: List[Dict[str, Any]]) -> str:
    """Aligned text rendering of ablation rows."""
    def fmt(value: Any) -> str:
        return "-" if value is None else f"{value:.4f}" if isinstance(value, float) else str(value)

    columns = ["label", "miou", "pq_st", "pixel_accuracy", "final_loss"]
    cells = [columns] + [[fmt(row.get(c)) for c in columns] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in cells) + "\n"


class SegmentationManager:
    """Runs the batch commands; every method returns a JSON-ready result dict."""

    def __init__(self, threads: Optional[int] = None):
        self.threads = threads or env_int("MASKFORM_THREADS", 1)

    # -- data -------------------------------------------------------------

    def gen_data(self, classes: int, count: int, size: Sequence[int], out: str, seed: int = 0,
                 shapes: Sequence[int] = (1, 4), background_class: int = 1) -> dict:
        cfg = SceneConfig(num_classes=classes, image_size=tuple(size),
                          shapes_per_image=tuple(shapes), background_class=background_class,
                          seed=seed)
        samples = generate_dataset(cfg, count)
        save_dataset(samples, out, classes, cfg.thing_classes, scene_config=cfg.to_dict())
        return {"status": "success", "command": "gen-data", "out": str(out), "seed": seed,
                "num_classes": classes, "count": count, "image_size": list(cfg.image_size)}

    # -- training ----------------------------------------------------------

    def train(self, config: str, data: str, out: str, seed: Optional[int] = None,
              iters: Optional[int] = None) -> dict:
        overrides: Dict[str, Any] = {}
        if seed is not None:
            overrides["seed"] = seed
        if iters is not None:
            overrides["total_iters"] = iters
        cfg = load_train_config(config, overrides)
        dataset = load_dataset(data)
        self._check_compatible(cfg, dataset)
        cfg = _with_background(cfg, dataset)
        result = Trainer(cfg, dataset.samples, out, threads=self.threads).run()
        return {"status": "success", "command": "train", "out": str(out), "seed": cfg.seed,
                "iterations": cfg.total_iters,
                "final_loss": result.log[-1]["loss"],
                "final_checkpoint": str(result.final_checkpoint) if result.final_checkpoint else None,
                "config": cfg.to_dict(),
                "eval": result.eval_report.to_dict() if result.eval_report else None}

    @staticmethod
    def _check_compatible(cfg: TrainConfig, dataset: Dataset) -> None:
        if dataset.num_classes != cfg.model.num_classes:
            raise ConfigError(f"dataset has {dataset.num_classes} classes, "
                              f"model expects {cfg.model.num_classes}")
        if tuple(dataset.image_size) != tuple(cfg.augment.crop_size or cfg.model.image_size):
            logger.warning(f"dataset images are {dataset.image_size}, "
                           f"model expects {cfg.model.image_size}")

    # -- evaluation --------------------------------------------------------

    def eval_semantic(self, gt: str, out: str, pred: Optional[str] = None,
                      checkpoint: Optional[str] = None, strategy: str = "semantic",
                      conf_threshold: float = 0.3, seed: int = 0) -> dict:
        gt_set = load_dataset(gt)
        if (pred is None) == (checkpoint is None):
            raise ConfigError("give exactly one of --pred or --checkpoint")
        if pred is not None:
            pred_set = load_dataset(pred)
            if len(pred_set) != len(gt_set):
                raise DatasetError(f"{len(pred_set)} predictions for {len(gt_set)} images",
                                   path=pred)
            report = evaluate_semantic([s.semantic for s in pred_set],
                                       [s.semantic for s in gt_set], gt_set.num_classes)
        else:
            params, model_config, _ = load_checkpoint(checkpoint)
            report = evaluate_model(params, model_config, gt_set.samples, strategy, conf_threshold)
        return self._report_result("eval-semantic", report, out, seed)

    def eval_panoptic(self, gt: str, out: str, pred: Optional[str] = None,
                      checkpoint: Optional[str] = None, conf_threshold: float = 0.8,
                      seed: int = 0) -> dict:
        gt_set = load_dataset(gt)
        if (pred is None) == (checkpoint is None):
            raise ConfigError("give exactly one of --pred or --checkpoint")
        if pred is not None:
            pred_set = load_dataset(pred)
            if len(pred_set) != len(gt_set):
                raise DatasetError(f"{len(pred_set)} predictions for {len(gt_set)} images",
                                   path=pred)
            pred_maps = list(pred_set.samples)
            semantic = [s.semantic for s in pred_set]
        else:
            params, model_config, _ = load_checkpoint(checkpoint)
            config = InferenceConfig(conf_threshold=conf_threshold, task="panoptic",
                                     thing_classes=gt_set.thing_classes)
            pred_maps = [general_inference(predict(s.image, params, model_config), config)
                         for s in gt_set]
            semantic = [to_semantic(m) for m in pred_maps]
        report = panoptic_quality(pred_maps, list(gt_set.samples), gt_set.num_classes,
                                  gt_set.thing_classes)
        report = report.merged(miou(semantic, [s.semantic for s in gt_set], gt_set.num_classes))
        return self._report_result("eval-panoptic", report, out, seed)

    @staticmethod
    def _report_result(command: str, report: MetricReport, out: str, seed: int) -> dict:
        payload = schemas.validate(report.to_dict(), "metric_report")
        write_json(payload, Path(out) / "metrics.json")
        return {"status": "success", "command": command, "out": str(out), "seed": seed,
                "report": payload}

    # -- inference dumps ---------------------------------------------------

    def infer(self, checkpoint: str, out: str, image: Optional[str] = None,
              data: Optional[str] = None, task: str = "panoptic", conf_threshold: float = 0.8,
              seed: int = 0) -> dict:
        if (image is None) == (data is None):
            raise ConfigError("give exactly one of --image or --data")
        params, model_config, _ = load_checkpoint(checkpoint)
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        if image is not None:
            config = InferenceConfig(conf_threshold=conf_threshold, task=task)
            entry, _ = self._infer_one(_read_image(Path(image)), Path(image).stem, params,
                                       model_config, config, out_dir)
            return {"status": "success", "command": "infer", "out": str(out), "seed": seed,
                    "images": [entry]}

        dataset = load_dataset(data)
        config = InferenceConfig(conf_threshold=conf_threshold, task=task,
                                 thing_classes=dataset.thing_classes)
        entries, predictions = [], []
        for position, sample in enumerate(dataset):
            entry, prediction = self._infer_one(sample.image, f"{position:06d}", params,
                                                model_config, config, out_dir)
            prediction.index = sample.index
            entries.append(entry)
            predictions.append(prediction)
        save_dataset(predictions, out_dir / "predictions", dataset.num_classes,
                     dataset.thing_classes, kind="prediction")
        return {"status": "success", "command": "infer", "out": str(out), "seed": seed,
                "images": entries}

    @staticmethod
    def _infer_one(image: np.ndarray, name: str, params, model_config: ModelConfig,
                   config: InferenceConfig, out_dir: Path) -> Tuple[Dict[str, Any], Sample]:
        """Write the colorized label map and per-query masks of one image.

        Returns the JSON entry and the prediction as a Sample for a
        prediction dataset. Per-pixel heads have no queries; their segments
        are one per predicted class.
        """
        target = out_dir / name
        target.mkdir(parents=True, exist_ok=True)
        entry: Dict[str, Any] = {"name": name, "masks": [], "segments": []}
        if model_config.head != "maskformer":
            labels = predict_semantic(params, model_config, image)
            panoptic = labels.copy()
            segments = [SegmentInfo(int(c), int(c), False, int((labels == c).sum()))
                        for c in np.unique(labels)]
        else:
            output = predict(image, params, model_config)
            panoptic_map = general_inference(output, config)
            labels = semantic_inference(output).labels if config.task == "semantic" \
                else to_semantic(panoptic_map)
            panoptic = panoptic_map.segment_ids
            segments = [SegmentInfo(s.id, s.class_id, s.is_thing, s.area)
                        for s in panoptic_map.segments]
            entry["segments"] = [s.to_dict() for s in panoptic_map.segments]
            for query, mask in enumerate(output.mask_probs.data):
                path = target / f"query_{query:03d}.png"
                Image.fromarray(np.rint(mask * 255.0).astype(np.uint8)).save(path)
                entry["masks"].append(str(path))
        write_json(entry["segments"], target / "segments.json")
        label_path = target / "label_map.png"
        Image.fromarray(colorize(labels, model_config.num_classes)).save(label_path)
        entry["label_map"] = str(label_path)
        return entry, Sample(image, labels, panoptic, segments)

    # -- ablations ---------------------------------------------------------

    def _base(self, dataset: Dataset, config: Optional[str], seed: int,
              iters: Optional[int]) -> TrainConfig:
        overrides: Dict[str, Any] = {"seed": seed}
        if iters is not None:
            overrides["total_iters"] = iters
        if config is not None:
            base = load_train_config(config, overrides)
            if base.eval_fraction == 0:
                base = _variant(base, {"eval_fraction": DEFAULT_EVAL_FRACTION})
        else:
            base = toy_config(dataset.num_classes, dataset.image_size, **overrides)
        return _with_background(base, dataset)

    def _paired_runs(self, dataset: Dataset, base: TrainConfig,
                     variants: List[Tuple[str, Dict[str, Any]]], out: Path) -> List[Dict[str, Any]]:
        train_set, eval_set = _split(dataset, base)
        rows = []
        for label, overrides in variants:
            cfg = _variant(base, {**overrides, "eval_fraction": 0.0})
            logger.info(f"ablation run {label}: {overrides}")
            result = Trainer(cfg, train_set, out / label, eval_samples=eval_set,
                             threads=self.threads).run()
            report = result.eval_report
            rows.append({"label": label, "miou": report.miou, "pq_st": report.pq,
                         "pixel_accuracy": report.pixel_accuracy,
                         "final_loss": result.log[-1]["loss"], "settings": overrides})
        return rows

    def _ablation_result(self, name: str, rows: List[Dict[str, Any]], out: Path, seed: int,
                         **extra: Any) -> dict:
        result = {"status": "success", "command": "ablation", "ablation": name, "out": str(out),
                  "seed": seed, "rows": rows, **extra}
        schemas.validate(result, "ablation")
        out.mkdir(parents=True, exist_ok=True)
        write_json(result, out / "ablation.json")
        (out / "ablation.txt").write_text(_table(rows), encoding="utf-8")
        logger.info(f"{name} ablation:\n{_table(rows)}")
        return result

    def ablate_matching(self, data: str, out: str, seed: int = 0, iters: Optional[int] = None,
                        config: Optional[str] = None) -> dict:
        dataset = load_dataset(data)
        base = self._base(dataset, config, seed, iters)
        k = dataset.num_classes
        variants = [(kind, {"matcher": kind, "model.num_queries": k}) for kind in ("fixed", "bipartite")]
        rows = self._paired_runs(dataset, base, variants, Path(out))
        return self._ablation_result("matching", rows, Path(out), seed)

    def ablate_queries(self, data: str, out: str, seed: int = 0, iters: Optional[int] = None,
                       config: Optional[str] = None, values: Sequence[int] = QUERY_SWEEP) -> dict:
        dataset = load_dataset(data)
        base = self._base(dataset, config, seed, iters)
        variants = [(f"queries_{n}", {"model.num_queries": int(n)}) for n in values]
        rows = self._paired_runs(dataset, base, variants, Path(out))
        return self._ablation_result("queries", rows, Path(out), seed)

    def ablate_decoder_depth(self, data: str, out: str, seed: int = 0,
                             iters: Optional[int] = None, config: Optional[str] = None,
                             values: Sequence[int] = DEPTH_SWEEP) -> dict:
        dataset = load_dataset(data)
        base = self._base(dataset, config, seed, iters)
        variants = [(f"layers_{n}", {"model.decoder_layers": int(n)}) for n in values]
        rows = self._paired_runs(dataset, base, variants, Path(out))
        return self._ablation_result("decoder_depth", rows, Path(out), seed)

    def ablate_paradigm(self, data: str, out: str, seed: int = 0, iters: Optional[int] = None,
                        config: Optional[str] = None) -> dict:
        dataset = load_dataset(data)
        base = self._base(dataset, config, seed, iters)
        k = dataset.num_classes
        variants = [
            ("per_pixel", {"model.head": "per_pixel", "objective": "per_pixel"}),
            ("per_pixel_plus", {"model.head": "per_pixel_plus", "objective": "per_pixel",
                                "model.num_queries": k}),
            ("maskformer_fixed", {"matcher": "fixed", "model.num_queries": k}),
            ("maskformer_bipartite", {"matcher": "bipartite"}),
        ]
        rows = self._paired_runs(dataset, base, variants, Path(out))
        return self._ablation_result("paradigm", rows, Path(out), seed)

    def ablate_inference(self, data: str, out: str, seed: int = 0, iters: Optional[int] = None,
                         config: Optional[str] = None, conf_threshold: float = 0.3) -> dict:
        dataset = load_dataset(data)
        base = self._base(dataset, config, seed, iters)
        train_set, eval_set = _split(dataset, base)
        cfg = _variant(base, {"eval_fraction": 0.0})
        result = Trainer(cfg, train_set, Path(out) / "model", threads=self.threads).run()
        predictions = [predict(s.image, result.params, cfg.model) for s in eval_set]
        reports = compare_inference_strategies(predictions, [s.semantic for s in eval_set],
                                               dataset.num_classes, conf_threshold)
        rows = [{"label": label, "miou": r.miou, "pq_st": r.pq, "pixel_accuracy": r.pixel_accuracy,
                 "final_loss": result.log[-1]["loss"], "settings": {"strategy": label}}
                for label, r in reports.items()]
        return self._ablation_result("inference", rows, Path(out), seed)

    def ablate_classes(self, out: str, seed: int = 0, iters: Optional[int] = None,
                       count: int = 500, size: Sequence[int] = (32, 32),
                       config: Optional[str] = None) -> dict:
        """MaskFormer minus PerPixelBaseline+ mIoU at 16 and 64 classes, same seed and budget."""
        out_dir = Path(out)
        rows, gaps = [], {}
        for classes in CLASS_COUNTS:
            scene = SceneConfig(num_classes=classes, image_size=tuple(size), seed=seed)
            dataset = Dataset(generate_dataset(scene, count), classes, scene.thing_classes,
                              scene_config=scene.to_dict())
            base = self._base(dataset, config, seed, iters)
            base = _variant(base, {"model.num_classes": classes})
            variants = [
                (f"per_pixel_plus_{classes}", {"model.head": "per_pixel_plus",
                                               "objective": "per_pixel",
                                               "model.num_queries": classes}),
                (f"maskformer_{classes}", {"matcher": "bipartite"}),
            ]
            pair = self._paired_runs(dataset, base, variants, out_dir / f"classes_{classes}")
            rows.extend(pair)
            baseline, maskformer = pair[0]["miou"] or 0.0, pair[1]["miou"] or 0.0
            gaps[str(classes)] = maskformer - baseline
        holds = gaps[str(CLASS_COUNTS[1])] >= gaps[str(CLASS_COUNTS[0])] - TREND_SLACK
        if not holds:
            logger.warning(f"class-count trend not observed: gaps {gaps}")
        return self._ablation_result("classes", rows, out_dir, seed, gaps=gaps,
                                     trend_holds=bool(holds), slack=TREND_SLACK)

    # -- analysis ----------------------------------------------------------

    def query_stats(self, checkpoint: str, data: str, out: str, conf_threshold: float = 0.8,
                    seed: int = 0) -> dict:
        params, model_config, _ = load_checkpoint(checkpoint)
        dataset = load_dataset(data)
        config = InferenceConfig(conf_threshold=conf_threshold, task="panoptic",
                                 thing_classes=dataset.thing_classes)
        stats = schemas.validate(
            collect_query_class_stats(params, model_config, dataset.samples, config),
            "query_stats")
        write_json(stats, Path(out) / "query_stats.json")
        return {"status": "success", "command": "query-stats", "out": str(out), "seed": seed,
                "stats": stats}

    def grad_check(self, out: str, seed: int = 0, coords: int = GRAD_COORDS) -> dict:
        if coords < 0:
            raise ConfigError(f"--coords must be >= 0, got {coords}")
        max_coords = coords or None
        suites = {
            "primitives": primitive_gradient_suite(seed),
            "losses": loss_gradient_suite(seed),
            "model": model_gradient_suite(seed, max_coords=max_coords),
        }
        worst = max(max(errors.values()) for errors in suites.values())
        for suite, errors in suites.items():
            name = max(errors, key=errors.get)
            logger.info(f"grad-check {suite}: max error {errors[name]:.3e} ({name})")
        result = {"status": "success", "command": "grad-check", "out": str(out), "seed": seed,
                  "tolerance": GRAD_TOLERANCE, "max_error": worst,
                  "passed": bool(worst < GRAD_TOLERANCE), "suites": suites}
        schemas.validate(result, "grad-check")
        write_json(result, Path(out) / "grad_check.json")
        if not result["passed"]:
            raise MaskClsError(f"gradient check failed: max relative error {worst:.3e} "
                               f">= {GRAD_TOLERANCE}")
        return result


# ----------------------------------------------------------------------------
# gradient suites

def _weighted_sum(rng: np.random.Generator, fn: Callable[[E.Tensor], E.Tensor]
                  ) -> Callable[[E.Tensor], E.Tensor]:
    """sum(w * fn(x)) with fixed random w, so every output coordinate matters."""
    cache: Dict[Tuple[int, ...], np.ndarray] = {}

    def scalar(x: E.Tensor) -> E.Tensor:
        out = fn(x)
        if out.shape not in cache:
            cache[out.shape] = rng.uniform(0.5, 1.5, size=out.shape)
        return E.sum(E.mul(out, cache[out.shape]))

    return scalar


def primitive_gradient_suite(seed: int = 0) -> Dict[str, float]:
    """Max relative finite-difference error of every primitive on random inputs."""
    rng = np.random.default_rng(seed)

    def away_from_zero(*shape):
        return rng.uniform(0.2, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)

    other = rng.standard_normal((3, 4))
    positive = rng.uniform(0.5, 2.0, size=(3, 4))
    kernel3 = rng.standard_normal((2, 2, 3, 3))
    kernel1 = rng.standard_normal((3, 2, 1, 1))
    conv_image = rng.standard_normal((1, 2, 4, 4))
    right = rng.standard_normal((4, 2))
    bias = rng.standard_normal(4)
    cases: Dict[str, Tuple[Callable[[E.Tensor], E.Tensor], np.ndarray]] = {
        "add": (lambda x: E.add(x, other), rng.standard_normal((3, 4))),
        "add_broadcast": (lambda x: E.add(x, other), rng.standard_normal((1, 4))),
        "sub": (lambda x: E.sub(other, x), rng.standard_normal((3, 4))),
        "mul_elementwise": (lambda x: E.mul(x, other), rng.standard_normal((3, 4))),
        "div": (lambda x: E.div(other, x), rng.uniform(0.5, 2.0, size=(3, 4))),
        "div_numerator": (lambda x: E.div(x, positive), rng.standard_normal((3, 4))),
        "neg": (E.neg, rng.standard_normal((3, 4))),
        "matmul": (lambda x: E.matmul(x, right), rng.standard_normal((3, 4))),
        "matmul_right": (lambda x: E.matmul(other, x), rng.standard_normal((4, 2))),
        "conv2d_3x3": (lambda x: E.conv2d_3x3(x, kernel3), rng.standard_normal((1, 2, 4, 4))),
        "conv2d_3x3_stride2": (lambda x: E.conv2d_3x3(x, kernel3, stride=2),
                               rng.standard_normal((1, 2, 4, 4))),
        "conv2d_3x3_kernel": (lambda x: E.conv2d_3x3(conv_image, x),
                              rng.standard_normal((2, 2, 3, 3))),
        "conv2d_1x1": (lambda x: E.conv2d_1x1(x, kernel1), rng.standard_normal((1, 2, 4, 4))),
        "relu": (E.relu, away_from_zero(3, 4)),
        "sigmoid": (E.sigmoid, rng.standard_normal((3, 4))),
        "exp": (E.exp, rng.standard_normal((3, 4))),
        "softmax": (lambda x: E.softmax(x, axis=-1), rng.standard_normal((3, 4))),
        "log_softmax": (lambda x: E.log_softmax(x, axis=0), rng.standard_normal((3, 4))),
        "log": (E.log, rng.uniform(0.5, 2.0, size=(3, 4))),
        "clamp": (lambda x: E.clamp(x, -2.0, 2.0), rng.uniform(-1.5, 1.5, size=(3, 4))),
        "pow": (lambda x: E.pow_scalar(x, 2.5), rng.uniform(0.5, 2.0, size=(3, 4))),
        "mean": (lambda x: E.mean(x, axis=1), rng.standard_normal((3, 4))),
        "sum": (lambda x: E.sum(x, axis=0, keepdims=True), rng.standard_normal((3, 4))),
        "upsample_nearest_2x": (E.upsample_nearest_2x, rng.standard_normal((1, 2, 2, 3))),
        "avg_pool_2x2": (E.avg_pool_2x2, rng.standard_normal((1, 2, 4, 4))),
        "layer_norm": (lambda x: E.layer_norm(x, axis=-1), rng.standard_normal((3, 4))),
        "scale_by_constant": (lambda x: E.scale(x, -1.7), rng.standard_normal((3, 4))),
        "concat": (lambda x: E.concat([x, E.scale(x, 2.0)], axis=1), rng.standard_normal((3, 4))),
        "transpose": (lambda x: E.transpose(x, (1, 0, 2)), rng.standard_normal((2, 3, 4))),
        "reshape": (lambda x: E.reshape(x, (4, 3)), rng.standard_normal((3, 4))),
        "take": (lambda x: E.take(x, [2, 0, 2], axis=1), rng.standard_normal((3, 4))),
        "broadcast_add_bias": (lambda x: E.broadcast_add_bias(x, bias, axis=1),
                               rng.standard_normal((2, 4, 3))),
    }
    errors = {}
    for name, (fn, point) in cases.items():
        errors[name] = E.grad_check(_weighted_sum(rng, fn), point)
    return errors


def loss_gradient_suite(seed: int = 0) -> Dict[str, float]:
    """Finite-difference check of each loss at random interior points."""
    rng = np.random.default_rng(seed + 1)
    weights = LossWeights()
    gt = (rng.random((6, 6)) < 0.5).astype(np.float64)
    labels = rng.integers(1, 4, size=(4, 4))
    interior = rng.uniform(0.05, 0.95, size=(6, 6))
    probs = rng.dirichlet(np.ones(4))
    return {
        "per_pixel_ce": E.grad_check(lambda s: per_pixel_ce_loss(s, labels),
                                     rng.standard_normal((3, 4, 4))),
        "focal": E.grad_check(lambda m: focal_loss(m, gt), interior),
        "focal_gamma0": E.grad_check(lambda m: focal_loss(m, gt, gamma=0.0, alpha=0.5), interior),
        "dice": E.grad_check(lambda m: dice_loss(m, gt), interior),
        "mask_loss": E.grad_check(lambda m: mask_loss(m, gt, weights), interior),
        "classification": E.grad_check(lambda p: classification_loss(p, 2, weights), probs),
        "classification_no_object": E.grad_check(lambda p: classification_loss(p, None, weights),
                                                 probs),
    }


def gradient_toy_model(head: str = "maskformer") -> ModelConfig:
    return ModelConfig(num_classes=3, num_queries=4 if head == "maskformer" else 3,
                       decoder_layers=2, heads=2, hidden_dim=8, mask_dim=8,
                       backbone_channels=(4, 8), image_size=(16, 16), head=head)


def model_gradient_suite(seed: int = 0,
                         max_coords: Optional[int] = GRAD_COORDS) -> Dict[str, float]:
    """Whole-pipeline checks on a 16x16 toy model (N=4, K=3).

    ``max_coords`` coordinates are sampled per parameter tensor; None checks
    all of them.

    The assignment is computed once at the base point and held fixed while
    finite differences are taken.
    """
    scene = SceneConfig(num_classes=3, image_size=(16, 16), shapes_per_image=(1, 3),
                        shape_size=(4, 9), seed=seed)
    sample = generate_scene(scene, 0)
    weights = LossWeights()
    errors: Dict[str, float] = {}

    config = gradient_toy_model("maskformer")
    params = init_params(config, seed)
    targets = sample.targets("semantic")
    with E.no_grad():
        base_layers = forward(sample.image, params, config).layers()
        sigmas = [hungarian(build_cost_matrix(z, targets, weights)).sigma for z in base_layers]

    def mask_cls_objective() -> E.Tensor:
        layers = forward(sample.image, params, config).layers()
        total = mask_cls_loss(layers[0], targets, sigmas[0], weights)
        for z, sigma in zip(layers[1:], sigmas[1:]):
            total = E.add(total, mask_cls_loss(z, targets, sigma, weights))
        return total

    for name, err in E.grad_check_params(mask_cls_objective, params,
                                         max_coords=max_coords, seed=seed).items():
        errors[f"maskformer/{name}"] = err

    for head in ("per_pixel", "per_pixel_plus"):
        config_pp = gradient_toy_model(head)
        params_pp = init_params(config_pp, seed)

        def per_pixel_objective(cfg=config_pp, p=params_pp) -> E.Tensor:
            return per_pixel_ce_loss(per_pixel_baseline_forward(sample.image, p, cfg),
                                     sample.semantic)

        for name, err in E.grad_check_params(per_pixel_objective, params_pp,
                                             max_coords=max_coords, seed=seed).items():
            errors[f"{head}/{name}"] = err
    return errors


# ----------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors are JSON records (exit 2)."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        _emit_error(self.prog, "ArgumentError", message)
        sys.exit(2)


def _emit_error(command: Optional[str], error_type: str, message: str) -> None:
    record = {"status": "error", "command": command, "error_type": error_type,
              "message": message}
    sys.stderr.write(json.dumps(schemas.validate(record, "error")) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="maskcls", description="Mask classification segmentation at desk scale")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        return p

    p = command("gen-data", "generate a synthetic dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, nargs=2, default=[32, 32], metavar=("H", "W"))
    p.add_argument("--shapes", type=int, nargs=2, default=[1, 4], metavar=("MIN", "MAX"))
    p.add_argument("--background-class", type=int, default=1)

    p = command("train", "train from a flat config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iters", type=int)

    for name in ("eval-semantic", "eval-panoptic"):
        p = command(name, f"{name.split('-')[1]} metrics of predictions or a checkpoint")
        p.add_argument("--gt", required=True)
        p.add_argument("--pred")
        p.add_argument("--checkpoint")
        p.add_argument("--conf-threshold", type=float,
                       default=0.3 if name == "eval-semantic" else 0.8)
        if name == "eval-semantic":
            p.add_argument("--strategy", choices=EVAL_STRATEGIES, default="semantic")

    p = command("infer", "dump label maps and per-query masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image")
    p.add_argument("--data")
    p.add_argument("--task", choices=("semantic", "panoptic", "instance"), default="panoptic")
    p.add_argument("--conf-threshold", type=float, default=0.8)

    for name in ("ablate-matching", "ablate-queries", "ablate-inference",
                 "ablate-decoder-depth", "ablate-paradigm"):
        p = command(name, f"paired runs for the {name[7:]} ablation")
        p.add_argument("--data", required=True)
        p.add_argument("--config")
        p.add_argument("--iters", type=int)
        if name in ("ablate-queries", "ablate-decoder-depth"):
            default = QUERY_SWEEP if name == "ablate-queries" else DEPTH_SWEEP
            p.add_argument("--values", type=int, nargs="+", default=list(default))
        if name == "ablate-inference":
            p.add_argument("--conf-threshold", type=float, default=0.3)

    p = command("ablate-classes", "16- vs 64-class trend of MaskFormer over PerPixelBaseline+")
    p.add_argument("--config")
    p.add_argument("--iters", type=int)
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--size", type=int, nargs=2, default=[32, 32], metavar=("H", "W"))

    p = command("query-stats", "distinct classes predicted per query slot")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--conf-threshold", type=float, default=0.8)

    p = command("grad-check", "finite-difference gradient suites")
    p.add_argument("--coords", type=int, default=GRAD_COORDS,
                   help="coordinates sampled per parameter tensor, 0 for all")
    return parser


def _dispatch(manager: SegmentationManager, args: argparse.Namespace) -> dict:
    name = args.command
    common = {"out": args.out, "seed": args.seed}
    if name == "gen-data":
        return manager.gen_data(args.classes, args.count, args.size, shapes=args.shapes,
                                background_class=args.background_class, **common)
    if name == "train":
        return manager.train(args.config, args.data, args.out, seed=args.seed, iters=args.iters)
    if name == "eval-semantic":
        return manager.eval_semantic(args.gt, pred=args.pred, checkpoint=args.checkpoint,
                                     strategy=args.strategy, conf_threshold=args.conf_threshold,
                                     **common)
    if name == "eval-panoptic":
        return manager.eval_panoptic(args.gt, pred=args.pred, checkpoint=args.checkpoint,
                                     conf_threshold=args.conf_threshold, **common)
    if name == "infer":
        return manager.infer(args.checkpoint, image=args.image, data=args.data, task=args.task,
                             conf_threshold=args.conf_threshold, **common)
    if name == "ablate-matching":
        return manager.ablate_matching(args.data, config=args.config, iters=args.iters, **common)
    if name == "ablate-queries":
        return manager.ablate_queries(args.data, config=args.config, iters=args.iters,
                                      values=args.values, **common)
    if name == "ablate-inference":
        return manager.ablate_inference(args.data, config=args.config, iters=args.iters,
                                        conf_threshold=args.conf_threshold, **common)
    if name == "ablate-decoder-depth":
        return manager.ablate_decoder_depth(args.data, config=args.config, iters=args.iters,
                                            values=args.values, **common)
    if name == "ablate-paradigm":
        return manager.ablate_paradigm(args.data, config=args.config, iters=args.iters, **common)
    if name == "ablate-classes":
        return manager.ablate_classes(config=args.config, iters=args.iters, count=args.count,
                                      size=args.size, **common)
    if name == "query-stats":
        return manager.query_stats(args.checkpoint, args.data, conf_threshold=args.conf_threshold,
                                   **common)
    if name == "grad-check":
        return manager.grad_check(coords=args.coords, **common)
    raise ValueError(f"Unknown command: {name}")


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv`` and run one command; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    manager = SegmentationManager()
    try:
        result = schemas.validate(_dispatch(manager, args), schemas.result_schema(args.command))
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_json(result, Path(args.out) / "result.json")
        sys.stdout.write(json.dumps(result, indent=2, sort_keys=True) + "\n")
        return 0
    except Exception as e:
        logger.error(f"Error in {args.command}: {e}")
        _emit_error(args.command, type(e).__name__, str(e))
        return 1


def main() -> None:
    logging.basicConfig(level=os.getenv(LOG_LEVEL_ENV, "INFO").upper(), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
