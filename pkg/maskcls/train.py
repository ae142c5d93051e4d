"""
Training: AdamW with a poly schedule over the mask classification or per-pixel objective.

Batches are drawn from a seeded generator; per-sample forward/backward passes
run on their own graphs (optionally in parallel, capped by MASKFORM_THREADS)
and their gradients are summed in batch order, so a run is fully determined
by its config, seed and dataset.
"""

import dataclasses
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import engine as E
from . import schemas
from .data import AugmentConfig, Sample, apply_augment, sample_augment_params
from .errors import ConfigError, DomainError, TrainingError
from .inference import InferenceConfig, general_inference, semantic_inference, to_semantic
from .losses import LossWeights, aux_mask_cls_loss, per_pixel_ce_loss
from .matching import MATCHERS, make_matcher
from .metrics import MetricReport, evaluate_semantic, query_class_stats
from .model import ModelConfig, Params, forward, init_params, predict, save_checkpoint
from .utils import env_int, format_flat_config, parse_flat_config, write_json

logger = logging.getLogger(__name__)

OBJECTIVES = ("mask_cls", "per_pixel")
EVAL_STRATEGIES = ("semantic", "general")
THREADS_ENV = "MASKFORM_THREADS"
_SECTIONS = {"model": ModelConfig, "losses": LossWeights, "augment": AugmentConfig}


@dataclass
class TrainConfig:
    model: ModelConfig
    losses: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    total_iters: int = 1000
    batch_size: int = 4
    seed: int = 0
    matcher: str = "bipartite"
    objective: str = "mask_cls"
    task: str = "semantic"
    warmup_iters: int = 0
    grad_clip: float = 0.0
    backbone_lr_multiplier: float = 1.0
    log_every: int = 50
    eval_every: int = 0
    eval_fraction: float = 0.0
    eval_strategy: str = "semantic"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.total_iters < 1:
            raise ConfigError(f"total_iters must be >= 1, got {self.total_iters}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("base_lr", "weight_decay", "poly_power", "grad_clip",
                     "backbone_lr_multiplier"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("warmup_iters", "log_every", "eval_every", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ConfigError(f"eval_fraction must lie in [0, 1), got {self.eval_fraction}")
        if self.matcher not in MATCHERS:
            raise ConfigError(f"matcher must be one of {MATCHERS}, got {self.matcher!r}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.task not in ("semantic", "panoptic"):
            raise ConfigError(f"task must be semantic or panoptic, got {self.task!r}")
        if self.eval_strategy not in EVAL_STRATEGIES:
            raise ConfigError(f"eval_strategy must be one of {EVAL_STRATEGIES}")
        if self.augment.background_class > self.model.num_classes:
            raise ConfigError(f"augment.background_class {self.augment.background_class} "
                              f"outside 1..{self.model.num_classes}")
        if (self.objective == "mask_cls") != (self.model.head == "maskformer"):
            raise ConfigError(f"objective {self.objective!r} does not fit head {self.model.head!r}")
        if self.objective == "mask_cls" and self.matcher == "fixed":
            if self.model.num_queries != self.model.num_classes:
                raise ConfigError("fixed matching needs model.num_queries == model.num_classes")
            if self.task != "semantic":
                raise ConfigError("fixed matching needs the semantic task (one segment per class)")

    def to_dict(self) -> Dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
               if f.name not in _SECTIONS}
        out["model"] = self.model.to_dict()
        out["losses"] = dataclasses.asdict(self.losses)
        out["augment"] = dataclasses.asdict(self.augment)
        return json.loads(json.dumps(out))

    def to_flat(self) -> Dict[str, Any]:
        flat = {}
        for key, value in self.to_dict().items():
            if key in _SECTIONS:
                flat.update({f"{key}.{k}": v for k, v in value.items()})
            else:
                flat[key] = value
        return flat

    @classmethod
    def from_flat(cls, values: Dict[str, Any]) -> "TrainConfig":
        """Build from dotted keys (``model.num_queries = 16``); unknown keys are rejected."""
        top = {f.name for f in dataclasses.fields(cls)} - set(_SECTIONS)
        sections: Dict[str, Dict[str, Any]] = {name: {} for name in _SECTIONS}
        plain: Dict[str, Any] = {}
        for key, value in values.items():
            section, _, name = key.partition(".")
            if name and section in _SECTIONS:
                known = {f.name for f in dataclasses.fields(_SECTIONS[section])}
                if name not in known:
                    raise ConfigError(f"unknown config key {key!r}")
                sections[section][name] = value
            elif key in top:
                plain[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        if "num_classes" not in sections["model"]:
            raise ConfigError("config must set model.num_classes")
        try:
            return cls(model=ModelConfig(**sections["model"]),
                       losses=LossWeights(**sections["losses"]),
                       augment=AugmentConfig(**sections["augment"]), **plain)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "TrainConfig":
        flat = {}
        for key, value in values.items():
            if key in _SECTIONS and isinstance(value, dict):
                flat.update({f"{key}.{k}": v for k, v in value.items()})
            else:
                flat[key] = value
        return cls.from_flat(flat)


def load_train_config(path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None
                      ) -> TrainConfig:
    """Read a flat ``key = value`` config file, applying dotted-key overrides."""
    path = Path(path)
    try:
        values = parse_flat_config(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    values.update(overrides or {})
    return TrainConfig.from_flat(values)


@dataclass
class OptimizerState:
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def poly_lr(iteration: int, total: int, base_lr: float, power: float = 0.9) -> float:
    """base_lr * (1 - iteration / total) ** power, zero from ``total`` on."""
    if total < 1:
        raise ValueError(f"total must be >= 1, got {total}")
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    if iteration >= total:
        return 0.0
    return base_lr * (1.0 - iteration / total) ** power


def learning_rate(config: TrainConfig, iteration: int) -> float:
    lr = poly_lr(iteration, config.total_iters, config.base_lr, config.poly_power)
    if config.warmup_iters and iteration < config.warmup_iters:
        lr *= (iteration + 1) / config.warmup_iters
    return lr


def adamw_step(params: Params, grads: Dict[str, np.ndarray], state: OptimizerState, lr: float,
               weight_decay: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               lr_multipliers: Optional[Dict[str, float]] = None) -> OptimizerState:
    """Decoupled weight decay (p <- p - lr*wd*p) followed by the bias-corrected Adam update.

    Parameters absent from ``grads`` get a zero gradient. Parameter arrays are
    replaced, never modified in place.
    """
    for name, grad in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if grad.shape != params[name].shape:
            raise DomainError(f"gradient shape {grad.shape} != parameter shape "
                              f"{params[name].shape} for {name}")
        if not np.all(np.isfinite(grad)):
            raise DomainError(f"non-finite gradient for parameter {name}")
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, tensor in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(tensor.data)
        group_lr = lr * (lr_multipliers or {}).get(name, 1.0)
        m = beta1 * state.exp_avg.get(name, 0.0) + (1.0 - beta1) * grad
        v = beta2 * state.exp_avg_sq.get(name, 0.0) + (1.0 - beta2) * grad * grad
        state.exp_avg[name], state.exp_avg_sq[name] = m, v
        decayed = tensor.data - group_lr * weight_decay * tensor.data
        tensor.data = decayed - group_lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return state


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to a global L2 norm of at most ``max_norm``; returns the norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


def split_eval(samples: Sequence[Sample], fraction: float) -> Tuple[List[Sample], List[Sample]]:
    """Hold out the last ``ceil(fraction * n)`` samples by index."""
    samples = list(samples)
    held = math.ceil(fraction * len(samples)) if fraction > 0 else 0
    if held >= len(samples) and held:
        raise ConfigError(f"eval_fraction {fraction} leaves no training samples")
    return samples[:len(samples) - held], samples[len(samples) - held:]


def sample_loss(params: Params, config: TrainConfig, sample: Sample,
                matcher=None) -> Tuple[float, Dict[str, np.ndarray]]:
    """Loss and per-parameter gradients of one sample, on a private graph."""
    with E.graph_scope():
        output = forward(sample.image, params, config.model)
        if config.objective == "per_pixel":
            loss = per_pixel_ce_loss(output, sample.semantic)
        else:
            matcher = matcher or make_matcher(config.matcher, config.losses)
            loss = aux_mask_cls_loss(output.layers(), sample.targets(config.task),
                                     config.losses, matcher)
        leaf_grads = E.backward(loss, accumulate=False)
    grads = {name: leaf_grads[t] for name, t in params.items() if t in leaf_grads}
    return loss.item(), grads


@dataclass
class TrainResult:
    params: Params
    log: List[Dict[str, Any]]
    final_checkpoint: Optional[Path] = None
    eval_report: Optional[MetricReport] = None


class Trainer:
    """Owns params, optimizer state and the batch generator of one training run."""

    def __init__(self, config: TrainConfig, samples: Sequence[Sample],
                 out_dir: Optional[Union[str, Path]] = None,
                 eval_samples: Optional[Sequence[Sample]] = None,
                 threads: Optional[int] = None):
        if not samples:
            raise ConfigError("training needs a non-empty dataset")
        self.config = config
        if eval_samples is None and config.eval_fraction > 0:
            samples, eval_samples = split_eval(samples, config.eval_fraction)
        self.samples = list(samples)
        self.eval_samples = list(eval_samples or [])
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.threads = threads or env_int(THREADS_ENV, 1)
        self.params = init_params(config.model, config.seed)
        self.state = OptimizerState()
        self.rng = np.random.default_rng(int(config.seed) & 0xFFFFFFFFFFFFFFFF)
        self.matcher = make_matcher(config.matcher, config.losses)
        self.lr_multipliers = {name: config.backbone_lr_multiplier
                               for name in self.params if self.params.is_backbone(name)}
        self.log: List[Dict[str, Any]] = []

    def _batch(self) -> Tuple[List[int], List[Sample]]:
        indices = self.rng.integers(0, len(self.samples), size=self.config.batch_size).tolist()
        batch = []
        for index in indices:
            sample = self.samples[index]
            params = sample_augment_params(sample.shape, self.config.augment, self.rng)
            batch.append(apply_augment(sample, params, self.config.augment.crop_size,
                                       self.config.augment.background_class))
        return indices, batch

    def _losses_and_grads(self, batch: List[Sample]) -> List[Tuple[float, Dict[str, np.ndarray]]]:
        def run(sample: Sample):
            try:
                return sample_loss(self.params, self.config, sample, self.matcher)
            except DomainError as exc:
                logger.error(f"non-finite value in sample forward/backward: {exc}")
                return float("nan"), {}

        if self.threads > 1 and len(batch) > 1:
            with ThreadPoolExecutor(max_workers=min(self.threads, len(batch))) as pool:
                return list(pool.map(run, batch))
        return [run(sample) for sample in batch]

    def _dump_nonfinite(self, iteration: int, indices: List[int], losses: List[float]) -> None:
        record = {"iteration": iteration, "batch_indices": indices,
                  "sample_losses": [v if math.isfinite(v) else None for v in losses]}
        if self.out_dir is not None:
            write_json(record, self.out_dir / "nonfinite_batch.json")
        logger.error(f"Non-finite loss at iteration {iteration}, batch {indices}")
        raise TrainingError("non-finite training loss", iteration=iteration,
                            batch_indices=indices)

    def step(self, iteration: int) -> Dict[str, Any]:
        indices, batch = self._batch()
        results = self._losses_and_grads(batch)
        losses = [loss for loss, _ in results]
        if not all(math.isfinite(v) for v in losses):
            self._dump_nonfinite(iteration, indices, losses)

        grads: Dict[str, np.ndarray] = {}
        for _, sample_grads in results:
            for name, grad in sample_grads.items():
                grads[name] = grad if name not in grads else grads[name] + grad
        grads = {name: g / len(batch) for name, g in grads.items()}
        record: Dict[str, Any] = {"iter": iteration + 1}
        if self.config.grad_clip > 0:
            record["grad_norm"] = clip_grad_norm(grads, self.config.grad_clip)

        lr = learning_rate(self.config, iteration)
        adamw_step(self.params, grads, self.state, lr, self.config.weight_decay,
                   lr_multipliers=self.lr_multipliers)
        record.update({"lr": lr, "loss": float(np.mean(losses))})
        return record

    def evaluate(self) -> Optional[MetricReport]:
        if not self.eval_samples:
            return None
        return evaluate_model(self.params, self.config.model, self.eval_samples,
                              strategy=self.config.eval_strategy)

    def _checkpoint(self, name: str, iteration: int) -> Optional[Path]:
        if self.out_dir is None:
            return None
        extra = {"train_config": self.config.to_dict(), "iteration": iteration,
                 "optimizer_step": self.state.step}
        return save_checkpoint(self.out_dir / name, self.params, self.config.model, extra)

    def run(self) -> TrainResult:
        cfg = self.config
        log_file = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            write_json(cfg.to_dict(), self.out_dir / "config.json")
            (self.out_dir / "config.cfg").write_text(format_flat_config(cfg.to_flat()),
                                                     encoding="utf-8")
            log_file = open(self.out_dir / "train_log.jsonl", "w", encoding="utf-8")
        logger.info(f"Training {cfg.model.head} ({cfg.objective}, matcher={cfg.matcher}) for "
                    f"{cfg.total_iters} iterations on {len(self.samples)} samples, "
                    f"{self.params.num_elements()} parameters, threads={self.threads}")
        try:
            for iteration in range(cfg.total_iters):
                record = self.step(iteration)
                done = iteration + 1
                if cfg.eval_every and done % cfg.eval_every == 0 and self.eval_samples:
                    report = self.evaluate()
                    record["eval"] = _eval_block(report)
                    logger.info(f"iter {done}: eval miou={report.miou} pq_st={report.pq}")
                if cfg.log_every and (done % cfg.log_every == 0 or done == 1):
                    logger.info(f"iter {done}/{cfg.total_iters} lr={record['lr']:.3e} "
                                f"loss={record['loss']:.4f}")
                if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                    self._checkpoint(f"checkpoint_{done:06d}.ckpt", done)
                schemas.validate(record, "train_log_record")
                self.log.append(record)
                if log_file is not None:
                    log_file.write(json.dumps(record, sort_keys=True) + "\n")
        finally:
            if log_file is not None:
                log_file.close()
        final = self._checkpoint("checkpoint_final.ckpt", cfg.total_iters)
        report = self.evaluate()
        return TrainResult(self.params, self.log, final, report)


def _eval_block(report: MetricReport) -> Dict[str, Any]:
    return {"miou": report.miou, "pq_st": report.pq, "pixel_accuracy": report.pixel_accuracy}


def train_loop(config: TrainConfig, samples: Sequence[Sample],
               out_dir: Optional[Union[str, Path]] = None,
               eval_samples: Optional[Sequence[Sample]] = None) -> TrainResult:
    return Trainer(config, samples, out_dir, eval_samples).run()


def predict_semantic(params: Params, model_config: ModelConfig, image: np.ndarray,
                     strategy: str = "semantic", conf_threshold: float = 0.3) -> np.ndarray:
    """Semantic label map of one image under the given inference strategy."""
    output = predict(image, params, model_config)
    if model_config.head != "maskformer":
        return np.argmax(output.data, axis=0).astype(np.int64) + 1
    if strategy == "semantic":
        return semantic_inference(output).labels
    config = InferenceConfig(conf_threshold=conf_threshold, task="semantic")
    return to_semantic(general_inference(output, config))


def evaluate_model(params: Params, model_config: ModelConfig, samples: Sequence[Sample],
                   strategy: str = "semantic", conf_threshold: float = 0.3) -> MetricReport:
    """mIoU, PQ^St and pixel accuracy of a model on labelled samples."""
    if strategy not in EVAL_STRATEGIES:
        raise ValueError(f"Unknown inference strategy: {strategy}")
    preds = [predict_semantic(params, model_config, s.image, strategy, conf_threshold)
             for s in samples]
    return evaluate_semantic(preds, [s.semantic for s in samples], model_config.num_classes)


def collect_query_class_stats(params: Params, model_config: ModelConfig,
                              samples: Sequence[Sample],
                              config: Optional[InferenceConfig] = None) -> Dict[str, Any]:
    """Run general inference over ``samples`` and count distinct classes per query slot."""
    if model_config.head != "maskformer":
        raise ConfigError("query statistics need the maskformer head")
    config = config or InferenceConfig()
    outputs = [general_inference(predict(s.image, params, model_config), config) for s in samples]
    return query_class_stats(outputs, model_config.num_queries)
