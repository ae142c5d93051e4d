"""
Mask classification network at toy scale.

Pixel-level module (strided conv backbone + FPN-style pixel decoder), a
transformer decoder over N learnable queries, and a segmentation head turning
per-segment embeddings into N probability-mask pairs. The per-pixel baselines
reuse the pixel-level module.
"""

import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import engine as E
from .engine import Tensor
from .errors import CheckpointError, ConfigError, ShapeError
from .utils import canonical_json

logger = logging.getLogger(__name__)

HEADS = ("maskformer", "per_pixel", "per_pixel_plus")
BACKBONE_PREFIX = "backbone."


@dataclass
class ModelConfig:
    """Network hyper-parameters.

    hidden_dim is the per-segment embedding width (C_Q), mask_dim the
    pixel/mask embedding width (C_E).
    """

    num_classes: int
    num_queries: int = 100
    decoder_layers: int = 6
    heads: int = 4
    hidden_dim: int = 64
    mask_dim: int = 64
    backbone_channels: Tuple[int, ...] = (16, 32, 64)
    image_size: Tuple[int, int] = (32, 32)
    use_self_attention: bool = True
    aux_loss_per_layer: bool = True
    ffn_multiplier: int = 4
    head: str = "maskformer"

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        self.image_size = tuple(int(s) for s in self.image_size)
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.num_queries < 1:
            raise ConfigError(f"num_queries must be >= 1, got {self.num_queries}")
        if self.decoder_layers < 1:
            raise ConfigError(f"decoder_layers must be >= 1, got {self.decoder_layers}")
        if self.heads < 1 or self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} is not divisible by heads {self.heads}")
        if self.hidden_dim % 4:
            raise ConfigError(f"hidden_dim must be a multiple of 4 for 2-d sine encodings, "
                              f"got {self.hidden_dim}")
        if self.mask_dim < 1 or self.ffn_multiplier < 1:
            raise ConfigError("mask_dim and ffn_multiplier must be positive")
        if not self.backbone_channels or min(self.backbone_channels) < 1:
            raise ConfigError(f"backbone_channels must be positive, got {self.backbone_channels}")
        if len(self.image_size) != 2:
            raise ConfigError(f"image_size must be (H, W), got {self.image_size}")
        check_divisible(self.image_size, self.stride)
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.head == "per_pixel_plus" and self.num_queries != self.num_classes:
            raise ConfigError(f"per_pixel_plus needs num_queries == num_classes "
                              f"({self.num_queries} != {self.num_classes})")

    @property
    def stride(self) -> int:
        return 2 ** len(self.backbone_channels)

    def to_dict(self) -> Dict[str, Any]:
        out = dataclasses.asdict(self)
        out["backbone_channels"] = list(self.backbone_channels)
        out["image_size"] = list(self.image_size)
        return out

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        return cls(**values)


def check_divisible(size: Sequence[int], stride: int) -> None:
    if any(s <= 0 or s % stride for s in size):
        raise ConfigError(f"image size {tuple(size)} is not divisible by the backbone stride {stride}")


class Params(dict):
    """Named parameter tensors, in creation order."""

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in self.items():
            digest.update(name.encode("utf-8"))
            digest.update(np.asarray(tensor.shape, dtype="<i8").tobytes())
            digest.update(tensor.data.astype("<f8").tobytes())
        return digest.hexdigest()

    def num_elements(self) -> int:
        return int(sum(t.size for t in self.values()))

    def zero_grad(self) -> None:
        for tensor in self.values():
            tensor.zero_grad()

    def is_backbone(self, name: str) -> bool:
        return name.startswith(BACKBONE_PREFIX)


@dataclass
class PredictionSet:
    """N probability-mask pairs, optionally with the earlier decoder layers' sets.

    class_probs is (N, K+1) with the last column the no-object slot; mask_probs
    is (N, H, W). Masks may overlap.
    """

    class_probs: Tensor
    mask_probs: Tensor
    class_logits: Optional[Tensor] = None
    mask_logits: Optional[Tensor] = None
    aux: List["PredictionSet"] = field(default_factory=list)

    @property
    def num_queries(self) -> int:
        return self.class_probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_probs.shape[1] - 1

    @property
    def mask_shape(self) -> Tuple[int, int]:
        return self.mask_probs.shape[1], self.mask_probs.shape[2]

    def layers(self) -> List["PredictionSet"]:
        """Per-layer prediction sets, final layer last."""
        return [*self.aux, self]

    @classmethod
    def from_arrays(cls, class_probs: np.ndarray, mask_probs: np.ndarray) -> "PredictionSet":
        class_probs = np.asarray(class_probs, dtype=np.float64)
        mask_probs = np.asarray(mask_probs, dtype=np.float64)
        if class_probs.ndim != 2 or mask_probs.ndim != 3 or \
                class_probs.shape[0] != mask_probs.shape[0]:
            raise ShapeError(f"prediction set needs (N, K+1) and (N, H, W) arrays, "
                             f"got {class_probs.shape} and {mask_probs.shape}")
        return cls(Tensor(class_probs), Tensor(mask_probs))


# ----------------------------------------------------------------------------
# parameters

def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, seed: int) -> Params:
    """Deterministic parameter initialization.

    Weights are fan-in scaled uniform, biases and norm shifts zero, norm gains
    one, query content embeddings zero, query positional embeddings standard
    normal.
    """
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    params = Params()

    def add(name: str, value: np.ndarray) -> None:
        params[name] = Tensor(value, requires_grad=True, copy=False)

    def linear(name: str, fan_in: int, fan_out: int) -> None:
        add(f"{name}.weight", _uniform(rng, (fan_in, fan_out), fan_in))
        add(f"{name}.bias", np.zeros(fan_out))

    def conv(name: str, out_ch: int, in_ch: int, k: int) -> None:
        add(f"{name}.weight", _uniform(rng, (out_ch, in_ch, k, k), in_ch * k * k))
        add(f"{name}.bias", np.zeros(out_ch))

    def norm(name: str, width: int) -> None:
        add(f"{name}.gamma", np.ones(width))
        add(f"{name}.beta", np.zeros(width))

    c_q, c_e = config.hidden_dim, config.mask_dim
    channels = config.backbone_channels

    previous = 3
    for i, ch in enumerate(channels):
        conv(f"backbone.{i}", ch, previous, 3)
        previous = ch

    for i, ch in enumerate(channels):
        conv(f"pixel_decoder.lateral.{i}", c_e, ch, 1)
    for name in [*(str(i) for i in range(len(channels) - 1)), "out"]:
        conv(f"pixel_decoder.fuse.{name}", c_e, c_e, 3)
        norm(f"pixel_decoder.fuse.{name}.norm", c_e)
    conv("pixel_decoder.mask_proj", c_e, c_e, 1)

    if config.head in ("maskformer", "per_pixel_plus"):
        linear("decoder.input_proj", channels[-1], c_q)
        add("decoder.query_content", np.zeros((config.num_queries, c_q)))
        add("decoder.query_pos", rng.standard_normal((config.num_queries, c_q)))
        for layer in range(config.decoder_layers):
            prefix = f"decoder.{layer}"
            attention_blocks = ["cross_attn"]
            if config.use_self_attention:
                attention_blocks.insert(0, "self_attn")
            for block in attention_blocks:
                for proj in ("q", "k", "v", "o"):
                    linear(f"{prefix}.{block}.{proj}", c_q, c_q)
                norm(f"{prefix}.{block}.norm", c_q)
            linear(f"{prefix}.ffn.0", c_q, config.ffn_multiplier * c_q)
            linear(f"{prefix}.ffn.1", config.ffn_multiplier * c_q, c_q)
            norm(f"{prefix}.ffn.norm", c_q)
        if config.head == "maskformer":
            linear("head.class", c_q, config.num_classes + 1)
        linear("head.mask_mlp.0", c_q, c_q)
        linear("head.mask_mlp.1", c_q, c_q)
        linear("head.mask_mlp.2", c_q, c_e)

    if config.head == "per_pixel":
        conv("per_pixel.classifier", config.num_classes, c_e, 1)

    logger.debug(f"Initialized {len(params)} tensors ({params.num_elements()} values), seed={seed}")
    return params


def permute_queries(params: Params, order: Sequence[int]) -> Params:
    """Copy of params with the query slots (content + position) reordered."""
    order = np.asarray(order, dtype=np.int64)
    out = Params(params)
    for name in ("decoder.query_content", "decoder.query_pos"):
        source = params[name]
        if sorted(order.tolist()) != list(range(source.shape[0])):
            raise ShapeError(f"query order must be a permutation of {source.shape[0]} slots")
        out[name] = Tensor(source.data[order], requires_grad=source.requires_grad)
    return out


# ----------------------------------------------------------------------------
# building blocks

def _linear(x: Tensor, params: Params, name: str) -> Tensor:
    return E.broadcast_add_bias(E.matmul(x, params[f"{name}.weight"]), params[f"{name}.bias"], axis=-1)


def _conv(x: Tensor, params: Params, name: str, stride: int = 1) -> Tensor:
    out = E.conv2d(x, params[f"{name}.weight"], stride=stride)
    return E.broadcast_add_bias(out, params[f"{name}.bias"], axis=1)


def _token_norm(x: Tensor, params: Params, name: str) -> Tensor:
    out = E.mul(E.layer_norm(x, axis=-1), params[f"{name}.gamma"])
    return E.broadcast_add_bias(out, params[f"{name}.beta"], axis=-1)


def _channel_norm(x: Tensor, params: Params, name: str) -> Tensor:
    gamma = params[f"{name}.gamma"]
    out = E.mul(E.layer_norm(x, axis=1), E.reshape(gamma, (1, gamma.shape[0], 1, 1)))
    return E.broadcast_add_bias(out, params[f"{name}.beta"], axis=1)


def _fuse(x: Tensor, params: Params, name: str) -> Tensor:
    return E.relu(_channel_norm(_conv(x, params, name), params, f"{name}.norm"))


def sine_position_encoding(height: int, width: int, dim: int,
                           temperature: float = 10000.0) -> np.ndarray:
    """Fixed 2-d sinusoidal encodings, (height * width, dim), row-major positions."""
    if dim % 4:
        raise ConfigError(f"sine encoding width must be a multiple of 4, got {dim}")
    half = dim // 2
    dim_t = temperature ** (2 * (np.arange(half) // 2) / half)

    def encode(length: int) -> np.ndarray:
        positions = (np.arange(length) + 0.5) / length * 2 * math.pi
        raw = positions[:, None] / dim_t
        out = np.empty_like(raw)
        out[:, 0::2] = np.sin(raw[:, 0::2])
        out[:, 1::2] = np.cos(raw[:, 1::2])
        return out

    pos_y, pos_x = encode(height), encode(width)
    grid = np.concatenate([np.repeat(pos_y, width, axis=0), np.tile(pos_x, (height, 1))], axis=1)
    return grid


def _attention(params: Params, name: str, query: Tensor, key: Tensor, value: Tensor,
               heads: int) -> Tensor:
    q = _linear(query, params, f"{name}.q")
    k = _linear(key, params, f"{name}.k")
    v = _linear(value, params, f"{name}.v")
    n, width = q.shape
    s = k.shape[0]
    d = width // heads
    qh = E.transpose(E.reshape(q, (n, heads, d)), (1, 0, 2))
    kh = E.transpose(E.reshape(k, (s, heads, d)), (1, 2, 0))
    vh = E.transpose(E.reshape(v, (s, heads, d)), (1, 0, 2))
    weights = E.softmax(E.scale(E.matmul(qh, kh), 1.0 / math.sqrt(d)), axis=-1)
    mixed = E.reshape(E.transpose(E.matmul(weights, vh), (1, 0, 2)), (n, width))
    return _linear(mixed, params, f"{name}.o")


def _image_tensor(image: Union[np.ndarray, Tensor], config: ModelConfig) -> Tensor:
    image = E.as_tensor(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"image must be (H, W, 3), got {image.shape}")
    check_divisible(image.shape[:2], config.stride)
    h, w = image.shape[:2]
    return E.reshape(E.transpose(image, (2, 0, 1)), (1, 3, h, w))


# ----------------------------------------------------------------------------
# the three modules

def pixel_module_forward(image: Union[np.ndarray, Tensor], params: Params,
                         config: ModelConfig) -> Tuple[Tensor, Tensor]:
    """Backbone + pixel decoder.

    Returns:
        F, the coarsest backbone map (C_last, H/s, W/s), and E_pixel (C_E, H, W)
    """
    x = _image_tensor(image, config)
    features = []
    for i in range(len(config.backbone_channels)):
        x = E.relu(_conv(x, params, f"backbone.{i}", stride=2))
        features.append(x)

    y = _conv(features[-1], params, f"pixel_decoder.lateral.{len(features) - 1}")
    for i in reversed(range(len(features) - 1)):
        lateral = _conv(features[i], params, f"pixel_decoder.lateral.{i}")
        y = _fuse(E.add(E.upsample_nearest_2x(y), lateral), params, f"pixel_decoder.fuse.{i}")
    y = _fuse(E.upsample_nearest_2x(y), params, "pixel_decoder.fuse.out")
    e_pixel = _conv(y, params, "pixel_decoder.mask_proj")

    coarse = features[-1]
    return (E.reshape(coarse, coarse.shape[1:]), E.reshape(e_pixel, e_pixel.shape[1:]))


def transformer_decoder_forward(feature_map: Tensor, params: Params,
                                config: ModelConfig) -> List[Tensor]:
    """Run the query decoder over the flattened feature map.

    Returns:
        One (C_Q, N) tensor of per-segment embeddings per decoder layer
    """
    channels, h, w = feature_map.shape
    tokens = E.transpose(E.reshape(feature_map, (channels, h * w)))
    memory = E.add(_linear(tokens, params, "decoder.input_proj"),
                   sine_position_encoding(h, w, config.hidden_dim))

    target = params["decoder.query_content"]
    query_pos = params["decoder.query_pos"]
    outputs = []
    for layer in range(config.decoder_layers):
        prefix = f"decoder.{layer}"
        if config.use_self_attention:
            qk = E.add(target, query_pos)
            attended = _attention(params, f"{prefix}.self_attn", qk, qk, target, config.heads)
            target = _token_norm(E.add(target, attended), params, f"{prefix}.self_attn.norm")
        attended = _attention(params, f"{prefix}.cross_attn", E.add(target, query_pos),
                              memory, memory, config.heads)
        target = _token_norm(E.add(target, attended), params, f"{prefix}.cross_attn.norm")
        hidden = E.relu(_linear(target, params, f"{prefix}.ffn.0"))
        target = _token_norm(E.add(target, _linear(hidden, params, f"{prefix}.ffn.1")),
                             params, f"{prefix}.ffn.norm")
        outputs.append(E.transpose(target))
    return outputs


def mask_embedding(queries: Tensor, params: Params) -> Tensor:
    """E_mask = MLP(Q) with two hidden layers, (N, C_Q) -> (N, C_E)."""
    hidden = E.relu(_linear(queries, params, "head.mask_mlp.0"))
    hidden = E.relu(_linear(hidden, params, "head.mask_mlp.1"))
    return _linear(hidden, params, "head.mask_mlp.2")


def _mask_logits(e_mask: Tensor, e_pixel: Tensor) -> Tensor:
    c_e, h, w = e_pixel.shape
    flat = E.matmul(e_mask, E.reshape(e_pixel, (c_e, h * w)))
    return E.reshape(flat, (e_mask.shape[0], h, w))


def segmentation_head(q_final: Tensor, e_pixel: Tensor, params: Params) -> PredictionSet:
    """Classifier + mask embedding, producing one PredictionSet."""
    queries = E.transpose(q_final)
    class_logits = _linear(queries, params, "head.class")
    mask_logits = _mask_logits(mask_embedding(queries, params), e_pixel)
    return PredictionSet(class_probs=E.softmax(class_logits, axis=-1),
                         mask_probs=E.sigmoid(mask_logits),
                         class_logits=class_logits,
                         mask_logits=mask_logits)


def per_pixel_baseline_forward(image: Union[np.ndarray, Tensor], params: Params,
                               config: ModelConfig) -> Tensor:
    """Per-pixel class scores (K, H, W) of PerPixelBaseline or PerPixelBaseline+."""
    feature_map, e_pixel = pixel_module_forward(image, params, config)
    if config.head == "per_pixel":
        c_e, h, w = e_pixel.shape
        scores = _conv(E.reshape(e_pixel, (1, c_e, h, w)), params, "per_pixel.classifier")
        return E.reshape(scores, scores.shape[1:])
    if config.head == "per_pixel_plus":
        q_final = transformer_decoder_forward(feature_map, params, config)[-1]
        return _mask_logits(mask_embedding(E.transpose(q_final), params), e_pixel)
    raise ConfigError(f"head {config.head!r} has no per-pixel scores")


def forward(image: Union[np.ndarray, Tensor], params: Params,
            config: ModelConfig) -> Union[PredictionSet, Tensor]:
    """Full network: a PredictionSet for maskformer, (K, H, W) scores otherwise."""
    if config.head != "maskformer":
        return per_pixel_baseline_forward(image, params, config)
    feature_map, e_pixel = pixel_module_forward(image, params, config)
    per_layer = transformer_decoder_forward(feature_map, params, config)
    prediction = segmentation_head(per_layer[-1], e_pixel, params)
    if config.aux_loss_per_layer:
        prediction.aux = [segmentation_head(q, e_pixel, params) for q in per_layer[:-1]]
    return prediction


def predict(image: Union[np.ndarray, Tensor], params: Params,
            config: ModelConfig) -> Union[PredictionSet, Tensor]:
    """forward() without graph recording and without auxiliary layers."""
    with E.no_grad():
        if config.head != "maskformer":
            return per_pixel_baseline_forward(image, params, config)
        feature_map, e_pixel = pixel_module_forward(image, params, config)
        q_final = transformer_decoder_forward(feature_map, params, config)[-1]
        return segmentation_head(q_final, e_pixel, params)


# ----------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"MCLSCKPT"
CHECKPOINT_VERSION = 1
_DIGEST_BYTES = 32


def save_checkpoint(path: Union[str, Path], params: Params, config: ModelConfig,
                    extra: Optional[Dict[str, Any]] = None) -> Path:
    """Write params with a config echo, little-endian f64 payloads and a SHA-256 trailer."""
    index, payloads, offset = [], [], 0
    for name, tensor in params.items():
        raw = np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(tensor.shape), "offset": offset,
                      "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = canonical_json({"version": CHECKPOINT_VERSION, "config": config.to_dict(),
                             "extra": extra or {}, "tensors": index}).encode("utf-8")
    body = b"".join([CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)),
                     header, *payloads])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + hashlib.sha256(body).digest())
    logger.info(f"Wrote checkpoint {path} ({len(params)} tensors)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Params, ModelConfig, Dict[str, Any]]:
    """Read a checkpoint written by save_checkpoint.

    Returns:
        (params, model config, extra metadata)
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    prefix = len(CHECKPOINT_MAGIC) + 8
    if len(blob) < prefix + _DIGEST_BYTES or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a maskcls checkpoint")
    body, digest = blob[:-_DIGEST_BYTES], blob[-_DIGEST_BYTES:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"checksum mismatch in {path}")
    version, header_len = struct.unpack("<II", body[len(CHECKPOINT_MAGIC):prefix])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} in {path}")
    header = json.loads(body[prefix:prefix + header_len].decode("utf-8"))
    payload = body[prefix + header_len:]
    params = Params()
    for entry in header["tensors"]:
        start = entry["offset"]
        raw = payload[start:start + entry["nbytes"]]
        values = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])
        params[entry["name"]] = Tensor(values, requires_grad=True)
    return params, ModelConfig.from_dict(header["config"]), header.get("extra", {})
