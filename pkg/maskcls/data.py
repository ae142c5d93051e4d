"""
Synthetic many-class scenes, ground-truth segment sets and the dataset directory format.

Every foreground class is a (shape kind, palette entry) pair, so the class
count scales to several hundred while staying visually separable. Circles,
rectangles and triangles are things (one segment per instance); stripes and
the background are stuff (one segment per class and image).
"""

import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageColor, ImageDraw

from .errors import ConfigError, DatasetError, ShapeError
from .utils import canonical_json, sha256_bytes, sha256_file, write_json

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("circle", "rectangle", "triangle", "stripe")
THING_KINDS = ("circle", "rectangle", "triangle")
TEXTURES = ("solid", "checker", "gradient")
MAX_PALETTE = 128
BACKGROUND_RGB = (0.18, 0.18, 0.2)

DATASET_VERSION = 1
MANIFEST = "manifest.json"
DATASET_KINDS = ("ground_truth", "prediction")


# ----------------------------------------------------------------------------
# ground truth

@dataclass
class GroundTruth:
    """Segment set z_gt: class ids (M,) and disjoint binary masks (M, H, W)."""

    classes: np.ndarray
    masks: np.ndarray
    is_thing: Optional[np.ndarray] = None

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 3 or self.masks.shape[0] != self.classes.shape[0]:
            raise ShapeError(f"ground truth needs (M,) classes and (M, H, W) masks, "
                             f"got {self.classes.shape} and {self.masks.shape}")
        if self.is_thing is None:
            self.is_thing = np.zeros(self.classes.shape[0], dtype=bool)
        self.is_thing = np.asarray(self.is_thing, dtype=bool).reshape(-1)

    @property
    def num_segments(self) -> int:
        return int(self.classes.shape[0])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.masks.shape[1], self.masks.shape[2]

    @classmethod
    def from_semantic(cls, labels: np.ndarray,
                      thing_classes: Sequence[int] = ()) -> "GroundTruth":
        """One segment per class present (VOID = 0 skipped), ascending class id."""
        labels = np.asarray(labels, dtype=np.int64)
        present = [int(c) for c in np.unique(labels) if c != 0]
        masks = np.stack([labels == c for c in present]) if present else \
            np.zeros((0, *labels.shape), dtype=bool)
        return cls(np.array(present, dtype=np.int64), masks,
                   np.array([c in set(thing_classes) for c in present], dtype=bool))

    @classmethod
    def from_panoptic(cls, segment_ids: np.ndarray,
                      segments: Sequence["SegmentInfo"]) -> "GroundTruth":
        segment_ids = np.asarray(segment_ids, dtype=np.int64)
        kept = [s for s in segments if s.area > 0]
        masks = np.stack([segment_ids == s.id for s in kept]) if kept else \
            np.zeros((0, *segment_ids.shape), dtype=bool)
        return cls(np.array([s.class_id for s in kept], dtype=np.int64), masks,
                   np.array([s.is_thing for s in kept], dtype=bool))


@dataclass
class SegmentInfo:
    id: int
    class_id: int
    is_thing: bool
    area: int

    def to_dict(self) -> Dict[str, Any]:
        return {"id": int(self.id), "class_id": int(self.class_id),
                "is_thing": bool(self.is_thing), "area": int(self.area)}

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "SegmentInfo":
        return cls(int(values["id"]), int(values["class_id"]), bool(values["is_thing"]),
                   int(values["area"]))


@dataclass
class Sample:
    """One image with semantic and panoptic labels.

    image is (H, W, 3) in [0, 1]; semantic holds class ids; panoptic holds
    segment ids described by ``segments``. Prediction samples may contain
    VOID (0) in both maps.
    """

    image: np.ndarray
    semantic: np.ndarray
    panoptic: np.ndarray
    segments: List[SegmentInfo]
    index: int = -1

    @property
    def shape(self) -> Tuple[int, int]:
        return self.semantic.shape[0], self.semantic.shape[1]

    def targets(self, task: str = "semantic") -> GroundTruth:
        """Ground-truth segment set for ``task`` (semantic, panoptic or instance)."""
        if task == "semantic":
            things = {s.class_id for s in self.segments if s.is_thing}
            return GroundTruth.from_semantic(self.semantic, sorted(things))
        if task in ("panoptic", "instance"):
            return GroundTruth.from_panoptic(self.panoptic, self.segments)
        raise ValueError(f"Unknown task: {task}")

    def check(self) -> None:
        """Raise DatasetError unless the segments partition the image consistently."""
        h, w = self.shape
        if self.image.shape != (h, w, 3) or self.panoptic.shape != (h, w):
            raise DatasetError(f"sample {self.index}: inconsistent array shapes")
        ids = [s.id for s in self.segments]
        if len(set(ids)) != len(ids) or 0 in ids:
            raise DatasetError(f"sample {self.index}: segment ids must be unique and nonzero")
        by_id = {s.id: s for s in self.segments}
        present, counts = np.unique(self.panoptic, return_counts=True)
        pixel_counts = dict(zip(present.tolist(), counts.tolist()))
        undeclared = sorted(set(pixel_counts) - set(by_id))
        if undeclared:
            raise DatasetError(f"sample {self.index}: pixels carry undeclared segments {undeclared}")
        for seg_id, segment in by_id.items():
            if segment.area != pixel_counts.get(seg_id, 0):
                raise DatasetError(f"sample {self.index}: segment {seg_id} area "
                                   f"{segment.area} != {pixel_counts.get(seg_id, 0)} pixels")
        lookup = np.zeros(max(ids, default=0) + 1, dtype=np.int64)
        for s in self.segments:
            lookup[s.id] = s.class_id
        if not np.array_equal(lookup[self.panoptic], self.semantic):
            raise DatasetError(f"sample {self.index}: semantic map disagrees with panoptic map")
        stuff_classes = [s.class_id for s in self.segments if not s.is_thing and s.area > 0]
        if len(set(stuff_classes)) != len(stuff_classes):
            raise DatasetError(f"sample {self.index}: stuff class split over several segments")


# ----------------------------------------------------------------------------
# scene generation

@dataclass
class SceneConfig:
    num_classes: int = 16
    shapes_per_image: Tuple[int, int] = (1, 4)
    image_size: Tuple[int, int] = (32, 32)
    shape_size: Tuple[int, int] = (8, 18)
    background_class: int = 1
    palette_size: Optional[int] = None
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.shapes_per_image = tuple(int(v) for v in self.shapes_per_image)
        self.image_size = tuple(int(v) for v in self.image_size)
        self.shape_size = tuple(int(v) for v in self.shape_size)
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        lo, hi = self.shapes_per_image
        if lo < 0 or hi < lo:
            raise ConfigError(f"shapes_per_image must be a range lo <= hi, got {self.shapes_per_image}")
        if min(self.image_size) < 4 or len(self.image_size) != 2:
            raise ConfigError(f"image_size too small: {self.image_size}")
        if self.shape_size[0] < 2 or self.shape_size[1] < self.shape_size[0]:
            raise ConfigError(f"shape_size must be a range 2 <= lo <= hi, got {self.shape_size}")
        if not 1 <= self.background_class <= self.num_classes:
            raise ConfigError(f"background_class {self.background_class} outside 1..{self.num_classes}")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        palette = self.palette_entries
        if palette > MAX_PALETTE or len(SHAPE_KINDS) * palette + 1 < self.num_classes:
            raise ConfigError(f"{self.num_classes} classes exceed the scheme capacity "
                              f"({len(SHAPE_KINDS)} kinds x {min(palette, MAX_PALETTE)} palette "
                              f"entries + background)")

    @property
    def palette_entries(self) -> int:
        if self.palette_size is not None:
            return int(self.palette_size)
        return math.ceil((self.num_classes - 1) / len(SHAPE_KINDS))

    def class_scheme(self) -> Dict[int, Tuple[str, int]]:
        """Foreground class id -> (shape kind, palette index), kinds varying fastest."""
        foreground = [c for c in range(1, self.num_classes + 1) if c != self.background_class]
        return {class_id: (SHAPE_KINDS[i % len(SHAPE_KINDS)], i // len(SHAPE_KINDS))
                for i, class_id in enumerate(foreground)}

    @property
    def thing_classes(self) -> Tuple[int, ...]:
        return tuple(c for c, (kind, _) in self.class_scheme().items() if kind in THING_KINDS)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def palette_colour(index: int) -> np.ndarray:
    """Well-spread RGB colour in [0, 1] for palette entry ``index``."""
    hue = int(round((index * 137.508) % 360))
    saturation = (90, 65, 45)[index % 3]
    value = (95, 75)[(index // 3) % 2]
    rgb = ImageColor.getrgb(f"hsv({hue},{saturation}%,{value}%)")
    return np.asarray(rgb[:3], dtype=np.float64) / 255.0


def _texture(colour: np.ndarray, texture: str, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    if texture == "checker":
        shade = 0.7 + 0.3 * (((yy // 2) + (xx // 2)) % 2)
    elif texture == "gradient":
        shade = 0.55 + 0.45 * xx / max(width - 1, 1)
    else:
        shade = np.ones((height, width))
    return shade[..., None] * colour


def _shape_mask(kind: str, rng: np.random.Generator, height: int, width: int,
                size_range: Tuple[int, int]) -> np.ndarray:
    canvas = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    size = int(rng.integers(size_range[0], size_range[1] + 1))
    cx = int(rng.integers(0, width))
    cy = int(rng.integers(0, height))
    half = size / 2.0
    if kind == "circle":
        draw.ellipse([cx - half, cy - half, cx + half, cy + half], fill=1)
    elif kind == "rectangle":
        aspect = rng.uniform(0.5, 2.0)
        hw, hh = half * math.sqrt(aspect), half / math.sqrt(aspect)
        draw.rectangle([cx - hw, cy - hh, cx + hw, cy + hh], fill=1)
    elif kind == "triangle":
        direction = 1 if rng.random() < 0.5 else -1
        draw.polygon([(cx, cy - direction * half), (cx - half, cy + direction * half),
                      (cx + half, cy + direction * half)], fill=1)
    elif kind == "stripe":
        thickness = max(2, size // 4)
        if rng.random() < 0.5:
            draw.rectangle([0, cy - thickness // 2, width - 1, cy + (thickness - 1) // 2], fill=1)
        else:
            draw.rectangle([cx - thickness // 2, 0, cx + (thickness - 1) // 2, height - 1], fill=1)
    else:
        raise ValueError(f"Unknown shape kind: {kind}")
    return np.asarray(canvas, dtype=np.uint8) > 0


def generate_scene(cfg: SceneConfig, index: int) -> Sample:
    """Deterministic scene number ``index``: later shapes occlude earlier ones."""
    rng = np.random.default_rng([int(cfg.seed) & 0xFFFFFFFFFFFFFFFF, int(index)])
    h, w = cfg.image_size
    scheme = cfg.class_scheme()
    foreground = sorted(scheme)

    image = _texture(np.asarray(BACKGROUND_RGB), "solid", h, w)
    owner = np.zeros((h, w), dtype=np.int64)
    owner_class = [cfg.background_class]
    lo, hi = cfg.shapes_per_image
    for _ in range(int(rng.integers(lo, hi + 1))):
        class_id = int(foreground[int(rng.integers(0, len(foreground)))])
        kind, palette_index = scheme[class_id]
        mask = _shape_mask(kind, rng, h, w, cfg.shape_size)
        if not mask.any():
            continue
        texture = _texture(palette_colour(palette_index), TEXTURES[palette_index % len(TEXTURES)],
                           h, w)
        image[mask] = texture[mask]
        owner[mask] = len(owner_class)
        owner_class.append(class_id)
    if cfg.noise > 0:
        image = image + rng.normal(0.0, cfg.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)

    things = set(cfg.thing_classes)
    semantic = np.asarray(owner_class, dtype=np.int64)[owner]
    panoptic = np.zeros((h, w), dtype=np.int64)
    segments: List[SegmentInfo] = []
    stuff_ids: Dict[int, int] = {}
    for owner_id in np.unique(owner).tolist():
        class_id = owner_class[owner_id]
        is_thing = owner_id != 0 and class_id in things
        if not is_thing and class_id in stuff_ids:
            seg_id = stuff_ids[class_id]
        else:
            seg_id = len(segments) + 1
            segments.append(SegmentInfo(seg_id, class_id, is_thing, 0))
            if not is_thing:
                stuff_ids[class_id] = seg_id
        panoptic[owner == owner_id] = seg_id
    _refresh_areas(panoptic, segments)
    return Sample(image, semantic, panoptic, segments, index=int(index))


def generate_dataset(cfg: SceneConfig, count: int, start: int = 0) -> List[Sample]:
    if count < 0:
        raise ConfigError(f"count must be >= 0, got {count}")
    logger.info(f"Generating {count} scenes with {cfg.num_classes} classes at {cfg.image_size}")
    return [generate_scene(cfg, start + i) for i in range(count)]


def _refresh_areas(panoptic: np.ndarray, segments: List[SegmentInfo]) -> List[SegmentInfo]:
    counts = np.bincount(panoptic.reshape(-1), minlength=max((s.id for s in segments), default=0) + 1)
    for segment in segments:
        segment.area = int(counts[segment.id])
    return segments


# ----------------------------------------------------------------------------
# on-disk format

@dataclass
class Dataset:
    """Loaded dataset directory."""

    samples: List[Sample]
    num_classes: int
    thing_classes: Tuple[int, ...] = ()
    kind: str = "ground_truth"
    path: Optional[Path] = None
    scene_config: Optional[Dict[str, Any]] = None

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> Sample:
        return self.samples[index]

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.samples[0].shape if self.samples else (0, 0)

    @property
    def background_class(self) -> int:
        """Class that padding takes during augmentation; 1 unless the scene config says otherwise."""
        return int((self.scene_config or {}).get("background_class", 1))


def _png_bytes(array: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(array).save(buffer, format="PNG")
    return buffer.getvalue()


def _label_png(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise DatasetError("label values must fit in 16 bits")
    return _png_bytes(labels.astype(np.uint16))


def quantize_image(image: np.ndarray) -> np.ndarray:
    """Image in [0, 1] to the stored 8-bit form."""
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_dataset(samples: Sequence[Sample], directory: Union[str, Path], num_classes: int,
                 thing_classes: Sequence[int] = (), kind: str = "ground_truth",
                 scene_config: Optional[Dict[str, Any]] = None) -> Path:
    """Write samples as PNGs plus segment tables and a checksummed manifest.

    Images are stored as 8-bit RGB (value = round(255 * x)); label maps as
    16-bit grayscale PNGs, so labels round-trip exactly.
    """
    if kind not in DATASET_KINDS:
        raise ValueError(f"Unknown dataset kind: {kind}")
    directory = Path(directory)
    for sub in ("images", "semantic", "panoptic", "segments"):
        (directory / sub).mkdir(parents=True, exist_ok=True)

    entries = []
    for position, sample in enumerate(samples):
        if kind == "ground_truth":
            sample.check()
        name = f"{position:06d}"
        files = {
            "image": (f"images/{name}.png", _png_bytes(quantize_image(sample.image))),
            "semantic": (f"semantic/{name}.png", _label_png(sample.semantic)),
            "panoptic": (f"panoptic/{name}.png", _label_png(sample.panoptic)),
            "segments": (f"segments/{name}.json",
                         (canonical_json({"segments": [s.to_dict() for s in sample.segments]})
                          + "\n").encode("utf-8")),
        }
        entry: Dict[str, Any] = {"name": name, "index": int(sample.index), "checksums": {}}
        for key, (relative, payload) in files.items():
            (directory / relative).write_bytes(payload)
            entry[key] = relative
            entry["checksums"][key] = sha256_bytes(payload)
        entries.append(entry)

    manifest: Dict[str, Any] = {
        "version": DATASET_VERSION,
        "kind": kind,
        "num_classes": int(num_classes),
        "thing_classes": sorted(int(c) for c in thing_classes),
        "image_size": list(samples[0].shape) if samples else [0, 0],
        "count": len(entries),
        "scene_config": scene_config,
        "samples": entries,
    }
    manifest["index_checksum"] = sha256_bytes(canonical_json(manifest).encode("utf-8"))
    write_json(manifest, directory / MANIFEST)
    logger.info(f"Saved {len(entries)} samples to {directory}")
    return directory


def _read_label_png(path: Path) -> np.ndarray:
    with Image.open(path) as handle:
        return np.asarray(handle, dtype=np.int64)


def load_dataset(directory: Union[str, Path]) -> Dataset:
    """Read a dataset directory, verifying the manifest and every file checksum."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetError("missing manifest", path=manifest_path) from None
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"unreadable manifest ({exc})", path=manifest_path) from exc

    if manifest.get("version") != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {manifest.get('version')!r}",
                           path=manifest_path)
    claimed = manifest.pop("index_checksum", None)
    if claimed != sha256_bytes(canonical_json(manifest).encode("utf-8")):
        raise DatasetError("manifest checksum mismatch", path=manifest_path)
    entries = manifest.get("samples", [])
    if manifest.get("count") != len(entries):
        raise DatasetError("manifest sample count disagrees with its entries", path=manifest_path)

    samples = []
    for entry in entries:
        for key in ("image", "semantic", "panoptic", "segments"):
            path = directory / entry[key]
            if not path.is_file():
                raise DatasetError("missing file", path=path)
            if sha256_file(path) != entry["checksums"][key]:
                raise DatasetError("checksum mismatch", path=path)
        with Image.open(directory / entry["image"]) as handle:
            image = np.asarray(handle.convert("RGB"), dtype=np.float64) / 255.0
        table = json.loads((directory / entry["segments"]).read_text(encoding="utf-8"))
        sample = Sample(image=image,
                        semantic=_read_label_png(directory / entry["semantic"]),
                        panoptic=_read_label_png(directory / entry["panoptic"]),
                        segments=[SegmentInfo.from_dict(s) for s in table["segments"]],
                        index=int(entry.get("index", -1)))
        if manifest.get("kind") == "ground_truth":
            try:
                sample.check()
            except DatasetError as exc:
                raise DatasetError(str(exc), path=directory / entry["segments"]) from None
        samples.append(sample)
    logger.info(f"Loaded {len(samples)} samples from {directory}")
    return Dataset(samples=samples,
                   num_classes=int(manifest["num_classes"]),
                   thing_classes=tuple(manifest.get("thing_classes", [])),
                   kind=manifest.get("kind", "ground_truth"),
                   path=directory,
                   scene_config=manifest.get("scene_config"))


# ----------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentConfig:
    scale_range: Tuple[float, float] = (0.5, 2.0)
    flip_prob: float = 0.5
    crop_size: Optional[Tuple[int, int]] = None
    brightness: float = 0.1
    contrast: float = 0.1
    enabled: bool = True
    background_class: int = 1

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)
        if self.crop_size is not None:
            self.crop_size = tuple(int(v) for v in self.crop_size)
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise ConfigError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.brightness < 0 or not 0 <= self.contrast < 1:
            raise ConfigError("brightness must be >= 0 and contrast in [0, 1)")
        if self.background_class < 1:
            raise ConfigError(f"background_class must be >= 1, got {self.background_class}")


@dataclass
class AugmentParams:
    """One concrete draw of the augmentation pipeline.

    crop_offset is (top, left) in the scaled and padded frame; None centers
    the crop.
    """

    scale: float = 1.0
    flip: bool = False
    crop_offset: Optional[Tuple[int, int]] = None
    brightness: float = 0.0
    contrast: float = 1.0

    @property
    def jitters_colour(self) -> bool:
        return self.brightness != 0.0 or self.contrast != 1.0


def _scaled_size(size: Tuple[int, int], scale: float) -> Tuple[int, int]:
    return max(1, int(round(size[0] * scale))), max(1, int(round(size[1] * scale)))


def sample_augment_params(shape: Tuple[int, int], cfg: AugmentConfig,
                          rng: np.random.Generator) -> AugmentParams:
    """Draw scale, flip, crop and colour jitter in that order."""
    if not cfg.enabled:
        return AugmentParams()
    crop = cfg.crop_size or tuple(shape)
    scale = float(rng.uniform(*cfg.scale_range))
    flip = bool(rng.random() < cfg.flip_prob)
    sh, sw = _scaled_size(shape, scale)
    ph, pw = max(sh, crop[0]), max(sw, crop[1])
    offset = (int(rng.integers(0, ph - crop[0] + 1)), int(rng.integers(0, pw - crop[1] + 1)))
    brightness = float(rng.uniform(-cfg.brightness, cfg.brightness)) if cfg.brightness else 0.0
    contrast = float(rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)) if cfg.contrast else 1.0
    return AugmentParams(scale, flip, offset, brightness, contrast)


def _nearest_indices(source: int, target: int, scale: float) -> np.ndarray:
    return np.clip(np.floor((np.arange(target) + 0.5) / scale).astype(np.int64), 0, source - 1)


def apply_augment(sample: Sample, params: AugmentParams,
                  crop_size: Optional[Tuple[int, int]] = None,
                  background_class: int = 1) -> Sample:
    """Scale jitter, flip, crop/pad and colour jitter; labels only ever use nearest-neighbour."""
    h, w = sample.shape
    crop = tuple(crop_size) if crop_size is not None else (h, w)
    image, semantic, panoptic = sample.image, sample.semantic, sample.panoptic
    segments = [dataclasses.replace(s) for s in sample.segments]

    if params.scale != 1.0:
        sh, sw = _scaled_size((h, w), params.scale)
        rows = _nearest_indices(h, sh, params.scale)
        cols = _nearest_indices(w, sw, params.scale)
        image = image[rows][:, cols]
        semantic = semantic[rows][:, cols]
        panoptic = panoptic[rows][:, cols]

    if params.flip:
        image, semantic, panoptic = image[:, ::-1], semantic[:, ::-1], panoptic[:, ::-1]

    sh, sw = semantic.shape
    ph, pw = max(sh, crop[0]), max(sw, crop[1])
    if (ph, pw) != (sh, sw):
        background = next((s for s in segments if s.class_id == background_class
                           and not s.is_thing), None)
        if background is None:
            background = SegmentInfo(max((s.id for s in segments), default=0) + 1,
                                     background_class, False, 0)
            segments.append(background)
        top, left = (ph - sh) // 2, (pw - sw) // 2
        padded_image = np.zeros((ph, pw, 3))
        padded_image[top:top + sh, left:left + sw] = image
        padded_semantic = np.full((ph, pw), background_class, dtype=np.int64)
        padded_semantic[top:top + sh, left:left + sw] = semantic
        padded_panoptic = np.full((ph, pw), background.id, dtype=np.int64)
        padded_panoptic[top:top + sh, left:left + sw] = panoptic
        image, semantic, panoptic = padded_image, padded_semantic, padded_panoptic

    if params.crop_offset is None:
        top, left = (ph - crop[0]) // 2, (pw - crop[1]) // 2
    else:
        top, left = params.crop_offset
    if not (0 <= top <= ph - crop[0] and 0 <= left <= pw - crop[1]):
        raise ShapeError(f"crop offset {(top, left)} does not fit {crop} inside {(ph, pw)}")
    image = image[top:top + crop[0], left:left + crop[1]]
    semantic = semantic[top:top + crop[0], left:left + crop[1]]
    panoptic = panoptic[top:top + crop[0], left:left + crop[1]]

    if params.jitters_colour:
        image = np.clip((image - 0.5) * params.contrast + 0.5 + params.brightness, 0.0, 1.0)

    _refresh_areas(panoptic, segments)
    segments = [s for s in segments if s.area > 0]
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(semantic),
                  np.ascontiguousarray(panoptic), segments, index=sample.index)


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    params = sample_augment_params(sample.shape, cfg, rng)
    return apply_augment(sample, params, cfg.crop_size, cfg.background_class)
