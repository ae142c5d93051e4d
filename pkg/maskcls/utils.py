"""
Utility functions for maskcls.
"""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

logger = logging.getLogger(__name__)


def sha256_bytes(payload: bytes) -> str:
    """Hex SHA-256 digest of a byte string.

    Args:
        payload: Bytes to hash

    Returns:
        Hex digest
    """
    return hashlib.sha256(payload).hexdigest()


def sha256_file(path: Path) -> str:
    """Hex SHA-256 digest of a file's contents.

    Args:
        path: File to hash

    Returns:
        Hex digest
    """
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def canonical_json(payload: Any) -> str:
    """Serialize to JSON with sorted keys so equal payloads give equal bytes."""
    return json.dumps(payload, sort_keys=True, indent=2, default=_json_default)


def _json_default(value: Any) -> Any:
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_json(payload: Any, path: Path) -> Path:
    """Write a JSON document (canonical form, trailing newline).

    Args:
        payload: JSON-compatible object
        path: Destination file

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(payload) + "\n", encoding="utf-8")
    return path


def parse_flat_config(text: str) -> Dict[str, Any]:
    """Parse ``key = value`` lines into a flat dictionary.

    Values are JSON literals when they parse as such, bare strings otherwise.
    ``#`` starts a comment; blank lines are skipped.

    Args:
        text: Config file contents

    Returns:
        Mapping of dotted keys to parsed values
    """
    values: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key '{key}'")
        try:
            values[key] = json.loads(value)
        except json.JSONDecodeError:
            values[key] = value
    return values


def format_flat_config(values: Dict[str, Any]) -> str:
    """Inverse of parse_flat_config for JSON-compatible values."""
    return "".join(f"{key} = {json.dumps(values[key])}\n" for key in sorted(values))


def env_int(name: str, default: int, minimum: int = 1) -> int:
    """Read a positive integer from the environment.

    Args:
        name: Variable name
        default: Value when unset
        minimum: Smallest accepted value

    Returns:
        Parsed value, or the default when unset or invalid
    """
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        value = int(raw)
    except ValueError:
        logger.warning(f"Ignoring {name}={raw!r}: not an integer")
        return default
    if value < minimum:
        logger.warning(f"Ignoring {name}={value}: below {minimum}")
        return default
    return value


def class_palette(num_classes: int, seed: int = 7) -> np.ndarray:
    """Distinct display colours for label maps (index 0 is VOID, black).

    Args:
        num_classes: Highest class id to cover
        seed: Palette seed

    Returns:
        (num_classes + 1, 3) uint8 array
    """
    rng = np.random.default_rng(seed)
    colours = rng.integers(40, 256, size=(num_classes + 1, 3), dtype=np.int64)
    colours[0] = 0
    return colours.astype(np.uint8)


def colorize(label_map: np.ndarray, num_classes: Optional[int] = None) -> np.ndarray:
    """Map an integer label map to RGB for inspection.

    Args:
        label_map: (H, W) ints, 0 = VOID
        num_classes: Palette size (defaults to the map's maximum)

    Returns:
        (H, W, 3) uint8 image
    """
    labels = np.asarray(label_map, dtype=np.int64)
    top = int(labels.max()) if labels.size else 0
    palette = class_palette(max(top, num_classes or 0))
    return palette[labels]
