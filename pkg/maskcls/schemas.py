"""
JSON schemas of every artifact the command line writes.
"""

import logging
from typing import Any, Dict

import jsonschema

from .errors import MaskClsError

logger = logging.getLogger(__name__)

_NUMBER_OR_NULL = {"type": ["number", "null"]}
_UNIT_OR_NULL = {"type": ["number", "null"], "minimum": 0, "maximum": 1}

METRIC_REPORT = {
    "type": "object",
    "properties": {
        "num_classes": {"type": "integer", "minimum": 1},
        "num_images": {"type": "integer", "minimum": 0},
        "miou": _UNIT_OR_NULL,
        "per_class_iou": {"type": "array", "items": _UNIT_OR_NULL},
        "pixel_accuracy": _UNIT_OR_NULL,
        "pq": _UNIT_OR_NULL,
        "sq": _UNIT_OR_NULL,
        "rq": _UNIT_OR_NULL,
        "pq_things": _UNIT_OR_NULL,
        "pq_stuff": _UNIT_OR_NULL,
        "pq_class_averaged": _UNIT_OR_NULL,
        "per_class_pq": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "properties": {
                    "pq": {"type": "number"},
                    "sq": {"type": "number"},
                    "rq": {"type": "number"},
                    "tp": {"type": "integer", "minimum": 0},
                    "fp": {"type": "integer", "minimum": 0},
                    "fn": {"type": "integer", "minimum": 0},
                },
                "required": ["pq", "sq", "rq", "tp", "fp", "fn"],
            },
        },
    },
    "required": ["num_classes", "miou", "per_class_iou", "pq", "sq", "rq"],
}

TRAIN_LOG_RECORD = {
    "type": "object",
    "properties": {
        "iter": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "minimum": 0},
        "loss": {"type": "number"},
        "grad_norm": {"type": "number", "minimum": 0},
        "eval": {
            "type": "object",
            "properties": {"miou": _UNIT_OR_NULL, "pq_st": _UNIT_OR_NULL,
                           "pixel_accuracy": _UNIT_OR_NULL},
            "required": ["miou", "pq_st"],
        },
    },
    "required": ["iter", "lr", "loss"],
    "additionalProperties": False,
}

ABLATION_ROW = {
    "type": "object",
    "properties": {
        "label": {"type": "string"},
        "miou": _UNIT_OR_NULL,
        "pq_st": _UNIT_OR_NULL,
        "pixel_accuracy": _UNIT_OR_NULL,
        "final_loss": _NUMBER_OR_NULL,
        "settings": {"type": "object"},
    },
    "required": ["label", "miou", "pq_st", "settings"],
}

QUERY_STATS = {
    "type": "object",
    "properties": {
        "num_queries": {"type": "integer", "minimum": 1},
        "counts": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "distinct_classes": {"type": "integer", "minimum": 0},
        "per_query": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "query": {"type": "integer", "minimum": 0},
                    "count": {"type": "integer", "minimum": 0},
                    "classes": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                },
                "required": ["query", "count", "classes"],
            },
        },
    },
    "required": ["num_queries", "counts", "per_query", "distinct_classes"],
}

SEGMENT = {
    "type": "object",
    "properties": {
        "id": {"type": "integer", "minimum": 1},
        "class_id": {"type": "integer", "minimum": 1},
        "area": {"type": "integer", "minimum": 0},
        "score": {"type": "number"},
        "queries": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "is_thing": {"type": "boolean"},
    },
    "required": ["id", "class_id", "area"],
}


def _result(command: str, **properties: Any) -> Dict[str, Any]:
    return {
        "type": "object",
        "properties": {
            "status": {"const": "success"},
            "command": {"const": command},
            "seed": {"type": "integer"},
            "out": {"type": "string"},
            **properties,
        },
        "required": ["status", "command", "out", *properties],
    }


SCHEMAS: Dict[str, Dict[str, Any]] = {
    "metric_report": METRIC_REPORT,
    "train_log_record": TRAIN_LOG_RECORD,
    "query_stats": QUERY_STATS,
    "error": {
        "type": "object",
        "properties": {
            "status": {"const": "error"},
            "command": {"type": ["string", "null"]},
            "error_type": {"type": "string"},
            "message": {"type": "string"},
        },
        "required": ["status", "command", "error_type", "message"],
        "additionalProperties": False,
    },
    "gen-data": _result("gen-data", num_classes={"type": "integer", "minimum": 2},
                        count={"type": "integer", "minimum": 0},
                        image_size={"type": "array", "items": {"type": "integer"}}),
    "train": _result("train", final_checkpoint={"type": ["string", "null"]},
                     iterations={"type": "integer", "minimum": 1},
                     final_loss={"type": "number"},
                     config={"type": "object"},
                     eval={"anyOf": [{"type": "null"}, METRIC_REPORT]}),
    "eval-semantic": _result("eval-semantic", report=METRIC_REPORT),
    "eval-panoptic": _result("eval-panoptic", report=METRIC_REPORT),
    "infer": _result("infer", images={"type": "array", "items": {
        "type": "object",
        "properties": {
            "name": {"type": "string"},
            "label_map": {"type": "string"},
            "masks": {"type": "array", "items": {"type": "string"}},
            "segments": {"type": "array", "items": SEGMENT},
        },
        "required": ["name", "label_map", "segments"],
    }}),
    "ablation": _result("ablation", ablation={"type": "string"},
                        rows={"type": "array", "items": ABLATION_ROW, "minItems": 1}),
    "query-stats": _result("query-stats", stats=QUERY_STATS),
    "grad-check": _result("grad-check", tolerance={"type": "number"},
                          max_error={"type": "number", "minimum": 0},
                          passed={"type": "boolean"},
                          suites={"type": "object", "additionalProperties": {
                              "type": "object",
                              "additionalProperties": {"type": "number", "minimum": 0}}}),
}


def validate(payload: Any, name: str) -> Any:
    """Check ``payload`` against schema ``name`` and return it unchanged."""
    try:
        schema = SCHEMAS[name]
    except KeyError:
        raise ValueError(f"Unknown schema: {name}") from None
    try:
        jsonschema.validate(instance=payload, schema=schema)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        logger.error(f"{name} payload violates its schema at {path}: {exc.message}")
        raise MaskClsError(f"{name} output failed schema validation at {path}: {exc.message}") \
            from exc
    return payload


def result_schema(command: str) -> str:
    """Schema name of the result a command prints; every ablate-* command shares one."""
    return "ablation" if command.startswith("ablate-") else command
