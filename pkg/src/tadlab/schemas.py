"""JSON schemas for the files the command line writes."""

_NUMBER_OR_NULL = {"type": ["number", "null"]}

METRIC_REPORT = {
    "type": "object",
    "required": ["name", "n_samples", "config"],
    "properties": {
        "name": {"type": "string"},
        "n_samples": {"type": "integer", "minimum": 1},
        "config": {"type": "object"},
        "value": _NUMBER_OR_NULL,
        "curve": {
            "type": "object",
            "required": ["x", "y"],
            "properties": {"x": {"type": "array"}, "y": {"type": "array", "items": {"type": "number"}}},
        },
    },
    "oneOf": [{"required": ["value"]}, {"required": ["curve"]}],
}

RUN_REPORT = {
    "type": "object",
    "required": ["arm", "seed", "loss_mode", "K", "beta", "teacher_hash", "train_config", "reports"],
    "properties": {
        "arm": {"type": "string"},
        "seed": {"type": "integer"},
        "loss_mode": {"enum": ["vanilla_kd", "tad", "rkl"]},
        "K": {"type": "integer", "minimum": 1},
        "beta": {"type": "number"},
        "teacher_hash": {"type": "string", "pattern": "^[0-9a-f]{16}$"},
        "train_config": {"type": "object"},
        "reports": {"type": "array", "items": METRIC_REPORT, "minItems": 1},
    },
}

SUMMARY = {
    "type": "object",
    "required": ["teacher_hash", "rows", "winners", "winner_counts", "per_arm", "min_heldout_kl"],
    "properties": {
        "teacher_hash": {"type": "string"},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["arm", "loss_mode", "K", "beta", "seed", "heldout_kl", "heldout_clm"],
                "properties": {
                    "arm": {"type": "string"},
                    "seed": {"type": "integer"},
                    "heldout_kl": _NUMBER_OR_NULL,
                    "heldout_clm": _NUMBER_OR_NULL,
                },
            },
        },
        "winners": {"type": "object", "additionalProperties": {"type": "string"}},
        "winner_counts": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}},
        "per_arm": {"type": "object"},
        "min_heldout_kl": _NUMBER_OR_NULL,
    },
}

DIAGNOSE = {
    "type": "object",
    "required": ["checkpoint_sha256", "reports"],
    "properties": {
        "checkpoint_sha256": {"type": "string"},
        "reports": {"type": "array", "items": METRIC_REPORT, "minItems": 5},
    },
}

TEACHER_CONFIG = {
    "type": "object",
    "required": ["teacher_hash", "corpus", "corpus_file", "model", "train"],
}

TRAINING_LOG_COLUMNS = ("tokens", "clm_loss", "div_loss", "cosine_loss", "heldout_kl", "heldout_clm")
SUMMARY_COLUMNS = ("arm", "loss_mode", "K", "beta", "seed", "heldout_kl", "heldout_clm")
TAIL_MASS_COLUMNS = ("K", "tail_mass")
