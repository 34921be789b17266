"""Evaluation diagnostics for teachers and students.

Every function that takes a ``teacher``/``student``/``model`` accepts either a
:class:`~tadlab.model.TinyCausalLM` (evaluated at temperature 1 on
``eval_tokens``) or a precomputed probability array whose last axis is the
vocabulary.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from tadlab import divergence as dv
from tadlab.corpus import SequenceBatch
from tadlab.errors import InvalidConfigError, InvalidInputError
from tadlab.model import ModelConfig, TinyCausalLM


def _inputs(eval_tokens) -> np.ndarray:
    if isinstance(eval_tokens, SequenceBatch):
        return eval_tokens.inputs
    return np.asarray(eval_tokens)


def _targets(eval_tokens, targets) -> np.ndarray:
    if targets is not None:
        return np.asarray(targets)
    if isinstance(eval_tokens, SequenceBatch):
        return eval_tokens.targets
    raise InvalidInputError("ground-truth next tokens are required (pass a SequenceBatch or targets=)")


def probabilities(source, eval_tokens=None) -> np.ndarray:
    """Next-token distributions of ``source`` as float64, shape (..., V)."""
    if isinstance(source, TinyCausalLM):
        if eval_tokens is None:
            raise InvalidInputError("eval_tokens are required to evaluate a model")
        tokens = _inputs(eval_tokens)
        if tokens.size == 0:
            raise InvalidInputError("empty evaluation set")
        return source.predict_probs(tokens)
    p = np.asarray(source, dtype=np.float64)
    if p.ndim == 0 or p.size == 0:
        raise InvalidInputError("empty evaluation set")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidInputError("probabilities must be finite and non-negative")
    return p


def heldout_kl(teacher, student, eval_tokens=None, epsilon: float = dv.EPSILON) -> float:
    """Mean per-position KL(teacher || student)."""
    p_t = probabilities(teacher, eval_tokens)
    p_s = probabilities(student, eval_tokens)
    if p_t.shape != p_s.shape:
        raise InvalidInputError(f"teacher shape {p_t.shape} != student shape {p_s.shape}")
    return float(np.mean(dv.kl_divergence_batch(p_t, p_s, epsilon)))


@dataclass
class Curve:
    x: list
    y: list


def tail_mass_curve(teacher, eval_tokens=None, k_list: Sequence[int] = (1, 2, 5, 10, 20)) -> Curve:
    """Mean teacher tail mass outside its top-K, for each K."""
    p = probabilities(teacher, eval_tokens)
    V = p.shape[-1]
    ks = [int(k) for k in k_list]
    if not ks:
        raise InvalidConfigError("k_list is empty")
    for k in ks:
        if not 1 <= k < V:
            raise InvalidConfigError(f"K must lie in [1, {V - 1}], got {k}")
    flat = p.reshape(-1, V)
    desc = -np.sort(-flat, axis=-1)
    # tail mass summed from the smallest entries upward; cumulative sums make it monotone in K
    tails = np.cumsum(desc[:, ::-1], axis=-1)[:, ::-1]
    y = [float(np.mean(tails[:, k])) for k in ks]
    return Curve(x=ks, y=y)


def mismatch_rate(teacher, eval_tokens=None, targets=None) -> float:
    """Percent of positions whose teacher mode differs from the actual next token."""
    p = probabilities(teacher, eval_tokens)
    tgt = _targets(eval_tokens, targets)
    if tgt.shape != p.shape[:-1]:
        raise InvalidInputError(f"targets shape {tgt.shape} does not match positions {p.shape[:-1]}")
    mode = np.argmax(p, axis=-1)  # first maximum, i.e. the lowest token id on ties
    return float(100.0 * np.mean(mode != tgt))


@dataclass(frozen=True)
class CalibrationConfig:
    n_bins: int = 20
    scale: str = "percent"

    def __post_init__(self):
        if self.n_bins < 2:
            raise InvalidConfigError(f"n_bins must be >= 2, got {self.n_bins}")
        if self.scale not in ("fraction", "percent"):
            raise InvalidConfigError(f"scale must be 'fraction' or 'percent', got {self.scale!r}")


def full_ece(model, eval_tokens=None, cal: CalibrationConfig = CalibrationConfig(), targets=None) -> float:
    """Calibration error over every (position, vocabulary entry) pair.

    Each pair contributes its confidence p_v(t) and the indicator that v is the
    next token. Pairs fall into equal-width bins on [0, 1] (the top edge joins
    the last bin), and the error is the count-weighted mean of
    |accuracy - confidence| over bins.
    """
    p = probabilities(model, eval_tokens)
    tgt = _targets(eval_tokens, targets)
    V = p.shape[-1]
    if tgt.shape != p.shape[:-1]:
        raise InvalidInputError(f"targets shape {tgt.shape} does not match positions {p.shape[:-1]}")
    conf = p.reshape(-1)
    hit = (np.arange(V)[None, :] == tgt.reshape(-1, 1)).reshape(-1).astype(np.float64)
    bins = np.minimum((conf * cal.n_bins).astype(np.int64), cal.n_bins - 1)
    conf_sum = np.bincount(bins, weights=conf, minlength=cal.n_bins)
    hit_sum = np.bincount(bins, weights=hit, minlength=cal.n_bins)
    # n_b * |acc_b - conf_b| = |hits_b - conf_sum_b|
    err = float(np.sum(np.abs(hit_sum - conf_sum)) / conf.size)
    return 100.0 * err if cal.scale == "percent" else err


def relative_change(acc: float, acc_ref: float, base: float = 10.0) -> float:
    """100 * log_base(acc / acc_ref)."""
    if not (acc > 0 and acc_ref > 0):
        raise InvalidInputError(f"accuracies must be positive, got {acc} and {acc_ref}")
    return 100.0 * math.log(acc / acc_ref, base)


def avg_relative(accs: Sequence[float], refs: Sequence[float], base: float = 10.0) -> float:
    if len(accs) != len(refs) or not accs:
        raise InvalidInputError("accs and refs must be non-empty and of equal length")
    return math.fsum(relative_change(a, r, base) for a, r in zip(accs, refs)) / len(accs)


# ---------------------------------------------------------------- FLOPs


def non_embedding_params(cfg: ModelConfig) -> int:
    """Weights taking part in per-token matmuls inside the transformer blocks."""
    inner = cfg.n_heads * cfg.d_head
    attn = 3 * cfg.d_model * inner + inner * cfg.d_model
    ffn = 2 * cfg.d_model * cfg.d_ffn
    return cfg.n_layers * (attn + ffn)


def flop_breakdown(cfg: ModelConfig, n_tokens: int, mode: str = "forward") -> dict:
    """Matmul FLOPs split into block weights, attention scores and the output head.

    Forward costs 2 FLOPs per weight per token; training triples that for the
    backward pass. Attention scores and the weighted sum cost
    2 * n_layers * context * d_model per token. Embedding lookups are free;
    the vocabulary projection is reported as its own line. Biases, norms and
    the loss itself are O(d) or O(V) per token and are left out.
    """
    if mode not in ("forward", "train"):
        raise InvalidConfigError(f"mode must be 'forward' or 'train', got {mode!r}")
    if n_tokens < 0:
        raise InvalidInputError("n_tokens must be >= 0")
    mult = 2 if mode == "forward" else 6
    blocks = mult * non_embedding_params(cfg) * n_tokens
    attention = (mult // 2) * 2 * cfg.n_layers * cfg.context * cfg.d_model * n_tokens
    head = mult * cfg.d_model * cfg.vocab_size * n_tokens
    return {"blocks": blocks, "attention": attention, "lm_head": head, "total": blocks + attention + head}


def flop_estimate(model_config: ModelConfig, n_tokens: int, mode: str = "forward") -> float:
    return float(flop_breakdown(model_config, n_tokens, mode)["total"])


def distillation_flops(teacher: ModelConfig, student: ModelConfig, n_tokens: int, loss_mode: str = "tad") -> float:
    """Teacher forward plus student training; the divergence choice does not change the count."""
    student_cost = flop_estimate(student, n_tokens, "train")
    if loss_mode == "clm_only":
        return student_cost
    return flop_estimate(teacher, n_tokens, "forward") + student_cost


# ---------------------------------------------------------------- reports


@dataclass
class MetricReport:
    name: str
    n_samples: int
    value: float | None = None
    curve: Curve | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_samples <= 0:
            raise InvalidInputError("n_samples must be > 0")
        if (self.value is None) == (self.curve is None):
            raise InvalidInputError("a report holds exactly one of value or curve")

    def to_dict(self) -> dict:
        d = {"name": self.name, "n_samples": int(self.n_samples), "config": self.config}
        if self.curve is not None:
            d["curve"] = {"x": list(self.curve.x), "y": [float(v) for v in self.curve.y]}
        else:
            d["value"] = float(self.value)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        curve = d.get("curve")
        return cls(
            name=d["name"],
            n_samples=d["n_samples"],
            value=d.get("value"),
            curve=None if curve is None else Curve(x=list(curve["x"]), y=list(curve["y"])),
            config=d.get("config", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def write_curve_csv(self, path, x_name: str = "K") -> Path:
        if self.curve is None:
            raise InvalidInputError(f"report {self.name!r} has no curve")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([x_name, self.name])
            for x, y in zip(self.curve.x, self.curve.y):
                w.writerow([x, repr(float(y))])
        return path


def write_reports(path, reports: Sequence[MetricReport]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"reports": [r.to_dict() for r in reports]}
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def read_reports(path) -> list[MetricReport]:
    return [MetricReport.from_dict(d) for d in json.loads(Path(path).read_text())["reports"]]
