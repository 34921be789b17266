"""Teacher pretraining and student distillation loops.

Losses and their logit gradients are computed in float64 by
:mod:`tadlab.divergence`; the model only back-propagates the resulting
``dLoss/dlogits`` (plus the autograd cosine term on hidden states).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from tadlab import divergence as dv
from tadlab.corpus import Corpus, SequenceBatch, batch_iter, eval_windows, oracle_probs
from tadlab.errors import InvalidConfigError, NumericFailure
from tadlab.model import TinyCausalLM, cosine_hidden_loss, layer_map

log = logging.getLogger(__name__)

LOSS_MODES = ("clm_only", "vanilla_kd", "tad", "rkl")
LOG_COLUMNS = ("tokens", "clm_loss", "div_loss", "cosine_loss", "heldout_kl", "heldout_clm")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.1
    batch_size: int = 32
    total_tokens: int = 2_000_000
    loss_mode: str = "clm_only"
    divergence: dv.DivergenceConfig = field(default_factory=dv.DivergenceConfig)
    cosine_weight: float = 0.0
    seed: int = 0
    eval_every: int = 200_000
    clm_weight: float = 1.0
    div_weight: float = 1.0
    eval_windows: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise InvalidConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss_mode not in LOSS_MODES:
            raise InvalidConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.cosine_weight < 0:
            raise InvalidConfigError("cosine_weight must be >= 0")
        if self.weight_decay < 0:
            raise InvalidConfigError("weight_decay must be >= 0")
        if self.total_tokens < 1 or self.eval_every < 1:
            raise InvalidConfigError("total_tokens and eval_every must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["divergence"] = asdict(self.divergence)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        if isinstance(data.get("divergence"), dict):
            data["divergence"] = dv.DivergenceConfig(**data["divergence"])
        return cls(**data)

    def replace(self, **changes) -> "TrainConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return TrainConfig(**d)


# ---------------------------------------------------------------- optimizer


def adam_step(params, grads, state, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place AdamW update.

    Decoupled decay ``p <- p * (1 - lr * weight_decay)`` is applied before the
    bias-corrected Adam delta. ``state`` is a dict holding ``step``, ``m`` and
    ``v`` (lists aligned with ``params``); it is created on first use.
    """
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if g is not None and p.shape != g.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
    if not state:
        state["step"] = 0
        state["m"] = [torch.zeros_like(p) for p in params]
        state["v"] = [torch.zeros_like(p) for p in params]
    state["step"] += 1
    t = state["step"]
    bc1 = 1 - beta1**t
    bc2 = 1 - beta2**t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            if g is None:
                continue
            p.mul_(1 - lr * weight_decay)
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            denom = (v / bc2).sqrt().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return params, state


class AdamW:
    """Adam with decoupled weight decay over the trainable parameters of a model.

    Parameters with ``requires_grad=False`` (frozen embeddings) are never touched,
    not even by weight decay.
    """

    def __init__(self, model: torch.nn.Module, cfg: TrainConfig):
        self.params = [p for p in model.parameters() if p.requires_grad]
        self.cfg = cfg
        self.state: dict = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        c = self.cfg
        adam_step(self.params, [p.grad for p in self.params], self.state, c.lr, c.weight_decay, c.beta1, c.beta2, c.adam_eps)


# ---------------------------------------------------------------- losses


@dataclass
class StepResult:
    """Everything computed for one batch; ``backward()`` pushes gradients into the student."""

    loss: float
    clm: np.ndarray  # (B, N) per-token CLM loss
    div: np.ndarray | None  # (B, N) per-token divergence
    cosine: float
    p_student: np.ndarray  # (B, N, V) at the divergence temperature
    p_teacher: np.ndarray | None
    beta_x: np.ndarray | None
    logit_grad: np.ndarray  # dLoss/dlogits, (B, N, V)
    logits: torch.Tensor
    cosine_term: torch.Tensor | None = None

    def backward(self) -> None:
        g = torch.from_numpy(self.logit_grad).to(self.logits.dtype)
        surrogate = (self.logits * g).sum()
        if self.cosine_term is not None:
            surrogate = surrogate + self.cosine_term
        surrogate.backward()


def _clm_terms(z: np.ndarray, targets: np.ndarray, eps: float):
    p1 = dv.softmax_batch(z)
    picked = np.take_along_axis(p1, targets[..., None], axis=-1)[..., 0]
    clm = -np.log(np.maximum(picked, eps))
    grad = p1.copy()
    np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], -1) - 1.0, axis=-1)
    return p1, clm, grad


def compute_step(
    student: TinyCausalLM,
    batch: SequenceBatch,
    cfg: TrainConfig,
    teacher: TinyCausalLM | None = None,
) -> StepResult:
    """Forward the student (and teacher), assemble the loss and its logit gradient.

    Per token: ``clm_weight * CLM + div_weight * divergence``; the batch loss is
    the mean over all B*N tokens, i.e. the per-sequence mean averaged over rows.
    """
    dcfg = cfg.divergence
    logits, hidden = student(batch.inputs)
    z = logits.detach().double().numpy()
    targets = np.asarray(batch.targets)
    n_tok = targets.size
    p1, clm, grad = _clm_terms(z, targets, dcfg.epsilon)
    grad *= cfg.clm_weight
    total = cfg.clm_weight * clm

    div = p_t = beta_x = None
    cos_term = None
    cos_val = 0.0
    p_s = p1
    if cfg.loss_mode != "clm_only":
        if teacher is None:
            raise InvalidConfigError(f"loss_mode {cfg.loss_mode!r} needs a teacher")
        with torch.no_grad():
            t_logits, t_hidden = teacher(batch.inputs)
        p_t = dv.softmax_batch(t_logits.double().numpy(), dcfg.temperature)
        p_s = p1 if dcfg.temperature == 1.0 else dv.softmax_batch(z, dcfg.temperature)
        out = dv.divergence_batch(cfg.loss_mode, p_t, p_s, dcfg)
        div, beta_x = out.loss, out.beta_x
        total = total + cfg.div_weight * div
        # chain rule through z / T
        grad += (cfg.div_weight / dcfg.temperature) * out.grad
        if cfg.cosine_weight > 0:
            pairs = layer_map(student.config.n_layers, teacher.config.n_layers)
            cos, _ = cosine_hidden_loss(hidden, t_hidden.detach(), pairs)
            cos_term = cfg.cosine_weight * cos
            cos_val = float(cos.detach())
    loss = float(total.mean()) + (cfg.cosine_weight * cos_val)
    return StepResult(
        loss=loss,
        clm=clm,
        div=div,
        cosine=cos_val,
        p_student=p_s,
        p_teacher=p_t,
        beta_x=beta_x,
        logit_grad=grad / n_tok,
        logits=logits,
        cosine_term=cos_term,
    )


# ---------------------------------------------------------------- logging


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        if self.records and row["tokens"] <= self.records[-1]["tokens"]:
            raise ValueError("tokens must increase monotonically")
        self.records.append({c: row[c] for c in LOG_COLUMNS})

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> list:
        return [r[name] for r in self.records]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow([r["tokens"]] + [_fmt(r[c]) for c in LOG_COLUMNS[1:]])
        return path

    @classmethod
    def from_csv(cls, path) -> "TrainingLog":
        out = cls()
        with Path(path).open() as fh:
            for row in csv.DictReader(fh):
                out.records.append({c: int(row[c]) if c == "tokens" else float(row[c]) for c in LOG_COLUMNS})
        return out


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------- evaluation


@torch.no_grad()
def evaluate(student: TinyCausalLM, batch: SequenceBatch, reference: np.ndarray | None, eps: float = dv.EPSILON):
    """Held-out (KL(reference || student), CLM loss); KL is NaN without a reference."""
    p_s = student.predict_probs(batch.inputs)
    picked = np.take_along_axis(p_s, np.asarray(batch.targets)[..., None], axis=-1)[..., 0]
    clm = float(np.mean(-np.log(np.maximum(picked, eps))))
    kl = float("nan") if reference is None else float(np.mean(dv.kl_divergence_batch(reference, p_s, eps)))
    return kl, clm


def _loop(student, train: Corpus, valid: Corpus, cfg: TrainConfig, teacher=None, reference=None):
    context = student.config.context
    eval_batch = eval_windows(valid, context, cfg.eval_windows)
    if reference is None and teacher is not None:
        reference = teacher.predict_probs(eval_batch.inputs)
    elif reference is None and isinstance(valid, Corpus) and valid.has_oracle:
        reference = oracle_probs(valid, eval_batch)

    opt = AdamW(student, cfg)
    tlog = TrainingLog()
    seen = 0
    step = 0
    acc = {"clm": 0.0, "div": 0.0, "cos": 0.0, "n": 0}
    student.train()
    for batch in batch_iter(train, cfg.batch_size, context, cfg.seed, drop_last=True):
        res = compute_step(student, batch, cfg, teacher)
        if not math.isfinite(res.loss):
            raise NumericFailure(
                f"non-finite loss at step {step} (batch window starts {batch.starts[:4].tolist()}...)"
            )
        opt.zero_grad()
        res.backward()
        opt.step()
        step += 1
        seen += batch.n_tokens
        acc["clm"] += float(res.clm.mean())
        acc["div"] += 0.0 if res.div is None else float(res.div.mean())
        acc["cos"] += res.cosine
        acc["n"] += 1
        if seen // cfg.eval_every > (seen - batch.n_tokens) // cfg.eval_every:
            kl, clm = evaluate(student, eval_batch, reference, cfg.divergence.epsilon)
            n = acc["n"]
            tlog.append(
                tokens=seen,
                clm_loss=acc["clm"] / n,
                div_loss=acc["div"] / n,
                cosine_loss=acc["cos"] / n,
                heldout_kl=kl,
                heldout_clm=clm,
            )
            log.info("step %d tokens %d train_clm %.4f heldout_kl %.5f", step, seen, acc["clm"] / n, kl)
            acc = {"clm": 0.0, "div": 0.0, "cos": 0.0, "n": 0}
        if seen >= cfg.total_tokens:
            break
    student.eval()
    return student, tlog


def train_clm(model: TinyCausalLM, train: Corpus, valid: Corpus, config: TrainConfig):
    """Pretrain with the CLM loss only. Held-out KL is measured against the oracle when available."""
    if config.loss_mode != "clm_only":
        raise InvalidConfigError(f"train_clm needs loss_mode='clm_only', got {config.loss_mode!r}")
    return _loop(model, train, valid, config)


def distill(teacher: TinyCausalLM, student: TinyCausalLM, train: Corpus, valid: Corpus, config: TrainConfig):
    """Distill ``teacher`` into ``student``; held-out KL is KL(teacher || student)."""
    if config.loss_mode not in ("vanilla_kd", "tad", "rkl"):
        raise InvalidConfigError(f"distill needs a divergence loss_mode, got {config.loss_mode!r}")
    if teacher.config.vocab_size != student.config.vocab_size:
        raise InvalidConfigError(
            f"teacher vocab {teacher.config.vocab_size} != student vocab {student.config.vocab_size}"
        )
    teacher.eval()
    return _loop(student, train, valid, config, teacher=teacher)
