"""A small causal transformer LM, teacher->student initialization and checkpoints."""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from tadlab.errors import CheckpointError, InvalidConfigError, InvalidInputError

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_head: int = 16
    d_ffn: int = 256
    context: int = 64
    tie_embeddings: bool = False
    freeze_embeddings: bool = False
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_head", "d_ffn"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.vocab_size < 2:
            raise InvalidConfigError("vocab_size must be >= 2")
        if self.context < 1:
            raise InvalidConfigError(f"context must be >= 1, got {self.context}")
        if self.d_model != self.n_heads * self.d_head:
            raise InvalidConfigError(
                f"d_model ({self.d_model}) != n_heads * d_head ({self.n_heads} * {self.d_head})"
            )
        if self.dtype not in _DTYPES:
            raise InvalidConfigError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, inner = cfg.d_model, cfg.n_heads * cfg.d_head
        self.n_heads, self.d_head = cfg.n_heads, cfg.d_head
        self.ln1 = nn.LayerNorm(d)
        self.q = nn.Linear(d, inner)
        self.k = nn.Linear(d, inner)
        self.v = nn.Linear(d, inner)
        self.o = nn.Linear(inner, d)
        self.ln2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, cfg.d_ffn)
        self.ff2 = nn.Linear(cfg.d_ffn, d)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        B, N, _ = x.shape
        h = self.ln1(x)

        def heads(t):
            return t.view(B, N, self.n_heads, self.d_head).transpose(1, 2)

        q, k, v = heads(self.q(h)), heads(self.k(h)), heads(self.v(h))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        causal = torch.ones(N, N, dtype=torch.bool, device=x.device).triu(1)
        scores = scores.masked_fill(causal, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.o(out.transpose(1, 2).reshape(B, N, self.n_heads * self.d_head))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(x)
        return x + self.ff2(F.gelu(self.ff1(self.ln2(x))))


class TinyCausalLM(nn.Module):
    """Pre-LN causal transformer with learned absolute positions.

    ``forward`` returns ``(logits, hidden)`` where ``hidden`` stacks the residual
    stream after every block: shape ``(n_layers, B, N, d_model)``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.context, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = None if cfg.tie_embeddings else nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.to(_DTYPES[cfg.dtype])

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.config.dtype]

    def embedding_parameter_names(self) -> list[str]:
        return ["tok_emb.weight", "pos_emb.weight"]

    def apply_freeze(self) -> None:
        frozen = self.config.freeze_embeddings
        self.tok_emb.weight.requires_grad_(not frozen)
        self.pos_emb.weight.requires_grad_(not frozen)

    def _check_tokens(self, tokens) -> torch.Tensor:
        t = torch.as_tensor(np.asarray(tokens) if not torch.is_tensor(tokens) else tokens)
        if t.dim() == 1:
            t = t.unsqueeze(0)
        if t.dim() != 2:
            raise InvalidInputError(f"tokens must be 1-D or 2-D, got shape {tuple(t.shape)}")
        if t.shape[1] > self.config.context or t.shape[1] < 1:
            raise InvalidInputError(
                f"sequence length {t.shape[1]} outside [1, context={self.config.context}]"
            )
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= self.config.vocab_size):
            raise InvalidInputError(f"token ids must lie in [0, {self.config.vocab_size})")
        return t.long()

    def forward(self, tokens):
        t = self._check_tokens(tokens)
        pos = torch.arange(t.shape[1])
        x = self.tok_emb(t) + self.pos_emb(pos)
        hidden = []
        for block in self.blocks:
            x = block(x)
            hidden.append(x)
        h = self.ln_f(x)
        logits = h @ self.tok_emb.weight.T if self.head is None else self.head(h)
        return logits, torch.stack(hidden)

    @torch.no_grad()
    def predict_probs(self, tokens, temperature: float = 1.0) -> np.ndarray:
        """Float64 next-token distributions, shape (B, N, V)."""
        logits, _ = self(tokens)
        z = logits.double() / temperature
        return torch.softmax(z, dim=-1).numpy()


def _init_weights(model: TinyCausalLM, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    resid_std = 0.02 / math.sqrt(model.config.n_layers)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif ".ln" in name or name.startswith("ln_f"):
                p.fill_(1.0)
            else:
                std = resid_std if name.endswith(("o.weight", "ff2.weight")) else 0.02
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * std)


def init_model(config: ModelConfig) -> TinyCausalLM:
    """Seeded model: N(0, 0.02) weights, N(0, 0.02/sqrt(n_layers)) residual projections."""
    model = TinyCausalLM(config)
    _init_weights(model, config.seed)
    model.apply_freeze()
    return model


def zero_weights(model: TinyCausalLM) -> TinyCausalLM:
    """Test hook: every parameter set to zero, so every position predicts uniformly."""
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model


def forward(model: TinyCausalLM, tokens):
    return model(tokens)


def layer_map(n_student: int, n_teacher: int) -> list[tuple[int, int]]:
    """Uniform-stride student->teacher layer pairing: l -> floor(l * L_T / L_S)."""
    return [(l, l * n_teacher // n_student) for l in range(n_student)]


def init_student_from_teacher(teacher: TinyCausalLM, student_config: ModelConfig) -> TinyCausalLM:
    """Random student whose attention sub-layers are copied from the teacher.

    Each head's Q/K/V/O projection keeps the leading ``d_head`` rows/columns of the
    matching teacher head and the leading ``d_model`` input coordinates. Embeddings,
    positional table, pre-attention layer norms, final norm and output head are
    copied with the same truncation. Feed-forward layers stay randomly initialized.
    """
    tc, sc = teacher.config, student_config
    if sc.vocab_size != tc.vocab_size:
        raise InvalidConfigError(f"vocab mismatch: student {sc.vocab_size} vs teacher {tc.vocab_size}")
    for name in ("n_heads", "d_head", "n_layers", "context", "d_model"):
        if getattr(sc, name) > getattr(tc, name):
            raise InvalidConfigError(
                f"student {name}={getattr(sc, name)} exceeds teacher {name}={getattr(tc, name)}"
            )
    student = init_model(sc)
    d, dh = sc.d_model, sc.d_head
    dt = student.dtype

    def copy(dst: torch.Tensor, src: torch.Tensor) -> None:
        dst.copy_(src.to(dt))

    with torch.no_grad():
        copy(student.tok_emb.weight, teacher.tok_emb.weight[:, :d])
        copy(student.pos_emb.weight, teacher.pos_emb.weight[: sc.context, :d])
        copy(student.ln_f.weight, teacher.ln_f.weight[:d])
        copy(student.ln_f.bias, teacher.ln_f.bias[:d])
        if student.head is not None:
            src = teacher.tok_emb.weight if teacher.head is None else teacher.head.weight
            copy(student.head.weight, src[:, :d])
        for ls, lt in layer_map(sc.n_layers, tc.n_layers):
            s_blk, t_blk = student.blocks[ls], teacher.blocks[lt]
            copy(s_blk.ln1.weight, t_blk.ln1.weight[:d])
            copy(s_blk.ln1.bias, t_blk.ln1.bias[:d])
            for h in range(sc.n_heads):
                s_rows = slice(h * dh, (h + 1) * dh)
                t_rows = slice(h * tc.d_head, h * tc.d_head + dh)
                for proj in ("q", "k", "v"):
                    sp, tp = getattr(s_blk, proj), getattr(t_blk, proj)
                    copy(sp.weight[s_rows], tp.weight[t_rows, :d])
                    copy(sp.bias[s_rows], tp.bias[t_rows])
                copy(s_blk.o.weight[:, s_rows], t_blk.o.weight[:d, t_rows])
            copy(s_blk.o.bias, t_blk.o.bias[:d])
    student.apply_freeze()
    return student


def cosine_hidden_loss(h_S, h_T, layer_pairs) -> tuple[torch.Tensor, int]:
    """Mean of ``1 - cos`` between mapped student/teacher hidden vectors.

    Teacher vectors are truncated to the student width. Positions where either
    vector has zero norm are skipped; the skip count is returned alongside the loss.
    """
    h_S = torch.as_tensor(h_S)
    h_T = torch.as_tensor(h_T)
    d = h_S.shape[-1]
    total = h_S.new_zeros(())
    count = 0
    skipped = 0
    for ls, lt in layer_pairs:
        if not (0 <= ls < h_S.shape[0] and 0 <= lt < h_T.shape[0]):
            raise InvalidInputError(f"layer pair ({ls}, {lt}) out of range")
        s = h_S[ls].reshape(-1, d)
        t = h_T[lt][..., :d].reshape(-1, d).to(s.dtype)
        ns, nt = s.norm(dim=-1), t.norm(dim=-1)
        ok = (ns > 0) & (nt > 0)
        skipped += int((~ok).sum())
        cos = (s[ok] * t[ok]).sum(-1) / (ns[ok] * nt[ok])
        total = total + (1.0 - cos).sum()
        count += int(ok.sum())
    if count == 0:
        return total, skipped
    return total / count, skipped


# ---------------------------------------------------------------- checkpoints
#
# Layout (little-endian):
#   8 bytes   magic b"TADLABCK"
#   u32       format version
#   u64       header length H
#   H bytes   UTF-8 JSON: {"config": {...}, "params": [{"name", "dtype", "shape", "offset", "nbytes"}]}
#   ...       raw parameter bytes, C order, concatenated in header order

CHECKPOINT_MAGIC = b"TADLABCK"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(model: TinyCausalLM) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy())
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": model.config.to_dict(), "params": entries}, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header)) + header + b"".join(blobs)


def save_checkpoint(model: TinyCausalLM, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model))
    return path


def load_checkpoint(path) -> TinyCausalLM:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:8] != CHECKPOINT_MAGIC or len(data) < 20:
        raise CheckpointError(f"{path} is not a tadlab checkpoint")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[20 : 20 + hlen])
        cfg = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupted header ({exc})") from exc
    body = data[20 + hlen :]
    model = TinyCausalLM(cfg)
    state = {}
    for e in header["params"]:
        raw = body[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated parameter {e['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy())
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match config ({exc})") from exc
    model.apply_freeze()
    return model


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
