"""Synthetic Markov-Zipf token corpora with oracle access to the true conditionals.

Each order-m history is mapped to one row of an emission table. Every row is a
Zipf(s) distribution laid over its own random permutation of the vocabulary,
optionally perturbed by log-normal noise. When V**m exceeds ``n_state_tables``
tokens are first assigned to C random classes (C**m <= n_state_tables) and the
row is indexed by the classes of the last m tokens.
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from tadlab.errors import CheckpointError, InvalidConfigError, InvalidInputError

@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int = 256
    n_tokens: int = 200_000
    markov_order: int = 2
    zipf_exponent: float = 1.1
    temperature_noise: float = 0.0
    seed: int = 0
    valid_fraction: float = 0.1
    n_state_tables: int = 256

    def __post_init__(self):
        if self.vocab_size < 2:
            raise InvalidConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.n_tokens < 2:
            raise InvalidConfigError(f"n_tokens must be >= 2, got {self.n_tokens}")
        if self.markov_order < 0:
            raise InvalidConfigError(f"markov_order must be >= 0, got {self.markov_order}")
        if not self.zipf_exponent > 0:
            raise InvalidConfigError(f"zipf_exponent must be > 0, got {self.zipf_exponent}")
        if self.temperature_noise < 0:
            raise InvalidConfigError("temperature_noise must be >= 0")
        if not 0 < self.valid_fraction < 1:
            raise InvalidConfigError(f"valid_fraction must lie in (0, 1), got {self.valid_fraction}")
        if self.n_state_tables < 1:
            raise InvalidConfigError("n_state_tables must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidConfigError(f"unknown CorpusConfig fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Corpus:
    """A token stream plus, when synthetic, the emission row behind every token.

    ``rows[t]`` indexes ``table`` and gives the exact distribution ``tokens[t]``
    was drawn from, i.e. the true next-token conditional at position ``t - 1``.
    """

    tokens: np.ndarray
    vocab_size: int
    seed: int = 0
    rows: np.ndarray | None = None
    table: np.ndarray | None = None
    offset: int = 0

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def has_oracle(self) -> bool:
        return self.rows is not None and self.table is not None

    def conditionals(self, positions) -> np.ndarray:
        """True distributions of ``tokens[positions]`` given their history."""
        if not self.has_oracle:
            raise InvalidInputError("corpus has no oracle conditionals")
        return self.table[self.rows[np.asarray(positions)]]


def zipf_weights(vocab_size: int, s: float) -> np.ndarray:
    """Normalized rank-frequency weights k**-s, k = 1..V (point mass for s = inf)."""
    if math.isinf(s):
        w = np.zeros(vocab_size)
        w[0] = 1.0
        return w
    logw = -s * np.log(np.arange(1, vocab_size + 1, dtype=np.float64))
    w = np.exp(logw - logw.max())
    return w / w.sum()


def n_classes(cfg: CorpusConfig) -> int:
    """Largest C <= V with C**m <= n_state_tables (V itself when the chain fits exactly)."""
    m, V = cfg.markov_order, cfg.vocab_size
    if m == 0 or V**m <= cfg.n_state_tables:
        return V
    c = max(1, int(round(cfg.n_state_tables ** (1.0 / m))))
    while c**m > cfg.n_state_tables:
        c -= 1
    while (c + 1) ** m <= cfg.n_state_tables:
        c += 1
    return c


def token_classes(cfg: CorpusConfig) -> np.ndarray:
    c = n_classes(cfg)
    if c == cfg.vocab_size:
        return np.arange(cfg.vocab_size)
    perm = np.random.default_rng([cfg.seed, 0xC1A55]).permutation(cfg.vocab_size)
    return perm % c


def emission_table(cfg: CorpusConfig) -> np.ndarray:
    n_rows = n_classes(cfg) ** cfg.markov_order
    rng = np.random.default_rng([cfg.seed, 0x7AB1E])
    base = zipf_weights(cfg.vocab_size, cfg.zipf_exponent)
    table = np.empty((n_rows, cfg.vocab_size))
    for r in range(n_rows):
        w = base
        if cfg.temperature_noise > 0 and not math.isinf(cfg.zipf_exponent):
            with np.errstate(divide="ignore"):
                logw = np.log(base) + cfg.temperature_noise * rng.standard_normal(cfg.vocab_size)
            w = np.exp(logw - logw.max())
            w /= w.sum()
        table[r, rng.permutation(cfg.vocab_size)] = w
    return table



def generate_corpus(config: CorpusConfig) -> Corpus:
    """Sample ``n_tokens`` tokens; the history before position 0 is all zeros."""
    cfg = config
    table = emission_table(cfg)
    n_rows = table.shape[0]
    cdf = np.cumsum(table, axis=1)
    cdf[:, -1] = np.inf  # guards against round-off at the top of the cdf
    cdf_rows = [row for row in cdf]
    V, m = cfg.vocab_size, cfg.markov_order
    C = n_classes(cfg)
    classes = token_classes(cfg).tolist()

    uniforms = np.random.default_rng([cfg.seed, 0x5A3F1E]).random(cfg.n_tokens)
    tokens = np.empty(cfg.n_tokens, dtype=np.int32)
    rows = np.empty(cfg.n_tokens, dtype=np.int32)
    code = 0
    search = np.searchsorted
    for t in range(cfg.n_tokens):
        tok = int(search(cdf_rows[code], uniforms[t], side="right"))
        tokens[t] = tok
        rows[t] = code
        if m:
            code = (code * C + classes[tok]) % n_rows
    return Corpus(tokens=tokens, vocab_size=V, seed=cfg.seed, rows=rows, table=table)


def split(corpus: Corpus, valid_fraction: float) -> tuple[Corpus, Corpus]:
    """Hold out the contiguous tail of the stream."""
    if not 0 < valid_fraction < 1:
        raise InvalidConfigError(f"valid_fraction must lie in (0, 1), got {valid_fraction}")
    n = len(corpus)
    n_valid = int(round(n * valid_fraction))
    cut = n - n_valid

    def part(lo, hi):
        return Corpus(
            tokens=corpus.tokens[lo:hi],
            vocab_size=corpus.vocab_size,
            seed=corpus.seed,
            rows=None if corpus.rows is None else corpus.rows[lo:hi],
            table=corpus.table,
            offset=corpus.offset + lo,
        )

    return part(0, cut), part(cut, n)


@dataclass
class SequenceBatch:
    inputs: np.ndarray  # (B, context)
    targets: np.ndarray  # (B, context), inputs shifted left by one
    starts: np.ndarray  # (B,) window start offsets into the split

    @property
    def n_tokens(self) -> int:
        return int(self.inputs.size)


def window_starts(n_tokens: int, context: int) -> np.ndarray:
    """Non-overlapping window starts; every window spans ``context + 1`` tokens."""
    if context < 1:
        raise InvalidConfigError("context must be >= 1")
    if n_tokens < context + 1:
        raise InvalidInputError(f"need at least {context + 1} tokens, have {n_tokens}")
    return np.arange((n_tokens - 1) // context, dtype=np.int64) * context


def _tokens_of(split_) -> np.ndarray:
    return split_.tokens if isinstance(split_, Corpus) else np.asarray(split_)


def make_batch(tokens: np.ndarray, starts: np.ndarray, context: int) -> SequenceBatch:
    idx = starts[:, None] + np.arange(context + 1)[None, :]
    win = tokens[idx].astype(np.int64)
    return SequenceBatch(inputs=win[:, :-1], targets=win[:, 1:], starts=np.asarray(starts))


def batch_iter(
    split_,
    batch_size: int,
    context: int,
    seed: int,
    epochs: int | None = None,
    drop_last: bool = False,
) -> Iterator[SequenceBatch]:
    """Shuffled windows, one permutation per epoch, deterministic in ``seed``.

    ``epochs=None`` cycles forever.
    """
    if batch_size < 1:
        raise InvalidConfigError("batch_size must be >= 1")
    tokens = _tokens_of(split_)
    starts = window_starts(len(tokens), context)
    if drop_last and len(starts) < batch_size:
        raise InvalidInputError(f"only {len(starts)} windows available for batch_size {batch_size}")
    epoch = 0
    while epochs is None or epoch < epochs:
        order = starts[np.random.default_rng([seed, epoch]).permutation(len(starts))]
        for i in range(0, len(order), batch_size):
            chunk = order[i : i + batch_size]
            if drop_last and len(chunk) < batch_size:
                break
            yield make_batch(tokens, chunk, context)
        epoch += 1


def eval_windows(split_, context: int, max_windows: int | None = None) -> SequenceBatch:
    """The first ``max_windows`` non-overlapping windows, in stream order."""
    tokens = _tokens_of(split_)
    starts = window_starts(len(tokens), context)
    if max_windows is not None:
        starts = starts[:max_windows]
    return make_batch(tokens, starts, context)


def oracle_probs(split_: Corpus, batch: SequenceBatch) -> np.ndarray:
    """True next-token distributions for every input position of ``batch``: (B, N, V)."""
    n = batch.inputs.shape[1]
    positions = batch.starts[:, None] + np.arange(1, n + 1)[None, :]
    return split_.conditionals(positions)


# ---------------------------------------------------------------- token files
#
# Binary layout, little-endian:
#   8 bytes  magic b"TADTOK01"
#   u32      vocab size V
#   u64      number of tokens
#   i64      generator seed
#   u32[n]   token ids

TOKEN_MAGIC = b"TADTOK01"
_TOKEN_HEADER = struct.Struct("<8sIQq")


def save_tokens(path, corpus: Corpus) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _TOKEN_HEADER.pack(TOKEN_MAGIC, corpus.vocab_size, len(corpus), corpus.seed)
    path.write_bytes(header + corpus.tokens.astype("<u4").tobytes())
    return path


def load_tokens(path) -> Corpus:
    """Read a token file. The result carries no oracle conditionals."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read token file {path}: {exc}") from exc
    if len(data) < _TOKEN_HEADER.size:
        raise CheckpointError(f"{path}: truncated token file")
    magic, vocab, n, seed = _TOKEN_HEADER.unpack_from(data)
    if magic != TOKEN_MAGIC:
        raise CheckpointError(f"{path} is not a tadlab token file")
    body = data[_TOKEN_HEADER.size :]
    if len(body) != 4 * n:
        raise CheckpointError(f"{path}: expected {n} tokens, found {len(body) // 4}")
    tokens = np.frombuffer(body, dtype="<u4").astype(np.int32)
    if n and int(tokens.max()) >= vocab:
        raise CheckpointError(f"{path}: token id out of range for V={vocab}")
    return Corpus(tokens=tokens, vocab_size=vocab, seed=seed)
