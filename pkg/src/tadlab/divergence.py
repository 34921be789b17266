"""Per-token divergence kernels and their analytic gradients w.r.t. student logits.

All arithmetic is float64. The single-token functions validate their inputs and
mirror the textbook definitions; the ``*_batch`` kernels accept any leading shape
(vocabulary on the last axis), skip validation and are what the trainer calls.

Top-K sets are always taken from the *teacher* distribution. Ties are broken by
ascending token id.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from tadlab.errors import (
    BetaBelowOneWarning,
    DegenerateWarning,
    InvalidConfigError,
    InvalidInputError,
    ShapeError,
)

EPSILON = 1e-12
_SUM_TOL = 1e-9


@dataclass(frozen=True)
class DivergenceConfig:
    """Hyper-parameters of the TAD loss family."""

    K: int = 10
    beta: float = 2.0
    temperature: float = 1.0
    epsilon: float = EPSILON

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise InvalidConfigError(f"K must be a positive integer, got {self.K}")
        if not self.beta > 0:
            raise InvalidConfigError(f"beta must be > 0, got {self.beta}")
        if not self.temperature > 0:
            raise InvalidConfigError(f"temperature must be > 0, got {self.temperature}")
        if not self.epsilon > 0:
            raise InvalidConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.beta < 1:
            warnings.warn(
                f"beta={self.beta} < 1: the per-sequence tail weight may fall below one",
                BetaBelowOneWarning,
                stacklevel=3,
            )


@dataclass(frozen=True)
class TopKSplit:
    indices: tuple[int, ...]
    head_mass: float
    tail_mass: float


@dataclass(frozen=True)
class TokenDivergenceBreakdown:
    d_kl1: float
    d_kl2: float
    alpha_teacher: float
    degenerate: bool = False


# ---------------------------------------------------------------- validation


def _as_logits(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] < 2:
        raise ShapeError(f"expected a logit vector of length >= 2, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits contain NaN or Inf")
    return z


def _as_dist(probs, name: str = "distribution") -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 2:
        raise ShapeError(f"{name}: expected a vector of length >= 2, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidInputError(f"{name}: entries must be finite and non-negative")
    if abs(p.sum() - 1.0) > _SUM_TOL:
        raise InvalidInputError(f"{name}: entries sum to {p.sum()!r}, not 1")
    return p


def _as_pair(p_t, p_s) -> tuple[np.ndarray, np.ndarray]:
    p_t = _as_dist(p_t, "teacher")
    p_s = _as_dist(p_s, "student")
    if p_t.shape != p_s.shape:
        raise ShapeError(f"teacher/student length mismatch: {p_t.shape} vs {p_s.shape}")
    return p_t, p_s


def _check_k(k, vocab: int) -> int:
    if int(k) != k or not 1 <= k < vocab:
        raise InvalidConfigError(f"K must satisfy 1 <= K < V={vocab}, got {k}")
    return int(k)


# ---------------------------------------------------------------- primitives


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Max-subtracted softmax of ``logits / temperature`` along the last axis."""
    if not temperature > 0:
        raise InvalidConfigError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits contain NaN or Inf")
    return softmax_batch(z, temperature)


def softmax_batch(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64) / temperature
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _plog_ratio(p: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    """Elementwise p * (ln p - log_q) with 0 * anything := 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = p * (np.log(p) - log_q)
    return np.where(p > 0, out, 0.0)


def top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis.

    Ordered by descending probability; equal probabilities keep ascending id.
    """
    # stable sort of the negated values keeps ascending ids among ties
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


def head_mask(probs: np.ndarray, k: int) -> np.ndarray:
    mask = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(mask, top_k_indices(probs, k), True, axis=-1)
    return mask


def top_k_split(dist, K: int) -> TopKSplit:
    p = _as_dist(dist)
    k = _check_k(K, p.shape[0])
    idx = top_k_indices(p, k)
    head = float(p[idx].sum())
    return TopKSplit(indices=tuple(int(i) for i in idx), head_mass=head, tail_mass=1.0 - head)


# ---------------------------------------------------------------- losses


def kl_divergence_batch(p_t, p_s, epsilon: float = EPSILON) -> np.ndarray:
    return _plog_ratio(p_t, np.log(np.maximum(p_s, epsilon))).sum(axis=-1)


def kl_divergence(p_T, p_S, epsilon: float = EPSILON) -> float:
    """Forward KL(teacher || student) with the student floored at ``epsilon``."""
    p_t, p_s = _as_pair(p_T, p_S)
    return float(kl_divergence_batch(p_t, p_s, epsilon))


def reverse_kl(p_T, p_S, epsilon: float = EPSILON) -> float:
    """KL(student || teacher)."""
    p_t, p_s = _as_pair(p_T, p_S)
    return float(kl_divergence_batch(p_s, p_t, epsilon))


@dataclass
class TadTerms:
    """Batched pieces of the top-K/tail decomposition."""

    d_kl1: np.ndarray
    d_kl2: np.ndarray
    alpha_teacher: np.ndarray
    alpha_student: np.ndarray
    head: np.ndarray
    degenerate: np.ndarray


def decompose_batch(p_t: np.ndarray, p_s: np.ndarray, k: int, epsilon: float = EPSILON) -> TadTerms:
    head = head_mask(p_t, k)
    tail = ~head
    alpha_t = np.where(tail, p_t, 0.0).sum(axis=-1)
    alpha_s = np.where(tail, p_s, 0.0).sum(axis=-1)

    log_ps = np.log(np.maximum(p_s, epsilon))
    log_as = np.log(np.maximum(alpha_s, epsilon))
    head_part = np.where(head, _plog_ratio(p_t, log_ps), 0.0).sum(axis=-1)
    d_kl1 = head_part + _plog_ratio(alpha_t, log_as)

    degenerate = alpha_t < epsilon
    a_t = np.maximum(alpha_t, epsilon)[..., None]
    pt_tail = np.where(tail, p_t, 0.0) / a_t
    # ln(p_s / alpha_s) built from the same clamped logs as the full KL, so the
    # identity KL = D1 + alpha * D2 survives clamping
    d_kl2 = _plog_ratio(pt_tail, log_ps - log_as[..., None]).sum(axis=-1)
    d_kl2 = np.where(degenerate, 0.0, d_kl2)
    return TadTerms(d_kl1, d_kl2, alpha_t, alpha_s, head, degenerate)


def decompose(p_T, p_S, K: int, epsilon: float = EPSILON) -> TokenDivergenceBreakdown:
    """Split KL(teacher || student) into a top-K head term and a renormalized tail term.

    ``d_kl1`` covers the teacher's K largest tokens plus one aggregated entry for
    the remaining mass; ``d_kl2`` is the KL between the two renormalized tails.
    ``d_kl1 + alpha_teacher * d_kl2`` equals the full KL.
    """
    p_t, p_s = _as_pair(p_T, p_S)
    k = _check_k(K, p_t.shape[0])
    terms = decompose_batch(p_t, p_s, k, epsilon)
    degenerate = bool(terms.degenerate)
    if degenerate:
        warnings.warn("teacher tail mass below epsilon; d_kl2 set to 0", DegenerateWarning, stacklevel=2)
    return TokenDivergenceBreakdown(
        d_kl1=float(terms.d_kl1),
        d_kl2=float(terms.d_kl2),
        alpha_teacher=float(terms.alpha_teacher),
        degenerate=degenerate,
    )


def sequence_beta(alphas, beta: float, epsilon: float = EPSILON) -> float:
    """Per-sequence tail weight ``beta / mean(alphas)``."""
    a = np.asarray(alphas, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise InvalidInputError("sequence_beta needs a non-empty 1-D list of tail masses")
    if not beta > 0:
        raise InvalidConfigError(f"beta must be > 0, got {beta}")
    if beta < 1:
        warnings.warn(f"beta={beta} < 1", BetaBelowOneWarning, stacklevel=2)
    mean = float(a.mean())
    if mean < epsilon:
        warnings.warn("mean tail mass below epsilon; sequence is degenerate", DegenerateWarning, stacklevel=2)
    return beta / max(mean, epsilon)


def sequence_beta_batch(alphas: np.ndarray, beta: float, epsilon: float = EPSILON) -> np.ndarray:
    """Row-wise ``beta / max(mean_t alpha_t, epsilon)`` for an (..., N) array."""
    return beta / np.maximum(alphas.mean(axis=-1), epsilon)


def tad_token_loss(p_T, p_S, K: int, beta_X: float, epsilon: float = EPSILON) -> float:
    b = decompose(p_T, p_S, K, epsilon)
    return b.d_kl1 + beta_X * b.alpha_teacher * b.d_kl2


def clm_token_loss(p_S, target: int, epsilon: float = EPSILON) -> float:
    p = _as_dist(p_S, "student")
    if int(target) != target or not 0 <= target < p.shape[0]:
        raise InvalidInputError(f"target {target} outside vocabulary of size {p.shape[0]}")
    return float(-np.log(max(p[int(target)], epsilon)))


# ---------------------------------------------------------------- gradients


def grad_kl_logits(p_T, p_S) -> np.ndarray:
    p_t, p_s = _as_pair(p_T, p_S)
    return p_s - p_t


def grad_tad_batch(
    p_t: np.ndarray,
    p_s: np.ndarray,
    terms: TadTerms,
    beta_x,
    epsilon: float = EPSILON,
) -> np.ndarray:
    """Gradient of ``d_kl1 + beta_x * alpha_t * d_kl2`` w.r.t. the student logits.

    Head entries are exactly ``p_s - p_t``; tail entries get the extra
    ``(beta_x - 1) * (p_s * alpha_t / alpha_s - p_t)``.
    """
    g = p_s - p_t
    beta_x = np.asarray(beta_x, dtype=np.float64)[..., None]
    ratio = (terms.alpha_teacher / np.maximum(terms.alpha_student, epsilon))[..., None]
    extra = (beta_x - 1.0) * (p_s * ratio - p_t)
    extra = np.where(terms.degenerate[..., None], 0.0, extra)
    return np.where(terms.head, g, g + extra)


def grad_tad_logits(p_T, p_S, K: int, beta_X: float, epsilon: float = EPSILON) -> np.ndarray:
    p_t, p_s = _as_pair(p_T, p_S)
    k = _check_k(K, p_t.shape[0])
    if beta_X < 1:
        warnings.warn(f"beta_X={beta_X} < 1", BetaBelowOneWarning, stacklevel=2)
    terms = decompose_batch(p_t, p_s, k, epsilon)
    if terms.alpha_student < epsilon:
        warnings.warn("student head mass within epsilon of 1; denominator clamped", DegenerateWarning, stacklevel=2)
    return grad_tad_batch(p_t, p_s, terms, beta_X, epsilon)


def grad_rkl_batch(p_t: np.ndarray, p_s: np.ndarray, epsilon: float = EPSILON) -> np.ndarray:
    log_ratio = np.log(np.maximum(p_s, epsilon)) - np.log(np.maximum(p_t, epsilon))
    rkl = _plog_ratio(p_s, np.log(np.maximum(p_t, epsilon))).sum(axis=-1, keepdims=True)
    return np.where(p_s > 0, p_s * (log_ratio - rkl), 0.0)


def grad_rkl_logits(p_T, p_S, epsilon: float = EPSILON) -> np.ndarray:
    p_t, p_s = _as_pair(p_T, p_S)
    return grad_rkl_batch(p_t, p_s, epsilon)


def clm_grad_logits(p_S, target: int) -> np.ndarray:
    p = _as_dist(p_S, "student")
    if int(target) != target or not 0 <= target < p.shape[0]:
        raise InvalidInputError(f"target {target} outside vocabulary of size {p.shape[0]}")
    g = p.copy()
    g[int(target)] -= 1.0
    return g


# ---------------------------------------------------------------- sequence assembly


@dataclass
class SequenceLoss:
    """Per-token divergence values and logit gradients for a batch of sequences."""

    loss: np.ndarray  # (..., N)
    grad: np.ndarray  # (..., N, V)
    beta_x: np.ndarray | None = None  # (...,) for tad
    terms: TadTerms | None = None


def divergence_batch(mode: str, p_t: np.ndarray, p_s: np.ndarray, cfg: DivergenceConfig) -> SequenceLoss:
    """Divergence loss and its logit gradient for (..., N, V) probabilities.

    ``mode`` is one of ``vanilla_kd``, ``tad`` or ``rkl``. For ``tad`` the tail
    weight is computed once per sequence (the last-but-one axis).
    """
    eps = cfg.epsilon
    if mode == "vanilla_kd":
        return SequenceLoss(kl_divergence_batch(p_t, p_s, eps), p_s - p_t)
    if mode == "rkl":
        return SequenceLoss(kl_divergence_batch(p_s, p_t, eps), grad_rkl_batch(p_t, p_s, eps))
    if mode == "tad":
        k = _check_k(cfg.K, p_t.shape[-1])
        terms = decompose_batch(p_t, p_s, k, eps)
        beta_x = sequence_beta_batch(terms.alpha_teacher, cfg.beta, eps)
        loss = terms.d_kl1 + beta_x[..., None] * terms.alpha_teacher * terms.d_kl2
        grad = grad_tad_batch(p_t, p_s, terms, beta_x[..., None], eps)
        return SequenceLoss(loss, grad, beta_x, terms)
    raise InvalidConfigError(f"unknown divergence mode {mode!r}")
