"""Tail-aware knowledge distillation for causal language models, at toy scale."""

from tadlab.corpus import Corpus, CorpusConfig, generate_corpus, split
from tadlab.divergence import (
    DivergenceConfig,
    decompose,
    grad_kl_logits,
    grad_tad_logits,
    kl_divergence,
    reverse_kl,
    sequence_beta,
    tad_token_loss,
    top_k_split,
)
from tadlab.errors import (
    BetaBelowOneWarning,
    CheckpointError,
    DegenerateWarning,
    InvalidConfigError,
    InvalidInputError,
    NumericFailure,
    TadlabError,
)
from tadlab.metrics import MetricReport, full_ece, heldout_kl, mismatch_rate, tail_mass_curve
from tadlab.model import ModelConfig, TinyCausalLM, init_model, init_student_from_teacher
from tadlab.trainer import TrainConfig, TrainingLog, distill, train_clm

__version__ = "0.1.0"
