"""Variational learning of textual error representations behind math MCQ distractors."""

from divert.data import MCQ, Corpus, DistractorEntry, Pair, load_corpus, save_corpus, split_by_stem
from divert.decoding import DecodeConfig, beam_search, diverse_beam_search, overgenerate_rank
from divert.lm import TinyLM, Vocab, build_model, sequence_logprob
from divert.models import ModelTriple, load_checkpoint, save_checkpoint
from divert.objective import LossWeights, elbo_mc, exact_elbo, log_marginal, q_regularizer, total_loss
from divert.soft_token import AnnealSchedule, sample_error, soft_distribution, soft_embedding, temperature_at

__version__ = "0.1.0"

__all__ = [
    "AnnealSchedule",
    "Corpus",
    "DecodeConfig",
    "DistractorEntry",
    "LossWeights",
    "MCQ",
    "ModelTriple",
    "Pair",
    "TinyLM",
    "Vocab",
    "beam_search",
    "build_model",
    "diverse_beam_search",
    "elbo_mc",
    "exact_elbo",
    "load_checkpoint",
    "load_corpus",
    "log_marginal",
    "overgenerate_rank",
    "q_regularizer",
    "sample_error",
    "save_checkpoint",
    "save_corpus",
    "sequence_logprob",
    "soft_distribution",
    "soft_embedding",
    "split_by_stem",
    "temperature_at",
    "total_loss",
]
