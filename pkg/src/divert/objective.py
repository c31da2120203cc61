"""Monte Carlo ELBO, the posterior-pinning KL regularizer and the training loss.

Per sampled error ``e`` the ELBO integrand is

    log p_dec(d | s, e) - beta * log q(e | s, d) + beta * log p_prior(e | s)

with the decoder reading ``e`` as soft embeddings and the prior scoring its
hard ids.  ``exact_elbo`` enumerates the error space of tiny models and is
the test oracle for the estimator.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from divert.encoding import PairPrompts, as_pair_prompts
from divert.lm import MixedInput, TinyLM, batch_target_logprobs
from divert.models import ModelTriple
from divert.soft_token import SampledError, sample_errors, soft_distribution, soft_embedding

MAX_ENUMERATION = 100_000


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.1
    alpha: float = 0.95
    mc_samples: int = 4

    def __post_init__(self):
        if self.beta < 0 or self.alpha < 0:
            raise ValueError("beta and alpha must be nonnegative")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be at least 1")


@dataclass
class LossBreakdown:
    reconstruction: float
    kl_term: float
    q_reg: float
    total: float

    def as_row(self) -> dict:
        return {
            "reconstruction": self.reconstruction,
            "kl_term": self.kl_term,
            "q_reg": self.q_reg,
            "total": self.total,
        }


@dataclass
class ElboEstimate:
    """Result of ``elbo_mc``; tensors keep their graphs for backprop."""

    samples: list[SampledError]
    reconstruction: torch.Tensor  # per sample
    log_q: torch.Tensor  # per sample, tempered
    log_prior: torch.Tensor  # per sample
    beta: float

    @property
    def kl(self) -> torch.Tensor:
        return self.beta * (self.log_q - self.log_prior)

    @property
    def per_sample(self) -> torch.Tensor:
        return self.reconstruction - self.kl

    @property
    def estimate(self) -> torch.Tensor:
        return self.per_sample.mean()


def _elbo_terms(
    models: ModelTriple,
    pps: Sequence[PairPrompts],
    samples: Sequence[SampledError],
):
    eos = models.vocab.eos_id
    dec_inputs = []
    for pp, smp in zip(pps, samples):
        n = len(smp.content_ids(eos))
        dec_inputs.append(pp.decoder_soft(smp.soft_embeds[:n]))
    recon = batch_target_logprobs(models.decoder, dec_inputs, [pp.distractor for pp in pps])
    log_prior = batch_target_logprobs(
        models.prior, [MixedInput.from_ids(pp.prior) for pp in pps], [s.token_ids for s in samples]
    )
    log_q = torch.stack([s.logq for s in samples])
    return recon, log_q, log_prior


def elbo_samples(
    models: ModelTriple,
    pps: Sequence[PairPrompts],
    weights: LossWeights,
    lam: float,
    rng: torch.Generator,
    max_len: int = 48,
) -> ElboEstimate:
    """Draw ``weights.mc_samples`` errors for every pair in ``pps`` (pair-major order)."""
    rep = [pp for pp in pps for _ in range(weights.mc_samples)]
    prompts = [MixedInput.from_ids(pp.posterior) for pp in rep]
    samples = sample_errors(
        models.posterior, prompts, lam, max_len, rng, embeddings=models.decoder.tok_emb.weight
    )
    recon, log_q, log_prior = _elbo_terms(models, rep, samples)
    return ElboEstimate(samples, recon, log_q, log_prior, weights.beta)


def elbo_mc(
    models: ModelTriple,
    pair,
    weights: LossWeights,
    lam: float,
    rng: torch.Generator,
    max_len: int = 48,
) -> ElboEstimate:
    """Plain Monte Carlo ELBO estimate for one (stem, distractor) pair."""
    pp = as_pair_prompts(models.vocab, pair)
    return elbo_samples(models, [pp], weights, lam, rng, max_len)


def kl_rows(p_logits: torch.Tensor, q_logits: torch.Tensor) -> torch.Tensor:
    """Row-wise KL(p || q) between categorical distributions given by logits."""
    lp = F.log_softmax(p_logits, dim=-1)
    lq = F.log_softmax(q_logits, dim=-1)
    return (lp.exp() * (lp - lq)).sum(dim=-1)


def _teacher_forced_logits(model: TinyLM, prompts: Sequence[Sequence[int]], samples: Sequence[Sequence[int]]):
    """Next-token logits at each sampled position, one (L_i, V) tensor per sample."""
    _, _, rows, _ = batch_target_logprobs(
        model, [MixedInput.from_ids(p) for p in prompts], samples, per_position=True
    )
    # rows are log-softmax values; as logits they give the same distributions
    return [rows[b, : len(s)] for b, s in enumerate(samples)]


def q_regularizer_batch(
    posterior: TinyLM,
    frozen_init: TinyLM,
    prompts: Sequence[Sequence[int]],
    samples: Sequence[SampledError],
) -> torch.Tensor:
    """Per-sample sum over positions of KL(q_init || q), both on the sampled hard prefix."""
    ids = [s.token_ids for s in samples]
    with torch.no_grad():
        init_rows = _teacher_forced_logits(frozen_init, prompts, ids)
    live_rows = []
    missing = [s.logits is None for s in samples]
    if any(missing):
        live_rows = _teacher_forced_logits(posterior, prompts, ids)
    out = []
    for b, s in enumerate(samples):
        live = live_rows[b] if missing[b] else s.logits
        out.append(kl_rows(init_rows[b], live).sum())
    return torch.stack(out)


def q_regularizer(posterior: TinyLM, frozen_init: TinyLM, pair, sample: SampledError) -> torch.Tensor:
    pp = as_pair_prompts(posterior.vocab, pair)
    ids = [sample.token_ids]
    with torch.no_grad():
        init_rows = _teacher_forced_logits(frozen_init, [pp.posterior], ids)[0]
    live_rows = _teacher_forced_logits(posterior, [pp.posterior], ids)[0]
    return kl_rows(init_rows, live_rows).sum()


def total_loss(elbo, reg, weights: LossWeights):
    return -elbo + weights.alpha * reg


def pair_losses(
    models: ModelTriple,
    pps: Sequence[PairPrompts],
    weights: LossWeights,
    lam: float,
    rng: torch.Generator,
    max_len: int = 48,
):
    """Mean training loss over ``pps`` and its breakdown, one MC batch for all pairs."""
    est = elbo_samples(models, pps, weights, lam, rng, max_len)
    m = weights.mc_samples
    rep_prompts = [pp.posterior for pp in pps for _ in range(m)]
    reg = q_regularizer_batch(models.posterior, models.posterior_init, rep_prompts, est.samples)
    elbo = est.per_sample.mean()
    qreg = reg.mean()
    loss = total_loss(elbo, qreg, weights)
    breakdown = LossBreakdown(
        reconstruction=est.reconstruction.mean().item(),
        kl_term=est.kl.mean().item(),
        q_reg=qreg.item(),
        total=loss.item(),
    )
    return loss, breakdown


# ---------------------------------------------------------------------------
# exact enumeration oracles


def enumerate_errors(vocab_size: int, eos: int, max_len: int) -> list[list[int]]:
    """All error sequences a sampler can emit: EOS-terminated up to ``max_len``,
    plus the non-terminated ones truncated at ``max_len``."""
    non_eos = [t for t in range(vocab_size) if t != eos]
    count = sum(len(non_eos) ** (n - 1) for n in range(1, max_len)) + len(non_eos) ** (max_len - 1) * vocab_size
    if count > MAX_ENUMERATION:
        raise ValueError(f"error space of {count} sequences exceeds the enumeration guard")
    seqs = []
    for n in range(1, max_len + 1):
        for head in itertools.product(non_eos, repeat=n - 1):
            if n < max_len:
                seqs.append(list(head) + [eos])
            else:
                seqs.extend(list(head) + [t] for t in range(vocab_size))
    return seqs


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


@torch.no_grad()
def _enumerated_terms(models: ModelTriple, pp: PairPrompts, max_len: int, lam: Optional[float], chunk=2048):
    V = len(models.vocab)
    eos = models.vocab.eos_id
    seqs = enumerate_errors(V, eos, max_len)
    log_q, log_p, log_d = [], [], []
    for part in _chunks(seqs, chunk):
        q_logits = _teacher_forced_logits(models.posterior, [pp.posterior] * len(part), part)
        if lam is None:
            lq = [rows.gather(-1, torch.tensor(s).unsqueeze(-1)).sum() for rows, s in zip(q_logits, part)]
            dec_in = [pp.decoder_input([t for t in s if t != eos]) for s in part]
        else:
            lq, dec_in = [], []
            for rows, s in zip(q_logits, part):
                lq.append(F.log_softmax(rows / lam, -1).gather(-1, torch.tensor(s).unsqueeze(-1)).sum())
                n = len(s) - 1 if s[-1] == eos else len(s)
                soft = soft_embedding(soft_distribution(rows, lam), models.decoder.tok_emb.weight)
                dec_in.append(pp.decoder_soft(soft[:n]))
        log_q.append(torch.stack(lq))
        log_p.append(batch_target_logprobs(models.prior, [MixedInput.from_ids(pp.prior)] * len(part), part))
        log_d.append(batch_target_logprobs(models.decoder, dec_in, [pp.distractor] * len(part)))
    return torch.cat(log_q), torch.cat(log_p), torch.cat(log_d)


def exact_elbo_moments(
    models: ModelTriple, pair, beta: float, max_len: int, lam: Optional[float] = None
) -> tuple[float, float]:
    """Mean and variance under q of the per-sample ELBO integrand, by enumeration.

    The variance gives the true standard error of an n-draw Monte Carlo mean,
    which the sample standard deviation underestimates when q is nearly
    deterministic.
    """
    pp = as_pair_prompts(models.vocab, pair)
    log_q, log_p, log_d = _enumerated_terms(models, pp, max_len, lam)
    q = log_q.exp()
    f = log_d - beta * (log_q - log_p)
    # q * f is 0 where q underflows, even though log q is -inf there
    f = torch.where(q > 0, f, torch.zeros_like(f))
    mean = (q * f).sum()
    var = (q * (f - mean) ** 2).sum()
    return float(mean), float(var)


def exact_elbo(models: ModelTriple, pair, beta: float, max_len: int, lam: Optional[float] = None) -> float:
    """ELBO computed by enumerating every error sequence up to ``max_len``.

    With ``lam=None`` the posterior is untempered and the decoder reads hard
    error tokens.  With a temperature, the posterior is tempered and the
    decoder reads the soft embeddings, which is exactly the expectation of the
    Monte Carlo estimator at that temperature.
    """
    return exact_elbo_moments(models, pair, beta, max_len, lam)[0]


def log_marginal(models: ModelTriple, pair, max_len: int) -> float:
    """log sum_e p(e|s) p(d|s,e) over the same truncated error space."""
    pp = as_pair_prompts(models.vocab, pair)
    _, log_p, log_d = _enumerated_terms(models, pp, max_len, None)
    return float(torch.logsumexp(log_p + log_d, dim=0))

