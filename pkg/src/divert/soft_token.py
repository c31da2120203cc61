"""Tempered soft tokens: differentiable stand-ins for sampled error tokens."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from divert.lm import MixedInput, TinyLM, pad_embeds


@dataclass(frozen=True)
class AnnealSchedule:
    lambda_start: float = 1.0
    lambda_end: float = 0.1
    total_steps: int = 1000

    def __post_init__(self):
        if self.lambda_start <= 0 or self.lambda_end <= 0:
            raise ValueError("temperatures must be positive")
        if self.lambda_end > self.lambda_start:
            raise ValueError("lambda_end must not exceed lambda_start")
        if self.total_steps < 1:
            raise ValueError("total_steps must be a positive integer")


def temperature_at(schedule: AnnealSchedule, step: int) -> float:
    """Exponential interpolation from lambda_start to lambda_end, clamped after total_steps."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    frac = min(step, schedule.total_steps) / schedule.total_steps
    ratio = schedule.lambda_end / schedule.lambda_start
    return schedule.lambda_start * ratio**frac


def soft_distribution(z: torch.Tensor, lam: float) -> torch.Tensor:
    if lam <= 0:
        raise ValueError("temperature must be positive")
    if not torch.isfinite(z).all():
        raise FloatingPointError("non-finite logits")
    return F.softmax(z / lam, dim=-1)


def soft_embedding(p: torch.Tensor, embeddings: torch.Tensor) -> torch.Tensor:
    if p.shape[-1] != embeddings.shape[0]:
        raise ValueError(
            f"distribution over {p.shape[-1]} tokens does not match {embeddings.shape[0]} embedding rows"
        )
    return p @ embeddings


@dataclass
class SampledError:
    token_ids: list[int]
    soft_dists: torch.Tensor  # (L, V)
    soft_embeds: torch.Tensor  # (L, D)
    logq_per_pos: torch.Tensor  # (L,)
    truncated: bool = False
    # untempered per-position logits (L, V), kept for the regularizer
    logits: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def logq(self) -> torch.Tensor:
        return self.logq_per_pos.sum()

    def content_ids(self, eos_id: int) -> list[int]:
        """Token ids without the terminating EOS."""
        return self.token_ids[:-1] if self.token_ids and self.token_ids[-1] == eos_id else list(self.token_ids)


@torch.no_grad()
def draw_hard_tokens(
    model: TinyLM,
    prompts: Sequence[MixedInput],
    lam: float,
    max_len: int,
    rng: torch.Generator,
) -> list[tuple[list[int], bool]]:
    """Ancestral sampling from the tempered model, conditioning on hard ids only.

    Returns one ``(ids, truncated)`` tuple per prompt.
    """
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    eos = model.vocab.eos_id
    base = [p.embed(model) for p in prompts]
    out: list[list[int]] = [[] for _ in prompts]
    live = list(range(len(prompts)))
    emb = model.tok_emb.weight
    for _ in range(max_len):
        if not live:
            break
        seqs = [torch.cat([base[b], emb[out[b]]]) if out[b] else base[b] for b in live]
        lengths = [s.shape[0] for s in seqs]
        logits = model.forward_embeds(pad_embeds(seqs))
        z = logits[torch.arange(len(live)), torch.tensor(lengths) - 1]
        probs = soft_distribution(z.double(), lam)
        draws = torch.multinomial(probs, 1, generator=rng).squeeze(1).tolist()
        still = []
        for b, tok in zip(live, draws):
            out[b].append(tok)
            if tok != eos:
                still.append(b)
        live = still
    return [(ids, bool(ids) and ids[-1] != eos) for ids in out]


def score_samples(
    model: TinyLM,
    prompts: Sequence[MixedInput],
    samples: Sequence[Sequence[int]],
    lam: float,
    embeddings: Optional[torch.Tensor] = None,
) -> list[SampledError]:
    """Differentiable tempered distributions for already-drawn hard samples.

    Hard-prefix conditioning means the per-position logits of every sample
    come out of one teacher-forced pass.
    """
    if embeddings is None:
        embeddings = model.tok_emb.weight
    seqs, starts = [], []
    for prompt, ids in zip(prompts, samples):
        e = (prompt + MixedInput.from_ids(ids)).embed(model)
        starts.append(len(prompt) - 1)
        seqs.append(e[:-1])
    logits = model.forward_embeds(pad_embeds(seqs))
    out = []
    eos = model.vocab.eos_id
    for b, ids in enumerate(samples):
        n = len(ids)
        z = logits[b, starts[b] : starts[b] + n]
        p = soft_distribution(z, lam)
        idx = torch.as_tensor(list(ids), dtype=torch.long)
        logq = F.log_softmax(z / lam, dim=-1).gather(-1, idx.unsqueeze(-1)).squeeze(-1)
        out.append(
            SampledError(
                token_ids=list(ids),
                soft_dists=p,
                soft_embeds=soft_embedding(p, embeddings),
                logq_per_pos=logq,
                truncated=bool(ids) and ids[-1] != eos,
                logits=z,
            )
        )
    return out


def sample_errors(
    posterior: TinyLM,
    prompts: Sequence[MixedInput],
    lam: float,
    max_len: int,
    rng: torch.Generator,
    embeddings: Optional[torch.Tensor] = None,
) -> list[SampledError]:
    drawn = draw_hard_tokens(posterior, prompts, lam, max_len, rng)
    return score_samples(posterior, prompts, [ids for ids, _ in drawn], lam, embeddings)


def sample_error(
    posterior: TinyLM,
    prompt: MixedInput,
    lam: float,
    max_len: int,
    rng: torch.Generator,
    embeddings: Optional[torch.Tensor] = None,
) -> SampledError:
    """Draw one error sequence from the tempered posterior with soft-token gradients.

    ``embeddings`` selects the table the soft embeddings are formed from; it
    defaults to the posterior's own input table.
    """
    return sample_errors(posterior, [prompt], lam, max_len, rng, embeddings)[0]
