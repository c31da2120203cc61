"""Beam search, diverse beam search and the overgenerate-and-rank procedure."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import torch
import torch.nn.functional as F

from divert.data import MCQ, normalize_text
from divert.encoding import decoder_prompt_slots, prior_prompt_ids
from divert.lm import MixedInput, TinyLM, pad_embeds
from divert.models import ModelTriple

Prompt = Union[MixedInput, Sequence[int]]


@dataclass(frozen=True)
class ScoredSeq:
    token_ids: tuple[int, ...]
    score: float  # length-normalized
    logprob: float
    group: Optional[int] = None


@dataclass(frozen=True)
class DecodeConfig:
    n_errors: int = 10
    n_distractors: int = 10
    top_k: int = 10
    error_beam_width: Optional[int] = None  # defaults to n_errors
    distractor_beam_width: Optional[int] = None  # defaults to n_distractors
    diversity_groups: Optional[int] = None  # defaults to n_errors
    diversity_penalty: float = 0.5
    max_error_len: int = 48
    max_distractor_len: int = 16
    joint_score: bool = False

    def __post_init__(self):
        if min(self.n_errors, self.n_distractors, self.top_k) < 1:
            raise ValueError("n_errors, n_distractors and top_k must be positive")
        if self.n_errors * self.n_distractors < self.top_k:
            raise ValueError("n_errors * n_distractors must be at least top_k")
        if self.diversity_penalty < 0:
            raise ValueError("diversity_penalty must be nonnegative")
        if self.error_width % self.groups:
            raise ValueError("diversity_groups must divide the error beam width")

    @property
    def error_width(self) -> int:
        return self.error_beam_width or self.n_errors

    @property
    def distractor_width(self) -> int:
        return self.distractor_beam_width or self.n_distractors

    @property
    def groups(self) -> int:
        return self.diversity_groups or self.n_errors


@dataclass(frozen=True)
class ScoredCandidate:
    error: str
    distractor: str
    error_score: float
    distractor_score: float

    def to_dict(self) -> dict:
        return {
            "error": self.error,
            "distractor": self.distractor,
            "error_score": self.error_score,
            "distractor_score": self.distractor_score,
        }


@dataclass
class RankedCandidates:
    candidates: list[ScoredCandidate]
    shortfall: bool = False
    pool_size: int = 0
    errors: list[ScoredSeq] = field(default_factory=list)


def _as_mixed(prompt: Prompt) -> MixedInput:
    return prompt if isinstance(prompt, MixedInput) else MixedInput.from_ids(prompt)


@torch.no_grad()
def _next_logprobs(model: TinyLM, bases: list[torch.Tensor], conts: list[list[int]]) -> torch.Tensor:
    emb = model.tok_emb.weight
    seqs = [torch.cat([b, emb[c]]) if c else b for b, c in zip(bases, conts)]
    last = torch.tensor([s.shape[0] - 1 for s in seqs])
    logits = model.forward_embeds(pad_embeds(seqs))
    return F.log_softmax(logits[torch.arange(len(seqs)), last].double(), dim=-1)


@dataclass
class _Beam:
    ids: list[int]
    logprob: float


class _GroupState:
    def __init__(self, width: int):
        self.width = width
        self.live = [_Beam([], 0.0)]
        self.finished: list[ScoredSeq] = []


def _step_group(state: _GroupState, lp: torch.Tensor, t: int, max_len: int, eos: int,
                group: int, penalty_counts: Optional[Counter], penalty: float):
    """Advance one group by one token; returns the tokens it chose."""
    cum = torch.tensor([b.logprob for b in state.live], dtype=torch.float64).unsqueeze(1) + lp
    select = cum.clone()
    if penalty_counts and penalty > 0:
        for tok, c in penalty_counts.items():
            select[:, tok] -= penalty * c
    n_beams, V = select.shape
    flat = select.flatten()
    finite = torch.isfinite(flat)
    k = min(2 * state.width, int(finite.sum()))
    if k == 0:
        state.live = []
        return []
    # stable descending order so ties resolve by (beam index, token id)
    order = torch.argsort(-flat, stable=True)[:k].tolist()
    new_live: list[_Beam] = []
    chosen = []
    for idx in order:
        i, v = divmod(idx, V)
        beam = state.live[i]
        ids = beam.ids + [v]
        total = float(cum[i, v])
        if v == eos or t == max_len - 1:
            state.finished.append(ScoredSeq(tuple(ids), total / len(ids), total, group))
            chosen.append(v)
        elif len(new_live) < state.width:
            new_live.append(_Beam(ids, total))
            chosen.append(v)
        if len(new_live) == state.width:
            break
    state.live = new_live
    return chosen


def _finalize(state: _GroupState) -> list[ScoredSeq]:
    best: dict[tuple[int, ...], ScoredSeq] = {}
    for s in state.finished:
        if s.token_ids not in best or s.score > best[s.token_ids].score:
            best[s.token_ids] = s
    ranked = sorted(best.values(), key=lambda s: (-s.score, s.token_ids))
    return ranked[: state.width]


def _banned_ids(model: TinyLM) -> list[int]:
    v = model.vocab
    return [i for i in (v.pad_id, v.bos_id, v.unk_id) if i is not None]


def _grouped_search(model: TinyLM, prompt: Prompt, groups: int, width: int, penalty: float,
                    max_len: int) -> list[ScoredSeq]:
    if width < 1 or groups < 1:
        raise ValueError("width and groups must be positive")
    if width % groups:
        raise ValueError("groups must divide width")
    if max_len < 1:
        raise ValueError("max_len must be positive")
    eos = model.vocab.eos_id
    banned = _banned_ids(model)
    base = _as_mixed(prompt).embed(model).detach()
    states = [_GroupState(width // groups) for _ in range(groups)]
    for t in range(max_len):
        active = [g for g in range(groups) if states[g].live]
        if not active:
            break
        conts = [b.ids for g in active for b in states[g].live]
        lp = _next_logprobs(model, [base] * len(conts), conts)
        lp[:, banned] = float("-inf")
        counts: Counter = Counter()
        row = 0
        for g in active:
            n = len(states[g].live)
            chosen = _step_group(states[g], lp[row : row + n], t, max_len, eos, g, counts, penalty)
            row += n
            counts.update(chosen)
    out: dict[tuple[int, ...], ScoredSeq] = {}
    for st in states:
        for s in _finalize(st):
            if s.token_ids not in out or s.score > out[s.token_ids].score:
                out[s.token_ids] = s
    return sorted(out.values(), key=lambda s: (-s.score, s.token_ids))


def beam_search(model: TinyLM, prompt: Prompt, width: int, max_len: int) -> list[ScoredSeq]:
    """Length-normalized beam search; returns at most ``width`` finished sequences, best first."""
    return [
        ScoredSeq(s.token_ids, s.score, s.logprob, None)
        for s in _grouped_search(model, prompt, 1, width, 0.0, max_len)
    ]


def diverse_beam_search(model: TinyLM, prompt: Prompt, groups: int, width: int, penalty: float,
                        max_len: int) -> list[ScoredSeq]:
    """Group-wise beam search with a Hamming diversity penalty between groups.

    At every step a group's candidate token is penalized by ``penalty`` times
    the number of earlier groups' selections of that token at the same step.
    Sequences found by several groups are reported once, under their best
    group.
    """
    return _grouped_search(model, prompt, groups, width, penalty, max_len)


@torch.no_grad()
def beam_search_many(model: TinyLM, prompts: Sequence[Prompt], width: int, max_len: int) -> list[list[ScoredSeq]]:
    """Independent beam searches over several prompts with batched forwards."""
    eos = model.vocab.eos_id
    banned = _banned_ids(model)
    bases = [_as_mixed(p).embed(model).detach() for p in prompts]
    states = [_GroupState(width) for _ in prompts]
    for t in range(max_len):
        active = [i for i, st in enumerate(states) if st.live]
        if not active:
            break
        b_list, conts = [], []
        for i in active:
            for beam in states[i].live:
                b_list.append(bases[i])
                conts.append(beam.ids)
        lp = _next_logprobs(model, b_list, conts)
        lp[:, banned] = float("-inf")
        row = 0
        for i in active:
            n = len(states[i].live)
            _step_group(states[i], lp[row : row + n], t, max_len, eos, None, None, 0.0)
            row += n
    return [[ScoredSeq(s.token_ids, s.score, s.logprob) for s in _finalize(st)] for st in states]


def _rank_key(c: ScoredCandidate, joint: bool):
    primary = c.error_score + c.distractor_score if joint else c.distractor_score
    return (-primary, -c.error_score, c.distractor, c.error)


def rank_pool(pool: Sequence[ScoredCandidate], k: int, joint: bool = False) -> tuple[list[ScoredCandidate], bool]:
    """Deduplicate by normalized distractor text, rank, truncate to ``k``."""
    best: dict[str, ScoredCandidate] = {}
    for c in pool:
        key = normalize_text(c.distractor)
        if not key:
            continue
        if key not in best or _rank_key(c, False) < _rank_key(best[key], False):
            best[key] = c
    ranked = sorted(best.values(), key=lambda c: _rank_key(c, joint))
    return ranked[:k], len(ranked) < k


def overgenerate_rank(models: ModelTriple, mcq: MCQ, config: DecodeConfig) -> RankedCandidates:
    vocab = models.vocab
    eos = vocab.eos_id
    errors = diverse_beam_search(
        models.prior,
        prior_prompt_ids(vocab, mcq),
        groups=config.groups,
        width=config.error_width,
        penalty=config.diversity_penalty,
        max_len=config.max_error_len,
    )[: config.n_errors]
    before, after = decoder_prompt_slots(vocab, mcq)
    contents = [[t for t in e.token_ids if t != eos] for e in errors]
    dec_prompts = [before + c + after for c in contents]
    beams = beam_search_many(models.decoder, dec_prompts, config.distractor_width, config.max_distractor_len)
    pool = []
    for err, content, dists in zip(errors, contents, beams):
        err_text = vocab.decode(content)
        for d in dists[: config.n_distractors]:
            pool.append(ScoredCandidate(err_text, vocab.decode(d.token_ids), err.score, d.score))
    top, short = rank_pool(pool, config.top_k, config.joint_score)
    return RankedCandidates(top, short, len(pool), errors)
