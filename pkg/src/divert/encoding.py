"""Token-level views of the three prompt formats."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from divert.data import MCQ, Pair, prompt_parts
from divert.lm import MixedInput, Vocab


def encode_text(vocab: Vocab, text: str) -> list[int]:
    return vocab.encode(text)


def encode_target(vocab: Vocab, text: str) -> list[int]:
    return vocab.encode(text) + [vocab.eos_id]


def prior_prompt_ids(vocab: Vocab, mcq: MCQ) -> list[int]:
    return [vocab.bos_id] + vocab.encode(prompt_parts(mcq, "prior")[0])


def posterior_prompt_ids(vocab: Vocab, mcq: MCQ, distractor: str) -> list[int]:
    return [vocab.bos_id] + vocab.encode(prompt_parts(mcq, "posterior", distractor)[0])


def decoder_prompt_slots(vocab: Vocab, mcq: MCQ) -> tuple[list[int], list[int]]:
    before, after = prompt_parts(mcq, "decoder")
    return [vocab.bos_id] + vocab.encode(before), vocab.encode(after)


@dataclass(frozen=True)
class PairPrompts:
    """Everything the objective needs about one (stem, distractor) pair, as token ids.

    The decoder prompt is ``dec_before + <error> + dec_after``.
    """

    posterior: tuple[int, ...]
    prior: tuple[int, ...]
    dec_before: tuple[int, ...]
    dec_after: tuple[int, ...]
    distractor: tuple[int, ...]

    def decoder_input(self, error: Sequence) -> MixedInput:
        """Decoder prompt with the error given as hard ids or (D,) soft vectors."""
        return MixedInput(list(self.dec_before) + list(error) + list(self.dec_after))

    def decoder_soft(self, soft_embeds: torch.Tensor) -> MixedInput:
        return self.decoder_input(list(soft_embeds.unbind(0)))


def encode_pair(vocab: Vocab, pair: Pair) -> PairPrompts:
    before, after = decoder_prompt_slots(vocab, pair.mcq)
    return PairPrompts(
        posterior=tuple(posterior_prompt_ids(vocab, pair.mcq, pair.distractor)),
        prior=tuple(prior_prompt_ids(vocab, pair.mcq)),
        dec_before=tuple(before),
        dec_after=tuple(after),
        distractor=tuple(encode_target(vocab, pair.distractor)),
    )


def as_pair_prompts(vocab: Vocab, pair) -> PairPrompts:
    return pair if isinstance(pair, PairPrompts) else encode_pair(vocab, pair)


def decoder_prompt_ids(vocab: Vocab, mcq: MCQ, error: Optional[str]) -> list[int]:
    before, after = decoder_prompt_slots(vocab, mcq)
    return before + vocab.encode(error or "") + after
