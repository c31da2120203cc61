"""Deterministic metric fixtures."""

from __future__ import annotations

import random

from divert.data import Corpus
from divert.synth import generate_corpus, get_families

PHRASES = [
    "Confuses factors and multiples.",
    "confuses  factors and multiples.",
    "Believes the product is the LCM.",
    "Adds the numbers instead.",
    "Mixes up squaring and doubling",
    "Reads a power as a normal digit",
    "Subtracts instead of divides.",
    "Divides both numerator and denominator.",
]


def metric_fixture(seed: int = 0, n: int = 20) -> tuple[Corpus, dict[str, dict]]:
    """``n`` synthetic MCQs plus hand-scrambled generations that hit, miss and duplicate gold answers."""
    corpus = generate_corpus(get_families(), n, seed=seed)
    rng = random.Random(seed)
    gens = {}
    for mcq in corpus.items:
        gold = [d.answer for d in mcq.distractors]
        pool = gold + [mcq.key, "7", "12/5", " " + gold[0].upper() + " ", "99"]
        rng.shuffle(pool)
        cands = []
        for ans in pool[: rng.randint(1, len(pool))]:
            cands.append({"distractor": ans, "error": rng.choice(PHRASES + [d.error for d in mcq.distractors])})
        gens[mcq.stem] = {"stem": mcq.stem, "candidates": cands}
    return corpus, gens
