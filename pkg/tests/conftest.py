from __future__ import annotations

import torch
import pytest

from divert.data import MCQ, Corpus, DistractorEntry
from divert.encoding import PairPrompts
from divert.lm import TinyLM, Vocab, build_model
from divert.models import ModelTriple

TINY_TOKENS = ["<pad>", "<bos>", "<eos>", "a"]


def tiny_vocab(extra: int = 1) -> Vocab:
    """Specials plus ``extra`` plain tokens; |V| = 3 + extra."""
    return Vocab(TINY_TOKENS[:3] + [chr(ord("a") + i) for i in range(extra)])


def randomize(model: TinyLM, seed: int, scale: float = 1.0) -> TinyLM:
    """Redraw every parameter so the tiny model has strongly non-uniform outputs."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * scale)
    return model


def tiny_model(seed: int = 0, vocab: Vocab | None = None, dtype=torch.float64, scale: float = 0.5,
               d_model: int = 8) -> TinyLM:
    vocab = vocab or tiny_vocab()
    m = build_model(vocab, seed=seed, d_model=d_model, n_layers=1, n_heads=2, max_len=32)
    m.to(dtype)
    randomize(m, seed, scale)
    m.eval()
    return m


def tiny_triple(seed: int = 0, vocab: Vocab | None = None, dtype=torch.float64, scale: float = 0.5,
                posterior_init_seed: int | None = None) -> ModelTriple:
    vocab = vocab or tiny_vocab()
    post = tiny_model(seed * 4 + 2, vocab, dtype, scale)
    init = None
    if posterior_init_seed is not None:
        init = tiny_model(posterior_init_seed, vocab, dtype, scale)
        for p in init.parameters():
            p.requires_grad_(False)
    return ModelTriple(
        prior=tiny_model(seed * 4, vocab, dtype, scale),
        decoder=tiny_model(seed * 4 + 1, vocab, dtype, scale),
        posterior=post,
        posterior_init=init,
    )


def tiny_pair(vocab: Vocab) -> PairPrompts:
    """Hand-built prompts over the tiny vocabulary."""
    a = vocab.index["a"]
    return PairPrompts(
        posterior=(vocab.bos_id, a, a),
        prior=(vocab.bos_id, a),
        dec_before=(vocab.bos_id,),
        dec_after=(a,),
        distractor=(a, vocab.eos_id),
    )


def lcm_mcq() -> MCQ:
    return MCQ(
        stem="What is the lowest common multiple of 12 and 15?",
        key="60",
        explanation="LCM = 12 x 15 ÷ 3 = 60",
        tags=("Multiples and Lowest Common Multiple", "Identify the Lowest Common Multiple of two numbers"),
        distractors=(
            DistractorEntry("180", "Believes finding the product of two numbers gives their lowest common multiple."),
            DistractorEntry("15", "Believes the largest number in a set of numbers is always their lowest common multiple."),
            DistractorEntry("3", "Confuses factors and multiples."),
        ),
    )


@pytest.fixture
def mcq() -> MCQ:
    return lcm_mcq()


@pytest.fixture
def small_corpus() -> Corpus:
    from divert.synth import generate_corpus, get_families

    return generate_corpus(get_families(), 24, seed=3)


# one line per acceptance criterion, echoed after the run whether it passed or not
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
