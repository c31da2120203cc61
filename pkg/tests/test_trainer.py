import csv
import math

import pytest
import torch

from divert.config import ArchConfig, ScheduleConfig, SFTConfig, TrainConfig, VariationalConfig
from divert.data import Corpus
from divert.encoding import posterior_prompt_ids
from divert.lm import MixedInput, next_logits
from divert.models import ModelTriple, load_checkpoint, save_checkpoint
from divert.objective import LossWeights
from divert.synth import drop_labels, generate_corpus, get_families
from divert.trainer import (
    NonFiniteLossError,
    build_vocab,
    mean_completion_loss,
    sft_examples,
    sft_initialize,
    variational_train,
)

ARCH = ArchConfig(d_model=16, n_layers=1, n_heads=2, max_len=256)


def small_config(**kw) -> TrainConfig:
    base = dict(
        sft=SFTConfig(lr=3e-3, epochs=2, batch_size=8, patience=2),
        variational=VariationalConfig(lr=1e-3, epochs=1, pairs_per_batch=4, max_error_len=8),
        weights=LossWeights(mc_samples=2),
        arch=ARCH,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(get_families(), 6, seed=2)


@pytest.fixture(scope="module")
def sft_triple(corpus):
    return sft_initialize(corpus, small_config(), val=corpus)


def _fresh(triple: ModelTriple) -> ModelTriple:
    import copy

    return copy.deepcopy(triple)


def _posterior_probs(m, corpus, model=None):
    model = model or m.posterior
    out = []
    with torch.no_grad():
        for p in corpus.pairs():
            ids = posterior_prompt_ids(m.vocab, p.mcq, p.distractor)
            out.append(torch.softmax(next_logits(model, MixedInput.from_ids(ids)), -1))
    return torch.stack(out)


def test_single_example_is_memorized():
    one = Corpus((generate_corpus(get_families(["squaring"]), 1, seed=0).items[0],))
    one = Corpus((one.items[0].__class__(one.items[0].stem, one.items[0].key, one.items[0].distractors[:1],
                                           one.items[0].explanation, one.items[0].tags),))
    cfg = small_config(sft=SFTConfig(lr=1e-2, epochs=150, batch_size=1, patience=150))
    m = sft_initialize(one, cfg)
    for role, model in (("prior", m.prior), ("decoder", m.decoder), ("posterior", m.posterior)):
        ex = sft_examples(m.vocab, one.labeled_pairs(), role)
        n_tok = sum(len(t) for _, t in ex)
        assert mean_completion_loss(model, ex) * n_tok <= 0.05


def test_early_stopping_never_worse_than_epoch_zero(sft_triple):
    for role, hist in sft_triple.state["sft_history"].items():
        best = hist["val_loss"][hist["best_epoch"]]
        assert best <= hist["val_loss"][0]
        assert best == min(hist["val_loss"])


def test_sft_uses_only_labeled_pairs_and_variational_all(corpus):
    dropped = drop_labels(corpus, 0.5, seed=1)
    m = sft_initialize(dropped, small_config())
    assert m.state["sft_pairs"] == len(dropped.labeled_pairs()) < len(dropped.pairs())
    m, log = variational_train(m, dropped, small_config())
    assert log.pairs_seen == m.state["variational_pairs"] == len(dropped.pairs())


def test_sft_requires_labels(corpus):
    with pytest.raises(ValueError):
        sft_initialize(drop_labels(corpus, 1.0, 0), small_config())


def test_zero_learning_rate_leaves_parameters_bit_identical(sft_triple, corpus):
    m = _fresh(sft_triple)
    before = [p.detach().clone() for p in m.parameters()]
    cfg = small_config(variational=VariationalConfig(lr=0.0, pairs_per_batch=4, max_error_len=8))
    variational_train(m, corpus, cfg)
    assert all(torch.equal(a, b) for a, b in zip(before, m.parameters()))


def test_training_is_deterministic(sft_triple, corpus):
    a, la = variational_train(_fresh(sft_triple), corpus, small_config(), max_steps=3)
    b, lb = variational_train(_fresh(sft_triple), corpus, small_config(), max_steps=3)
    assert [r["total"] for r in la.rows] == [r["total"] for r in lb.rows]
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


def test_clipping_bounds_post_clip_norm_and_init_is_frozen(sft_triple, corpus):
    m = _fresh(sft_triple)
    init_before = [p.clone() for p in m.posterior_init.parameters()]
    cfg = small_config(variational=VariationalConfig(lr=1e-3, pairs_per_batch=4, max_error_len=8, grad_clip_norm=0.05))
    _, log = variational_train(m, corpus, cfg)
    assert all(r["clipped_norm"] <= 0.05 + 1e-6 for r in log.rows)
    assert any(r["grad_norm"] > 0.05 for r in log.rows)
    assert all(torch.equal(a, b) for a, b in zip(init_before, m.posterior_init.parameters()))


def test_log_csv_and_lambda_schedule(sft_triple, corpus, tmp_path):
    m = _fresh(sft_triple)
    cfg = small_config(schedule=ScheduleConfig(1.0, 0.1))
    _, log = variational_train(m, corpus, cfg, log_path=tmp_path / "log.csv")
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert len(rows) == len(log.rows) == math.ceil(len(corpus.pairs()) / 4)
    assert float(rows[0]["lambda"]) == pytest.approx(1.0)
    assert all(float(a["lambda"]) > float(b["lambda"]) for a, b in zip(rows, rows[1:]))


def test_resume_continues_schedule(sft_triple, corpus, tmp_path):
    cfg = small_config()
    full, full_log = variational_train(_fresh(sft_triple), corpus, cfg)
    variational_train(_fresh(sft_triple), corpus, cfg, max_steps=2, checkpoint_dir=tmp_path / "ck")
    resumed = load_checkpoint(tmp_path / "ck")
    assert resumed.step == 2
    _, rest = variational_train(resumed, corpus, cfg)
    assert [r["lambda"] for r in rest.rows] == [r["lambda"] for r in full_log.rows[2:]]
    assert resumed.step == full.step


def test_checkpoint_roundtrip_is_exact(sft_triple, tmp_path):
    save_checkpoint(sft_triple, tmp_path / "c")
    back = load_checkpoint(tmp_path / "c")
    for name in ("prior", "decoder", "posterior", "posterior_init"):
        for a, b in zip(getattr(sft_triple, name).parameters(), getattr(back, name).parameters()):
            assert torch.equal(a, b)
    assert back.state["sft_pairs"] == sft_triple.state["sft_pairs"]
    assert all(not p.requires_grad for p in back.posterior_init.parameters())


def test_large_alpha_pins_posterior(sft_triple, corpus):
    m = _fresh(sft_triple)
    base = _posterior_probs(m, corpus)
    cfg = small_config(
        variational=VariationalConfig(lr=1e-4, epochs=100, pairs_per_batch=18, max_error_len=8),
        weights=LossWeights(alpha=1e6, mc_samples=2),
    )
    _, log = variational_train(m, corpus, cfg, max_steps=100)
    assert len(log.rows) == 100
    tv = 0.5 * (base - _posterior_probs(m, corpus)).abs().sum(-1)
    assert float(tv.max()) < 0.01


def test_nonfinite_loss_aborts_and_keeps_checkpoint(sft_triple, corpus, tmp_path):
    m = _fresh(sft_triple)
    with torch.no_grad():
        m.decoder.head.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError):
        variational_train(m, corpus, small_config(), checkpoint_dir=tmp_path / "ck")
    assert load_checkpoint(tmp_path / "ck").step == 0


def test_vocab_covers_all_roles(corpus):
    v = build_vocab([corpus])
    for role in ("prior", "decoder", "posterior"):
        for prompt, tgt in sft_examples(v, corpus.labeled_pairs(), role):
            assert v.unk_id not in prompt + tgt
