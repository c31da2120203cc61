import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from divert.lm import (
    CheckpointError,
    ContextLengthError,
    MixedInput,
    Vocab,
    VocabError,
    batch_target_logprobs,
    clone_frozen,
    load_model,
    next_logits,
    save_model,
    sequence_logprob,
)
from divert.soft_token import soft_embedding

from conftest import tiny_model, tiny_vocab
from oracles import all_sequences, fd_check


def test_vocab_roundtrip_on_prompt_text():
    text = "The question is: Calculate 12/7 ÷ 3\nThe correct answer is: 4/7"
    v = Vocab.build([text])
    assert v.decode(v.encode(text)) == text


def test_digits_always_spelled():
    v = Vocab.build(["180 is big"])
    ids = v.encode("180")
    assert [v.tokens[i] for i in ids] == ["1", "##8", "##0"]


def test_oov_word_falls_back_to_characters():
    v = Vocab.build(["abc"])
    assert v.decode(v.encode("cab")) == "cab"


def test_unknown_character_maps_to_unk():
    v = Vocab.build(["abc"])
    assert v.unk_id in v.encode("z")


def test_tiny_vocab_without_unk_rejects_unknown():
    v = tiny_vocab()
    with pytest.raises(VocabError):
        v.encode("zz")


def test_vocab_requires_specials():
    with pytest.raises(VocabError):
        Vocab(["<pad>", "a"])


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.lists(st.sampled_from(["Believes", "the", "12", "x", "3/4", "÷", "multiple.", "het"]), min_size=1, max_size=6),
        min_size=1,
        max_size=3,
    )
)
def test_decode_inverts_encode(lines):
    text = "\n".join(" ".join(words) for words in lines)
    # round trip holds for any word spelled from characters the vocabulary has seen
    v = Vocab.build(["Believes the multiple. x ÷ /"])
    assert v.decode(v.encode(text)) == text


def test_one_hot_soft_segment_matches_hard_token():
    m = tiny_model(1)
    a = m.vocab.index["a"]
    onehot = torch.zeros(len(m.vocab), dtype=torch.float64)
    onehot[a] = 1.0
    soft = soft_embedding(onehot, m.tok_emb.weight)
    hard = next_logits(m, MixedInput([m.vocab.bos_id, a]))
    mixed = next_logits(m, MixedInput([m.vocab.bos_id, soft]))
    assert torch.allclose(hard, mixed, atol=1e-9, rtol=0)


def test_sequence_probabilities_sum_to_one():
    """Over the sampler's support (EOS-terminated or truncated), probabilities sum to 1."""
    m = tiny_model(2)
    V = len(m.vocab)
    prompt = MixedInput([m.vocab.bos_id])
    seqs = list(all_sequences(V, m.vocab.eos_id, 3, range(V)))
    with torch.no_grad():
        lp = batch_target_logprobs(m, [prompt] * len(seqs), seqs)
    assert math.isclose(float(lp.exp().sum()), 1.0, abs_tol=1e-10)


def test_batched_matches_single():
    m = tiny_model(3)
    b, e, a = m.vocab.bos_id, m.vocab.eos_id, m.vocab.index["a"]
    prompts = [MixedInput([b]), MixedInput([b, a, a])]
    targets = [[a, e], [e]]
    batched = batch_target_logprobs(m, prompts, targets)
    for i in range(2):
        single = sequence_logprob(m, prompts[i], targets[i])
        assert torch.allclose(batched[i], single, atol=1e-12)


def test_sequence_logprob_requires_eos():
    m = tiny_model(0)
    with pytest.raises(ValueError):
        sequence_logprob(m, MixedInput([m.vocab.bos_id]), [m.vocab.index["a"]])


def test_out_of_range_target_rejected():
    m = tiny_model(0)
    with pytest.raises(VocabError):
        sequence_logprob(m, MixedInput([m.vocab.bos_id]), [99, m.vocab.eos_id])


def test_context_length_enforced():
    m = tiny_model(0)
    with pytest.raises(ContextLengthError):
        next_logits(m, MixedInput([m.vocab.bos_id] * 40))
    with pytest.raises(ContextLengthError):
        next_logits(m, MixedInput([]))


def test_sequence_logprob_gradient_matches_finite_differences():
    m = tiny_model(4)
    b, e, a = m.vocab.bos_id, m.vocab.eos_id, m.vocab.index["a"]
    err = fd_check(lambda: sequence_logprob(m, MixedInput([b, a]), [a, a, e]), list(m.parameters()))
    assert err <= 1e-3


def test_clone_is_frozen_and_identical():
    m = tiny_model(5)
    c = clone_frozen(m)
    x = MixedInput([m.vocab.bos_id, m.vocab.index["a"]])
    assert torch.equal(next_logits(m, x), next_logits(c, x))
    assert all(not p.requires_grad for p in c.parameters())
    with torch.no_grad():
        for p in m.parameters():
            p.add_(1.0)
    assert not torch.equal(next_logits(m, x), next_logits(c, x))


def test_model_save_load_roundtrip(tmp_path):
    m = tiny_model(6)
    m.step = 17
    save_model(m, tmp_path / "m")
    r = load_model(tmp_path / "m")
    assert r.step == 17 and r.vocab == m.vocab
    gen = torch.Generator().manual_seed(0)
    for _ in range(20):
        ids = torch.randint(0, len(m.vocab), (int(torch.randint(1, 6, (1,), generator=gen)),), generator=gen)
        prompt = MixedInput([m.vocab.bos_id] + ids.tolist())
        assert torch.equal(next_logits(m, prompt), next_logits(r, prompt))


def test_model_version_mismatch_refused(tmp_path):
    import json

    m = tiny_model(0)
    save_model(m, tmp_path / "m")
    meta = json.loads((tmp_path / "m" / "meta.json").read_text())
    meta["version"] = 999
    (tmp_path / "m" / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(CheckpointError, match="version"):
        load_model(tmp_path / "m")


def test_padding_does_not_leak_into_real_positions():
    m = tiny_model(7)
    b, a, e = m.vocab.bos_id, m.vocab.index["a"], m.vocab.eos_id
    short = batch_target_logprobs(m, [MixedInput([b])], [[e]])
    both = batch_target_logprobs(m, [MixedInput([b]), MixedInput([b, a, a, a, a])], [[e], [a, a, e]])
    assert torch.allclose(short[0], both[0], atol=1e-12)
