"""Conditional autoregressive LM contract and a tiny decoder-only reference model.

The three models of the pipeline (error prior, distractor decoder, error
posterior) are separate ``TinyLM`` instances sharing one ``Vocab``.  Inputs
are ``MixedInput`` sequences whose segments are either hard token ids or soft
embedding vectors, so a sampled error can be fed to the decoder as a convex
combination of embedding rows.
"""

from __future__ import annotations

import copy
import json
import re
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1

PAD, BOS, EOS, UNK, NEWLINE = "<pad>", "<bos>", "<eos>", "<unk>", "\n"
CONT = "##"

_WORD_RE = re.compile(r"\n|[^\s]+")


class ContextLengthError(ValueError):
    pass


class VocabError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class Vocab:
    """Word-level vocabulary with single-character fallback.

    Words containing a digit are always spelled out character by character so
    that numbers can be copied and composed; every other word outside the
    vocabulary falls back to characters too.  Continuation characters carry a
    ``##`` prefix, which makes ``decode(encode(text))`` exact for text whose
    whitespace is single spaces and newlines.
    """

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise VocabError("vocabulary tokens must be distinct")
        for special in (PAD, BOS, EOS):
            if special not in tokens:
                raise VocabError(f"vocabulary lacks {special!r}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]
        # tiny test vocabularies may omit these two
        self.unk_id = self.index.get(UNK)
        self.newline_id = self.index.get(NEWLINE)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Vocab":
        words: Counter = Counter()
        chars: set[str] = set()
        for text in texts:
            for w in _WORD_RE.findall(text):
                if w == NEWLINE:
                    continue
                chars.update(w)
                if not any(c.isdigit() for c in w) and len(w) > 1:
                    words[w] += 1
        chars.update("0123456789")
        specials = [PAD, BOS, EOS, UNK, NEWLINE]
        char_list = sorted(chars)
        tokens = specials + char_list + [CONT + c for c in char_list]
        tokens += sorted(w for w, n in words.items() if n >= min_count and w not in chars)
        return cls(tokens)

    def _lookup(self, tok: str) -> int:
        i = self.index.get(tok, self.unk_id)
        if i is None:
            raise VocabError(f"{tok!r} is not in the vocabulary")
        return i

    def _spell(self, word: str) -> list[int]:
        return [self._lookup(word[0])] + [self._lookup(CONT + c) for c in word[1:]]

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for w in _WORD_RE.findall(text):
            if w == NEWLINE:
                ids.append(self._lookup(NEWLINE))
            elif w in self.index and not any(c.isdigit() for c in w):
                ids.append(self.index[w])
            else:
                ids.extend(self._spell(w))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out: list[str] = []
        at_line_start = True
        for i in ids:
            i = int(i)
            if i < 0 or i >= len(self.tokens):
                raise VocabError(f"token id {i} out of range")
            if i in (self.pad_id, self.bos_id, self.eos_id):
                continue
            tok = self.tokens[i]
            if tok == NEWLINE:
                out.append(NEWLINE)
                at_line_start = True
            elif tok.startswith(CONT) and len(tok) > len(CONT):
                out.append(tok[len(CONT):])
                at_line_start = False
            else:
                out.append(tok if at_line_start else " " + tok)
                at_line_start = False
        return "".join(out)

    def to_json(self) -> list[str]:
        return list(self.tokens)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 256
    d_ff: Optional[int] = None

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.d_model


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.ff_dim),
            nn.GELU(),
            nn.Linear(cfg.ff_dim, cfg.d_model),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(D, dim=-1)
        q, k, v = (t.view(B, T, self.n_heads, D // self.n_heads).transpose(1, 2) for t in (q, k, v))
        att = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        x = x + self.proj(att.transpose(1, 2).reshape(B, T, D))
        return x + self.ff(self.ln2(x))


class TinyLM(nn.Module):
    """Pre-LN causal transformer with learned positions and an untied output head."""

    def __init__(self, cfg: ModelConfig, vocab: Vocab):
        super().__init__()
        if cfg.vocab_size != len(vocab):
            raise VocabError("config vocab_size does not match the vocabulary")
        if cfg.d_model % cfg.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.cfg = cfg
        self.vocab = vocab
        self.step = 0
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.apply(self._init)

    @staticmethod
    def _init(m: nn.Module):
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, std=0.02)
        if isinstance(m, nn.Linear) and m.bias is not None:
            nn.init.zeros_(m.bias)

    @property
    def embeddings(self) -> torch.Tensor:
        return self.tok_emb.weight

    def forward_embeds(self, x: torch.Tensor) -> torch.Tensor:
        """Logits for every position of a (B, T, D) batch of input embeddings."""
        T = x.shape[1]
        if T > self.cfg.max_len:
            raise ContextLengthError(f"sequence of length {T} exceeds context {self.cfg.max_len}")
        h = x + self.pos_emb.weight[:T]
        for blk in self.blocks:
            h = blk(h)
        return self.head(self.ln_f(h))

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.forward_embeds(self.tok_emb(ids))


Segment = Union[int, torch.Tensor]


class MixedInput:
    """An ordered sequence of hard token ids and soft embedding vectors."""

    def __init__(self, segments: Iterable[Segment] = ()):
        self.segments: list[Segment] = list(segments)

    @classmethod
    def from_ids(cls, ids: Iterable[int]) -> "MixedInput":
        return cls(int(i) for i in ids)

    def __len__(self) -> int:
        return len(self.segments)

    def __add__(self, other) -> "MixedInput":
        other_segs = other.segments if isinstance(other, MixedInput) else list(other)
        return MixedInput(self.segments + other_segs)

    def embed(self, model: TinyLM) -> torch.Tensor:
        """(T, D) input embeddings; consecutive hard ids are looked up in one call."""
        emb = model.tok_emb.weight
        D = emb.shape[1]
        rows: list[torch.Tensor] = []
        run: list[int] = []

        def flush():
            if run:
                idx = torch.tensor(run, dtype=torch.long)
                if idx.min() < 0 or idx.max() >= emb.shape[0]:
                    raise VocabError("token id out of range")
                rows.append(emb[idx])
                run.clear()

        for seg in self.segments:
            if isinstance(seg, torch.Tensor):
                flush()
                if seg.shape != (D,):
                    raise ValueError(f"soft segment has shape {tuple(seg.shape)}, expected ({D},)")
                rows.append(seg.to(emb.dtype).unsqueeze(0))
            else:
                run.append(int(seg))
        flush()
        if not rows:
            return emb.new_zeros((0, D))
        return torch.cat(rows, dim=0)


def pad_embeds(seqs: Sequence[torch.Tensor]) -> torch.Tensor:
    """Right-pad (T_i, D) tensors to (B, T_max, D).

    Padding only ever follows real positions, so the causal mask keeps it
    from influencing them.
    """
    return nn.utils.rnn.pad_sequence(list(seqs), batch_first=True)


def next_logits(model: TinyLM, prefix: MixedInput) -> torch.Tensor:
    if len(prefix) < 1:
        raise ContextLengthError("prefix must contain at least one segment")
    if len(prefix) > model.cfg.max_len:
        raise ContextLengthError(f"prefix of length {len(prefix)} exceeds context {model.cfg.max_len}")
    x = prefix.embed(model).unsqueeze(0)
    return model.forward_embeds(x)[0, -1]


def _check_ids(model: TinyLM, ids: Sequence[int]):
    V = model.cfg.vocab_size
    for i in ids:
        if not 0 <= int(i) < V:
            raise VocabError(f"token id {i} out of range for vocabulary of size {V}")


def batch_target_logprobs(
    model: TinyLM,
    prompts: Sequence[MixedInput],
    targets: Sequence[Sequence[int]],
    per_position: bool = False,
):
    """Sum of gold-token log-probs of each target given its prompt, batched.

    With ``per_position`` the padded (B, L) matrix of log-probs and the
    (B, L, V) log-softmax rows are returned as well.
    """
    seqs, spans = [], []
    for prompt, tgt in zip(prompts, targets):
        _check_ids(model, tgt)
        e = (prompt + MixedInput.from_ids(tgt)).embed(model)
        # position t predicts token t+1; the target occupies the last len(tgt) slots
        spans.append((len(prompt) - 1, len(tgt)))
        seqs.append(e[:-1] if len(tgt) else e)
    logits = model.forward_embeds(pad_embeds(seqs))
    logp = F.log_softmax(logits, dim=-1)
    L = max((n for _, n in spans), default=0)
    B = len(seqs)
    gather_pos = torch.zeros((B, L), dtype=torch.long)
    gold = torch.zeros((B, L), dtype=torch.long)
    mask = torch.zeros((B, L), dtype=logp.dtype)
    for b, ((start, n), tgt) in enumerate(zip(spans, targets)):
        gather_pos[b, :n] = torch.arange(start, start + n)
        gold[b, :n] = torch.as_tensor(list(tgt), dtype=torch.long)
        mask[b, :n] = 1.0
    rows = logp[torch.arange(B).unsqueeze(1), gather_pos]  # (B, L, V)
    tok_lp = rows.gather(-1, gold.unsqueeze(-1)).squeeze(-1) * mask
    total = tok_lp.sum(dim=1)
    if per_position:
        return total, tok_lp, rows, mask
    return total


def sequence_logprob(
    model: TinyLM, prompt: MixedInput, target: Sequence[int], require_eos: bool = True
) -> torch.Tensor:
    """log p(target | prompt) as a differentiable scalar."""
    target = [int(t) for t in target]
    _check_ids(model, target)
    if require_eos and (not target or target[-1] != model.vocab.eos_id):
        raise ValueError("target must end with EOS")
    if len(prompt) < 1:
        raise ContextLengthError("prompt must contain at least one segment")
    return batch_target_logprobs(model, [prompt], [target])[0]


def clone_frozen(model: TinyLM) -> TinyLM:
    clone = copy.deepcopy(model)
    for p in clone.parameters():
        p.requires_grad_(False)
    clone.eval()
    return clone


def build_model(vocab: Vocab, seed: int = 0, **arch) -> TinyLM:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = TinyLM(ModelConfig(vocab_size=len(vocab), **arch), vocab)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def save_model(model: TinyLM, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path / "params.pt")
    meta = {
        "version": CHECKPOINT_VERSION,
        "arch": asdict(model.cfg),
        "vocab": model.vocab.to_json(),
        "step": model.step,
        "dtype": str(model.tok_emb.weight.dtype).replace("torch.", ""),
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")


def load_model(path) -> TinyLM:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has version {meta.get('version')}, expected {CHECKPOINT_VERSION}"
        )
    vocab = Vocab(meta["vocab"])
    model = TinyLM(ModelConfig(**meta["arch"]), vocab)
    model.to(getattr(torch, meta.get("dtype", "float32")))
    model.load_state_dict(torch.load(path / "params.pt", weights_only=True))
    model.step = int(meta["step"])
    return model


def num_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())

