"""Two-phase training: supervised initialization of the three models, then variational training."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import torch
import torch.nn.functional as F

from divert.config import ArchConfig, SFTConfig, TrainConfig
from divert.data import Corpus, Pair, prompt_parts, render_prompt
from divert.encoding import encode_pair, encode_target, posterior_prompt_ids, prior_prompt_ids
from divert.lm import TinyLM, Vocab, build_model, clone_frozen
from divert.models import ModelTriple, load_checkpoint, save_checkpoint
from divert.objective import pair_losses
from divert.soft_token import temperature_at

logger = logging.getLogger(__name__)

__all__ = [
    "ModelTriple",
    "NonFiniteLossError",
    "TrainLog",
    "build_vocab",
    "load_checkpoint",
    "save_checkpoint",
    "sft_examples",
    "sft_initialize",
    "train_sft_model",
    "variational_train",
]

LOG_FIELDS = ["step", "reconstruction", "kl_term", "q_reg", "total", "lambda", "grad_norm"]


class NonFiniteLossError(FloatingPointError):
    pass


def build_vocab(corpora: Iterable[Corpus]) -> Vocab:
    """Vocabulary over every prompt and completion the three models will see."""
    texts = []
    for corpus in corpora:
        for p in corpus.pairs():
            texts.append(render_prompt(p.mcq, "prior"))
            texts.append(render_prompt(p.mcq, "posterior", distractor=p.distractor))
            texts.append(render_prompt(p.mcq, "decoder", error=p.error or "x"))
            texts.append(p.distractor)
            if p.error:
                texts.append(p.error)
    return Vocab.build(texts)


def sft_examples(vocab: Vocab, pairs: Sequence[Pair], role: str) -> list[tuple[list[int], list[int]]]:
    """(prompt ids, completion ids) for one model; unlabeled pairs are skipped."""
    out = []
    for p in pairs:
        if not p.labeled:
            continue
        if role == "prior":
            out.append((prior_prompt_ids(vocab, p.mcq), encode_target(vocab, p.error)))
        elif role == "posterior":
            out.append((posterior_prompt_ids(vocab, p.mcq, p.distractor), encode_target(vocab, p.error)))
        elif role == "decoder":
            before, after = prompt_parts(p.mcq, "decoder")
            ids = [vocab.bos_id] + vocab.encode(f"{before} {p.error}{after}")
            out.append((ids, encode_target(vocab, p.distractor)))
        else:
            raise ValueError(f"unknown role {role!r}")
    return out


def _collate(examples, pad_id: int):
    seqs = [prompt + tgt for prompt, tgt in examples]
    T = max(len(s) for s in seqs) - 1
    inp = torch.full((len(seqs), T), pad_id, dtype=torch.long)
    lab = torch.full((len(seqs), T), -100, dtype=torch.long)
    for i, (prompt, tgt) in enumerate(examples):
        s = prompt + tgt
        inp[i, : len(s) - 1] = torch.tensor(s[:-1])
        lab[i, len(prompt) - 1 : len(s) - 1] = torch.tensor(tgt)
    return inp, lab


def completion_loss(model: TinyLM, examples, reduction: str = "mean") -> torch.Tensor:
    """Next-token cross-entropy on completion tokens only."""
    inp, lab = _collate(examples, model.vocab.pad_id)
    logits = model(inp)
    return F.cross_entropy(logits.flatten(0, 1), lab.flatten(), ignore_index=-100, reduction=reduction)


@torch.no_grad()
def mean_completion_loss(model: TinyLM, examples, batch_size: int = 64) -> float:
    if not examples:
        return float("nan")
    total, count = 0.0, 0
    for i in range(0, len(examples), batch_size):
        part = examples[i : i + batch_size]
        total += float(completion_loss(model, part, reduction="sum"))
        count += sum(len(t) for _, t in part)
    return total / count


def _optimizer(params, lr: float, weight_decay: float):
    return torch.optim.AdamW(params, lr=lr, betas=(0.9, 0.999), weight_decay=weight_decay)


@dataclass
class SFTHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0


def train_sft_model(
    model: TinyLM,
    train: list,
    val: Optional[list],
    cfg: SFTConfig,
    seed: int,
) -> SFTHistory:
    """Fit one model on (prompt, completion) examples with validation early stopping.

    Epoch 0 is the untrained model; the parameters of the epoch with the
    lowest validation loss are restored at the end.
    """
    opt = _optimizer(model.parameters(), cfg.lr, cfg.weight_decay)
    gen = torch.Generator().manual_seed(seed)
    hist = SFTHistory()
    best_state, best_val, stale = None, math.inf, 0
    if val:
        best_val = mean_completion_loss(model, val)
        best_state = copy.deepcopy(model.state_dict())
        hist.val_loss.append(best_val)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = torch.randperm(len(train), generator=gen).tolist()
        run, n = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            batch = [train[j] for j in order[i : i + cfg.batch_size]]
            loss = completion_loss(model, batch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
            opt.step()
            model.step += 1
            run += loss.item() * len(batch)
            n += len(batch)
        model.eval()
        hist.train_loss.append(run / max(n, 1))
        if val:
            v = mean_completion_loss(model, val)
            hist.val_loss.append(v)
            logger.info("sft epoch %d train %.4f val %.4f", epoch, hist.train_loss[-1], v)
            if v < best_val:
                best_val, best_state, stale = v, copy.deepcopy(model.state_dict()), 0
                hist.best_epoch = epoch
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        else:
            hist.best_epoch = epoch
    if val and best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return hist


def sft_initialize(
    labeled: Corpus,
    config: TrainConfig,
    val: Optional[Corpus] = None,
    vocab: Optional[Vocab] = None,
    arch: Optional[ArchConfig] = None,
) -> ModelTriple:
    """Supervised initialization of prior, decoder and posterior from labeled pairs."""
    pairs = labeled.labeled_pairs()
    if not pairs:
        raise ValueError("supervised initialization needs at least one labeled pair")
    arch = arch or config.arch
    if vocab is None:
        vocab = build_vocab([labeled] + ([val] if val is not None else []))
    val_pairs = val.labeled_pairs() if val is not None else []
    built = {}
    histories = {}
    for offset, role in enumerate(("prior", "decoder", "posterior")):
        model = build_model(vocab, seed=config.seed * 31 + offset, **asdict(arch))
        histories[role] = train_sft_model(
            model,
            sft_examples(vocab, pairs, role),
            sft_examples(vocab, val_pairs, role) or None,
            config.sft,
            seed=config.seed * 31 + offset,
        )
        built[role] = model
    triple = ModelTriple(
        prior=built["prior"],
        decoder=built["decoder"],
        posterior=built["posterior"],
        posterior_init=clone_frozen(built["posterior"]),
    )
    triple.state["sft_pairs"] = len(pairs)
    triple.state["sft_history"] = {r: asdict(h) for r, h in histories.items()}
    return triple


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    pairs_seen: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in LOG_FIELDS})

    def smoothed_total(self, window: int = 50) -> list[float]:
        vals = [r["total"] for r in self.rows]
        out = []
        for i in range(len(vals)):
            lo = max(0, i - window + 1)
            out.append(sum(vals[lo : i + 1]) / (i + 1 - lo))
        return out


def planned_steps(n_pairs: int, config: TrainConfig) -> int:
    return config.variational.epochs * math.ceil(n_pairs / config.variational.pairs_per_batch)


def variational_train(
    models: ModelTriple,
    corpus: Corpus,
    config: TrainConfig,
    log_path=None,
    checkpoint_dir=None,
    max_steps: Optional[int] = None,
) -> tuple[ModelTriple, TrainLog]:
    """Jointly update prior, decoder and posterior on the Monte Carlo ELBO plus posterior pinning.

    Labels are ignored: every (stem, distractor) pair in ``corpus`` is used.
    The temperature follows ``models.step``, so a run resumed from a
    checkpoint continues the schedule where it stopped.
    """
    vc = config.variational
    vocab = models.vocab
    pairs = corpus.pairs()
    if not pairs:
        raise ValueError("variational training needs at least one pair")
    encoded = [encode_pair(vocab, p) for p in pairs]
    total_planned = int(models.state.get("planned_steps") or planned_steps(len(pairs), config))
    models.state["planned_steps"] = total_planned
    schedule = config.schedule.schedule(total_planned)
    models.state["anneal_total_steps"] = schedule.total_steps

    params = list(models.parameters())
    opt = _optimizer(params, vc.lr, vc.weight_decay)
    rng = torch.Generator().manual_seed(config.seed * 7919 + models.step)
    log = TrainLog()
    batches_per_epoch = math.ceil(len(pairs) / vc.pairs_per_batch)
    for m in models.trainable():
        m.train()

    step_in_run = 0
    while models.step < total_planned:
        if max_steps is not None and step_in_run >= max_steps:
            break
        epoch, pos = divmod(models.step, batches_per_epoch)
        order = torch.randperm(len(pairs), generator=torch.Generator().manual_seed(config.seed * 1009 + epoch)).tolist()
        batch_idx = order[pos * vc.pairs_per_batch : (pos + 1) * vc.pairs_per_batch]
        lam = temperature_at(schedule, models.step)
        loss, bd = pair_losses(
            models, [encoded[i] for i in batch_idx], config.weights, lam, rng, vc.max_error_len
        )
        if not math.isfinite(bd.total):
            if checkpoint_dir is not None:
                save_checkpoint(models, checkpoint_dir)
            raise NonFiniteLossError(f"non-finite loss at step {models.step}; last good state kept")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        grad_norm = float(torch.nn.utils.clip_grad_norm_(params, vc.grad_clip_norm))
        clipped = post_clip_norm(params)
        opt.step()
        models.step += 1
        step_in_run += 1
        log.pairs_seen += len(batch_idx)
        log.rows.append({"step": models.step, **bd.as_row(), "lambda": lam, "grad_norm": grad_norm, "clipped_norm": clipped})
        if models.step % 20 == 0:
            logger.info("step %d total %.4f lambda %.3f", models.step, bd.total, lam)

    models.eval()
    models.state["variational_pairs"] = models.state.get("variational_pairs", 0) + log.pairs_seen
    if log_path is not None:
        log.write_csv(log_path)
    if checkpoint_dir is not None:
        save_checkpoint(models, checkpoint_dir)
    return models, log


def post_clip_norm(params: Sequence[torch.Tensor]) -> float:
    norms = [p.grad.detach().norm() for p in params if p.grad is not None]
    return float(torch.norm(torch.stack(norms))) if norms else 0.0

