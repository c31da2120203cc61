"""End-to-end synthetic runs: SFT-only versus variational, and the label-efficiency curve."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from divert.config import TrainConfig, desk_train_config
from divert.data import Corpus, SplitSpec, split_by_stem
from divert.decoding import DecodeConfig, overgenerate_rank
from divert.metrics import EvalReport, evaluate_corpus
from divert.models import ModelTriple
from divert.synth import drop_labels, generate_corpus, get_families
from divert.trainer import TrainLog, build_vocab, sft_initialize, variational_train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineSpec:
    n_items: int = 600
    families: tuple[str, ...] = ("fraction_division", "squaring", "lcm")
    ratios: tuple[float, float, float] = (0.72, 0.16, 0.12)
    data_seed: int = 0
    label_drop: float = 0.0


def generate_all(models: ModelTriple, corpus: Corpus, config: DecodeConfig) -> dict[str, dict]:
    """Generation records keyed by stem, in the JSONL record shape."""
    out = {}
    for mcq in corpus.items:
        ranked = overgenerate_rank(models, mcq, config)
        out[mcq.stem] = {
            "stem": mcq.stem,
            "candidates": [c.to_dict() for c in ranked.candidates],
            "shortfall": ranked.shortfall,
        }
    return out


@dataclass
class PipelineResult:
    spec: PipelineSpec
    sft_report: EvalReport
    variational_report: Optional[EvalReport]
    log: Optional[TrainLog]
    timings: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def prop(self, k: int = 10, stage: str = "variational") -> float:
        rep = self.sft_report if stage == "sft" else self.variational_report
        return rep.summary[f"prop@{k}"]

    def partial(self, k: int = 10, stage: str = "variational") -> float:
        rep = self.sft_report if stage == "sft" else self.variational_report
        return rep.summary[f"partial@{k}"]

    def to_dict(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "sft": self.sft_report.summary,
            "variational": self.variational_report.summary if self.variational_report else None,
            "timings": self.timings,
            "counts": self.counts,
        }


def prepare_splits(spec: PipelineSpec) -> tuple[Corpus, Corpus, Corpus]:
    """Generate, split by stem, and blank labels in the training split only.

    Validation keeps its labels so early stopping sees the same signal at
    every drop fraction; the test split is scored on distractors.
    """
    corpus = generate_corpus(get_families(spec.families), spec.n_items, seed=spec.data_seed)
    train, val, test = split_by_stem(corpus, SplitSpec(spec.ratios, spec.data_seed))
    if spec.label_drop > 0:
        train = drop_labels(train, spec.label_drop, spec.data_seed)
    return train, val, test


def run_pipeline(
    spec: PipelineSpec = PipelineSpec(),
    train_config: Optional[TrainConfig] = None,
    decode_config: DecodeConfig = DecodeConfig(),
    variational: bool = True,
    eval_split: str = "test",
) -> PipelineResult:
    """SFT, score, variational epoch, score again; both stages on the same held-out split."""
    cfg = train_config or desk_train_config(spec.data_seed)
    train, val, test = prepare_splits(spec)
    target = test if eval_split == "test" else val
    timings = {}

    t0 = time.perf_counter()
    vocab = build_vocab([train, val])
    models = sft_initialize(train, cfg, val=val, vocab=vocab)
    timings["sft_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    sft_report = evaluate_corpus(target, generate_all(models, target, decode_config))
    timings["sft_generate_s"] = time.perf_counter() - t0
    logger.info("sft-only %s", _fmt(sft_report))

    var_report, log = None, None
    if variational:
        t0 = time.perf_counter()
        models, log = variational_train(models, train, cfg)
        timings["variational_s"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        var_report = evaluate_corpus(target, generate_all(models, target, decode_config))
        timings["variational_generate_s"] = time.perf_counter() - t0
        logger.info("variational %s", _fmt(var_report))

    counts = {
        "train_items": len(train.items),
        "val_items": len(val.items),
        "test_items": len(test.items),
        "sft_pairs": int(models.state.get("sft_pairs", 0)),
        "variational_pairs": int(models.state.get("variational_pairs", 0)),
    }
    return PipelineResult(spec, sft_report, var_report, log, timings, counts)


def _fmt(rep: EvalReport) -> str:
    s = rep.summary
    return f"prop@10 {s['prop@10']:.2f} partial@10 {s['partial@10']:.2f} exact@10 {s['exact@10']:.2f}"


@dataclass(frozen=True)
class CurvePoint:
    label_drop: float
    prop_at_10: float
    partial_at_10: float
    sft_prop_at_10: float


def label_efficiency_curve(
    fractions: Sequence[float] = (0.0, 0.5, 0.9),
    base: PipelineSpec = PipelineSpec(),
    train_config: Optional[TrainConfig] = None,
    decode_config: DecodeConfig = DecodeConfig(),
    reuse: Optional[dict[float, PipelineResult]] = None,
) -> list[CurvePoint]:
    """Prop@10 against the fraction of training error labels dropped."""
    points = []
    for frac in fractions:
        res = (reuse or {}).get(frac)
        if res is None:
            res = run_pipeline(replace(base, label_drop=frac), train_config, decode_config)
        points.append(CurvePoint(frac, res.prop(10), res.partial(10), res.prop(10, "sft")))
    return points


def write_curve(points: Sequence[CurvePoint], path) -> None:
    """CSV with one row per drop fraction; a PNG alongside when matplotlib is importable."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label_drop_percent", "prop@10", "partial@10", "sft_prop@10"])
        for p in points:
            w.writerow([f"{100 * p.label_drop:g}", f"{p.prop_at_10:.4f}", f"{p.partial_at_10:.4f}",
                        f"{p.sft_prop_at_10:.4f}"])
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    fig, ax = plt.subplots(figsize=(4, 3))
    xs = [100 * p.label_drop for p in points]
    ax.plot(xs, [p.prop_at_10 for p in points], marker="o", label="variational")
    ax.plot(xs, [p.sft_prop_at_10 for p in points], marker="s", linestyle="--", label="SFT only")
    ax.set_xlabel("error labels dropped (%)")
    ax.set_ylabel("Prop@10 (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path.with_suffix(".png"), dpi=120)
    plt.close(fig)


def result_json(result: PipelineResult) -> str:
    return json.dumps(result.to_dict(), indent=1, sort_keys=True)
