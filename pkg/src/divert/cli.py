"""Command-line entry point: data generation, splitting, training, generation and evaluation.

Every command writes a run manifest next to its output recording the config
hash, seed and sha256 of each input.  Exit status is 2 for bad arguments,
missing inputs or bad config keys, and 1 for failures during a run.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from divert.config import ConfigError, DecodeConfig, TrainConfig, config_hash, from_dict, load_json, to_dict
from divert.data import CorpusParseError, SplitSpec, ValidationError, load_corpus, save_corpus, split_by_stem
from divert.lm import CheckpointError, VocabError
from divert.metrics import evaluate_corpus, get_similarity
from divert.models import load_checkpoint, save_checkpoint

logger = logging.getLogger("divert")


class UsageError(Exception):
    """Bad arguments or inputs; exit status 2."""


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for f in files:
        if path.is_dir():
            h.update(str(f.relative_to(path)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def _require(*paths) -> None:
    missing = [str(p) for p in paths if p is not None and not Path(p).exists()]
    if missing:
        raise UsageError(f"missing input path(s): {', '.join(missing)}")


def write_manifest(out: Path, command: str, config: dict, seed: Optional[int], inputs: Sequence) -> Path:
    target = out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")
    manifest = {
        "command": command,
        "config_hash": config_hash(config),
        "config": config,
        "seed": seed,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if p is not None},
    }
    target.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return target


# ---------------------------------------------------------------------------
# config assembly


def _set(d: dict, dotted: str, value) -> None:
    *head, last = dotted.split(".")
    for k in head:
        d = d.setdefault(k, {})
    d[last] = value


def train_config_from_args(args, overrides: dict[str, str]) -> TrainConfig:
    """Desk defaults, then the JSON config file, then explicit flags."""
    from divert.config import desk_train_config

    data = to_dict(desk_train_config())
    if getattr(args, "config", None):
        _require(args.config)
        for section, values in load_json(args.config).items():
            if isinstance(values, dict) and isinstance(data.get(section), dict):
                unknown = [k for k in values if k not in data[section]]
                if unknown:
                    raise ConfigError(f"unknown config keys: {', '.join(f'{section}.{k}' for k in unknown)}")
                data[section].update(values)
            else:
                data[section] = values
    for attr, dotted in overrides.items():
        val = getattr(args, attr, None)
        if val is not None:
            _set(data, dotted, val)
    return from_dict(TrainConfig, data)


TRAIN_FLAGS = {
    "beta": "weights.beta",
    "alpha": "weights.alpha",
    "mc_samples": "weights.mc_samples",
    "lambda_start": "schedule.lambda_start",
    "lambda_end": "schedule.lambda_end",
    "lr": "variational.lr",
    "epochs": "variational.epochs",
    "seed": "seed",
}
SFT_FLAGS = {"lr": "sft.lr", "epochs": "sft.epochs", "seed": "seed"}


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> None:
    from divert.synth import generate_corpus, get_families, taxonomy_manifest

    families = args.families.split(",") if args.families else None
    try:
        fams = get_families(families)
    except ValueError as e:
        raise UsageError(str(e)) from None
    corpus = generate_corpus(fams, args.n, seed=args.seed, label_drop=args.label_drop)
    out = Path(args.out)
    save_corpus(corpus, out)
    out.with_name(out.stem + ".taxonomy.json").write_text(taxonomy_manifest(fams) + "\n", encoding="utf-8")
    cfg = {"families": [t.family for t in fams], "n": args.n, "label_drop": args.label_drop}
    write_manifest(out, "gen-data", cfg, args.seed, [])
    print(f"wrote {len(corpus)} MCQs to {out}")


def cmd_split(args) -> None:
    _require(args.corpus)
    ratios = tuple(float(x) for x in args.ratios.split(","))
    try:
        spec = SplitSpec(ratios, args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    parts = split_by_stem(load_corpus(args.corpus), spec)
    prefix = Path(args.out)
    for name, part in zip(("train", "val", "test"), parts):
        path = prefix.with_name(f"{prefix.name}.{name}.jsonl")
        save_corpus(part, path)
        write_manifest(path, "split", {"ratios": list(ratios)}, args.seed, [args.corpus])
        print(f"{name}: {len(part)} MCQs -> {path}")


def cmd_sft(args) -> None:
    from divert.trainer import build_vocab, sft_initialize

    _require(args.corpus, args.val)
    cfg = train_config_from_args(args, SFT_FLAGS)
    train = load_corpus(args.corpus)
    val = load_corpus(args.val) if args.val else None
    vocab = build_vocab([train] + ([val] if val else []))
    models = sft_initialize(train, cfg, val=val, vocab=vocab)
    out = Path(args.out_ckpt)
    save_checkpoint(models, out)
    write_manifest(out, "sft", to_dict(cfg), cfg.seed, [args.corpus, args.val])
    print(f"SFT on {models.state['sft_pairs']} labeled pairs -> {out}")


def cmd_train(args) -> None:
    from divert.trainer import variational_train

    _require(args.ckpt, args.corpus)
    cfg = train_config_from_args(args, TRAIN_FLAGS)
    models = load_checkpoint(args.ckpt)
    out = Path(args.out_ckpt)
    out.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out / "train_log.csv"
    models, log = variational_train(models, load_corpus(args.corpus), cfg, log_path=log_path, checkpoint_dir=out)
    write_manifest(out, "train", to_dict(cfg), cfg.seed, [args.ckpt, args.corpus])
    print(f"{len(log.rows)} variational steps on {log.pairs_seen} pairs -> {out}")


def decode_config_from_args(args) -> DecodeConfig:
    try:
        return DecodeConfig(
            n_errors=args.ne,
            n_distractors=args.nd,
            top_k=args.k,
            diversity_penalty=args.diversity_penalty,
            joint_score=args.joint_score,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None


def cmd_generate(args) -> None:
    from divert.experiments import generate_all

    _require(args.ckpt, args.corpus)
    cfg = decode_config_from_args(args)
    models = load_checkpoint(args.ckpt).eval()
    records = generate_all(models, load_corpus(args.corpus), cfg)
    out = Path(args.out)
    with out.open("w", encoding="utf-8") as fh:
        for rec in records.values():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    write_manifest(out, "generate", to_dict(cfg), None, [args.ckpt, args.corpus])
    short = sum(r["shortfall"] for r in records.values())
    print(f"{len(records)} generation records -> {out} ({short} with fewer than {cfg.top_k} candidates)")


def load_generations(path) -> dict[str, dict]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[rec["stem"]] = rec
            except (json.JSONDecodeError, KeyError, TypeError):
                raise CorpusParseError(i, "generation record must be a JSON object with a 'stem'") from None
    return out


def cmd_evaluate(args) -> None:
    _require(args.corpus, args.generations)
    ks = tuple(int(k) for k in args.k.split(","))
    try:
        h = get_similarity(args.similarity)
    except ValueError as e:
        raise UsageError(str(e)) from None
    report = evaluate_corpus(load_corpus(args.corpus), load_generations(args.generations), ks, h, args.similarity)
    out = Path(args.out)
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    out.with_name(out.stem + ".summary.csv").write_text(report.summary_csv(), encoding="utf-8")
    write_manifest(out, "evaluate", {"ks": list(ks), "similarity": args.similarity}, None,
                   [args.corpus, args.generations])
    for name, val in report.summary_rows():
        print(f"{name:>16} {val:8.2f}")


def cmd_label_curve(args) -> None:
    from divert.experiments import PipelineSpec, label_efficiency_curve, write_curve

    cfg = train_config_from_args(args, {"seed": "seed"})
    fractions = [float(x) for x in args.fractions.split(",")]
    base = PipelineSpec(n_items=args.n, data_seed=args.seed if args.seed is not None else 0)
    points = label_efficiency_curve(fractions, base, cfg)
    out = Path(args.out)
    write_curve(points, out)
    write_manifest(out, "label-curve", {"fractions": fractions, "train": to_dict(cfg)}, base.data_seed, [])
    for p in points:
        print(f"drop {100 * p.label_drop:5.1f}%  prop@10 {p.prop_at_10:6.2f}  sft-only {p.sft_prop_at_10:6.2f}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="divert", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic MCQ corpus")
    g.add_argument("--families", default="", help="comma-separated template families (default: all)")
    g.add_argument("--n", type=int, default=600)
    g.add_argument("--label-drop", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("split", help="split a corpus by stem into train/val/test")
    s.add_argument("--corpus", required=True)
    s.add_argument("--ratios", default="0.72,0.16,0.12")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output prefix; writes PREFIX.{train,val,test}.jsonl")
    s.set_defaults(fn=cmd_split)

    f = sub.add_parser("sft", help="supervised initialization of the three models")
    f.add_argument("--corpus", required=True)
    f.add_argument("--val")
    f.add_argument("--out-ckpt", required=True)
    f.add_argument("--config", help="JSON training config; flags override it")
    f.add_argument("--lr", type=float)
    f.add_argument("--epochs", type=int)
    f.add_argument("--seed", type=int)
    f.set_defaults(fn=cmd_sft)

    t = sub.add_parser("train", help="variational training from an SFT checkpoint")
    t.add_argument("--ckpt", required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--out-ckpt", required=True)
    t.add_argument("--config")
    t.add_argument("--beta", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--mc-samples", type=int)
    t.add_argument("--lambda-start", type=float)
    t.add_argument("--lambda-end", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--log", help="CSV training log (default: OUT_CKPT/train_log.csv)")
    t.set_defaults(fn=cmd_train)

    n = sub.add_parser("generate", help="overgenerate-and-rank distractors for every MCQ")
    n.add_argument("--ckpt", required=True)
    n.add_argument("--corpus", required=True)
    n.add_argument("--ne", type=int, default=10)
    n.add_argument("--nd", type=int, default=10)
    n.add_argument("--k", type=int, default=10)
    n.add_argument("--diversity-penalty", type=float, default=0.5)
    n.add_argument("--joint-score", action="store_true")
    n.add_argument("--out", required=True)
    n.set_defaults(fn=cmd_generate)

    e = sub.add_parser("evaluate", help="score generations against gold distractors and errors")
    e.add_argument("--corpus", required=True)
    e.add_argument("--generations", required=True)
    e.add_argument("--k", default="3,10")
    e.add_argument("--similarity", default="exact")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_evaluate)

    c = sub.add_parser("label-curve", help="Prop@10 against the fraction of error labels dropped")
    c.add_argument("--fractions", default="0,0.5,0.9")
    c.add_argument("--n", type=int, default=600)
    c.add_argument("--seed", type=int)
    c.add_argument("--config")
    c.add_argument("--out", required=True, help="CSV path; a PNG is written alongside")
    c.set_defaults(fn=cmd_label_curve)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.fn(args)
    except (UsageError, ConfigError, CorpusParseError, ValidationError, CheckpointError, VocabError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        logger.exception("command failed")
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
