"""Distractor alignment metrics @K and error similarity / diversity metrics."""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

from divert.data import Corpus, normalize_text

SimilarityFn = Callable[[str, str], float]

_PUNCT = re.compile(r"([^\w\s])")


def exact_norm(a: str, b: str) -> float:
    return 1.0 if normalize_text(a) == normalize_text(b) else 0.0


def word_tokens(text: str) -> list[str]:
    """Lowercased words with punctuation split off as separate tokens."""
    return _PUNCT.sub(r" \1 ", text.lower()).split()


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def lcs_f1(a: str, b: str) -> float:
    """F1 of longest-common-subsequence precision and recall over word tokens."""
    ta, tb = word_tokens(a), word_tokens(b)
    if not ta and not tb:
        return 1.0
    if not ta or not tb:
        return 0.0
    lcs = lcs_length(ta, tb)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(tb), lcs / len(ta)
    return 2 * p * r / (p + r)


SIMILARITIES: dict[str, SimilarityFn] = {"exact": exact_norm, "lcs_f1": lcs_f1}


def get_similarity(name: str) -> SimilarityFn:
    try:
        return SIMILARITIES[name]
    except KeyError:
        raise ValueError(f"unknown similarity {name!r}; choose from {sorted(SIMILARITIES)}") from None


@dataclass(frozen=True)
class AlignmentResult:
    exact: int
    partial: int
    proportional: float
    k: int


def alignment(gold: Iterable[str], generated: Sequence[str], k: int) -> AlignmentResult:
    if k <= 0:
        raise ValueError("k must be positive")
    gold_set = {normalize_text(d) for d in gold}
    if not gold_set:
        raise ValueError("gold distractor set is empty")
    top = {normalize_text(d) for d in list(generated)[:k]}
    hit = len(gold_set & top)
    return AlignmentResult(
        exact=int(gold_set <= top),
        partial=int(hit > 0),
        proportional=hit / len(gold_set),
        k=k,
    )


def _nonempty(name: str, xs: Sequence[str]):
    if len(xs) == 0:
        raise ValueError(f"{name} must be nonempty")


def sim_recall(gold_errors: Sequence[str], generated_errors: Sequence[str], h: SimilarityFn) -> float:
    _nonempty("gold errors", gold_errors)
    _nonempty("generated errors", generated_errors)
    return sum(max(h(e, g) for g in generated_errors) for e in gold_errors) / len(gold_errors)


def sim_precision(gold_errors: Sequence[str], generated_errors: Sequence[str], h: SimilarityFn) -> float:
    _nonempty("gold errors", gold_errors)
    _nonempty("generated errors", generated_errors)
    return sum(max(h(g, e) for e in gold_errors) for g in generated_errors) / len(generated_errors)


def f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def diversity(errors: Sequence[str], h: SimilarityFn) -> float:
    """One minus mean off-diagonal similarity, normalized by |E|^2 (diagonal included)."""
    n = len(errors)
    if n < 2:
        raise ValueError("diversity needs at least two errors")
    off = sum(h(errors[i], errors[j]) for i in range(n) for j in range(n) if i != j)
    return 1.0 - off / (n * n)


# ---------------------------------------------------------------------------
# corpus-level evaluation


@dataclass
class QuestionReport:
    stem: str
    alignment: dict[int, AlignmentResult]
    sim_recall: Optional[float] = None
    sim_precision: Optional[float] = None
    sim_f1: Optional[float] = None
    div_generated: Optional[float] = None
    div_gold: Optional[float] = None

    def to_dict(self) -> dict:
        d = {"stem": self.stem}
        for k, a in sorted(self.alignment.items()):
            d[f"exact@{k}"] = a.exact
            d[f"partial@{k}"] = a.partial
            d[f"prop@{k}"] = a.proportional
        for name in ("sim_recall", "sim_precision", "sim_f1", "div_generated", "div_gold"):
            d[name] = getattr(self, name)
        return d


@dataclass
class EvalReport:
    questions: list[QuestionReport]
    summary: dict[str, float] = field(default_factory=dict)
    ks: tuple[int, ...] = (3, 10)
    similarity: str = "exact"

    def to_dict(self) -> dict:
        return {
            "similarity": self.similarity,
            "ks": list(self.ks),
            "summary": self.summary,
            "questions": [q.to_dict() for q in self.questions],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "k", "value_percent"])
        for name, val in self.summary_rows():
            metric, _, k = name.partition("@")
            w.writerow([metric, k, f"{val:.4f}"])
        return buf.getvalue()

    def summary_rows(self):
        return sorted(self.summary.items())


class MissingGenerationError(KeyError):
    pass


def _generation_fields(rec) -> tuple[list[str], list[str]]:
    cands = rec["candidates"] if isinstance(rec, Mapping) else rec
    dists, errs = [], []
    for c in cands:
        if isinstance(c, Mapping):
            dists.append(c["distractor"])
            if c.get("error"):
                errs.append(c["error"])
        else:
            dists.append(c.distractor)
            if c.error:
                errs.append(c.error)
    return dists, errs


def evaluate_corpus(
    corpus: Corpus,
    generations: Mapping[str, object],
    ks: Sequence[int] = (3, 10),
    h: SimilarityFn = exact_norm,
    similarity_name: str = "exact",
    n_error_eval: int = 3,
) -> EvalReport:
    """Score per-MCQ candidate lists against the corpus gold distractors.

    ``generations`` maps a stem to either a generation record
    (``{"candidates": [...]}``) or a list of candidates, ordered best first.
    Alignment means are reported in percent; error similarity uses the first
    ``n_error_eval`` distinct generated errors against the labeled gold errors.
    """
    rows = []
    for mcq in corpus.items:
        if mcq.stem not in generations:
            raise MissingGenerationError(f"no generation record for stem {mcq.stem!r}")
        dists, errs = _generation_fields(generations[mcq.stem])
        gold = [d.answer for d in mcq.distractors]
        q = QuestionReport(stem=mcq.stem, alignment={k: alignment(gold, dists, k) for k in ks})
        gold_errs = [d.error for d in mcq.distractors if d.error]
        gen_errs = list(dict.fromkeys(errs))[:n_error_eval]
        if gold_errs and gen_errs:
            q.sim_recall = sim_recall(gold_errs, gen_errs, h)
            q.sim_precision = sim_precision(gold_errs, gen_errs, h)
            q.sim_f1 = f1(q.sim_precision, q.sim_recall)
        if len(gen_errs) >= 2:
            q.div_generated = diversity(gen_errs, h)
        if len(gold_errs) >= 2:
            q.div_gold = diversity(gold_errs, h)
        rows.append(q)
    return EvalReport(rows, summarize(rows, ks), tuple(ks), similarity_name)


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return sum(xs) / len(xs) if xs else None


def summarize(rows: Sequence[QuestionReport], ks: Sequence[int]) -> dict[str, float]:
    out: dict[str, float] = {}
    if not rows:
        return out
    for k in ks:
        out[f"exact@{k}"] = 100.0 * _mean(r.alignment[k].exact for r in rows)
        out[f"partial@{k}"] = 100.0 * _mean(r.alignment[k].partial for r in rows)
        out[f"prop@{k}"] = 100.0 * _mean(r.alignment[k].proportional for r in rows)
    for name in ("sim_recall", "sim_precision", "sim_f1", "div_generated", "div_gold"):
        m = _mean(getattr(r, name) for r in rows)
        if m is not None:
            out[name] = 100.0 * m
    return out

