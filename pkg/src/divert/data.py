"""MCQ records, corpus I/O, stem-disjoint splitting and prompt rendering."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional

logger = logging.getLogger(__name__)

NA = "N/A"
ROLES = ("prior", "decoder", "posterior")


class CorpusParseError(ValueError):
    """A corpus line is not valid JSON or lacks required fields."""

    def __init__(self, line_no: int, msg: str):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


class ValidationError(ValueError):
    """A record violates an MCQ invariant."""

    def __init__(self, field_name: str, msg: str, line_no: Optional[int] = None):
        where = f"line {line_no}: " if line_no is not None else ""
        super().__init__(f"{where}{field_name}: {msg}")
        self.field = field_name
        self.msg = msg
        self.line_no = line_no


def normalize_text(text: str) -> str:
    """Trim, collapse internal whitespace and lowercase."""
    return " ".join(text.split()).lower()


@dataclass(frozen=True)
class DistractorEntry:
    answer: str
    error: Optional[str] = None

    def __post_init__(self):
        if not self.answer or not self.answer.strip():
            raise ValidationError("answer", "distractor answer must be nonempty")
        if self.error is not None and not self.error.strip():
            raise ValidationError("error", "error label, when present, must be nonempty")

    @property
    def labeled(self) -> bool:
        return self.error is not None


@dataclass(frozen=True)
class MCQ:
    stem: str
    key: str
    distractors: tuple[DistractorEntry, ...]
    explanation: Optional[str] = None
    tags: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.stem or not self.stem.strip():
            raise ValidationError("stem", "stem must be nonempty")
        if not self.key or not self.key.strip():
            raise ValidationError("key", "key must be nonempty")
        object.__setattr__(self, "distractors", tuple(self.distractors))
        object.__setattr__(self, "tags", tuple(self.tags))
        if len(self.distractors) < 1:
            raise ValidationError("distractors", "at least one distractor required")
        nk = normalize_text(self.key)
        for d in self.distractors:
            if normalize_text(d.answer) == nk:
                raise ValidationError(
                    "distractors", f"distractor {d.answer!r} equals the key"
                )

    @property
    def topic(self) -> str:
        return self.tags[0] if len(self.tags) > 0 else NA

    @property
    def concept(self) -> str:
        return self.tags[1] if len(self.tags) > 1 else NA

    def to_dict(self) -> dict:
        return {
            "stem": self.stem,
            "key": self.key,
            "explanation": self.explanation,
            "tags": list(self.tags),
            "distractors": [
                {"answer": d.answer, "error": d.error} for d in self.distractors
            ],
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "MCQ":
        dists = tuple(
            DistractorEntry(answer=str(d["answer"]), error=d.get("error"))
            for d in rec["distractors"]
        )
        return cls(
            stem=rec["stem"],
            key=str(rec["key"]),
            distractors=dists,
            explanation=rec.get("explanation"),
            tags=tuple(rec.get("tags") or ()),
        )


@dataclass(frozen=True)
class Pair:
    """One question-distractor pair flattened out of an MCQ."""

    mcq: MCQ
    distractor: str
    error: Optional[str]

    @property
    def labeled(self) -> bool:
        return self.error is not None


@dataclass(frozen=True)
class Corpus:
    items: tuple[MCQ, ...] = ()
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[MCQ]:
        return iter(self.items)

    def pairs(self) -> list[Pair]:
        return [
            Pair(mcq, d.answer, d.error) for mcq in self.items for d in mcq.distractors
        ]

    def labeled_pairs(self) -> list[Pair]:
        return [p for p in self.pairs() if p.labeled]


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.72, 0.16, 0.12)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if len(self.ratios) != 3:
            raise ValueError("ratios must have three entries")
        if any(not 0.0 < r < 1.0 for r in self.ratios):
            raise ValueError(f"ratios must lie in (0, 1): {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1: {self.ratios}")


def _parse_record(rec, line_no: int) -> MCQ:
    if not isinstance(rec, dict):
        raise CorpusParseError(line_no, "record is not a JSON object")
    for name in ("stem", "key", "distractors"):
        if name not in rec:
            raise CorpusParseError(line_no, f"missing field {name!r}")
    if not isinstance(rec["distractors"], list):
        raise CorpusParseError(line_no, "distractors must be an array")
    for d in rec["distractors"]:
        if not isinstance(d, dict) or "answer" not in d:
            raise CorpusParseError(line_no, "each distractor needs an 'answer'")
    try:
        return MCQ.from_dict(rec)
    except ValidationError as e:
        raise ValidationError(e.field, e.msg, line_no) from None


def iter_records(lines: Iterable[str]) -> Iterator[MCQ]:
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusParseError(line_no, f"invalid JSON ({e.msg})") from None
        yield _parse_record(rec, line_no)


def load_corpus(path) -> Corpus:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        items = list(iter_records(fh))
    return Corpus(items=tuple(items), provenance=str(path))


def dump_corpus(corpus: Corpus) -> str:
    return "".join(
        json.dumps(m.to_dict(), ensure_ascii=False) + "\n" for m in corpus.items
    )


def save_corpus(corpus: Corpus, path) -> None:
    Path(path).write_text(dump_corpus(corpus), encoding="utf-8")


def split_by_stem(corpus: Corpus, spec: SplitSpec) -> tuple[Corpus, Corpus, Corpus]:
    """Partition a corpus into train/val/test with no stem shared across splits.

    Items are grouped by normalized stem, groups are shuffled with ``spec.seed``
    and greedily assigned to the split whose item count is furthest below its
    target.
    """
    if len(corpus) == 0:
        raise ValueError("cannot split an empty corpus")
    groups: dict[str, list[int]] = {}
    for i, m in enumerate(corpus.items):
        groups.setdefault(normalize_text(m.stem), []).append(i)
    keys = sorted(groups)
    random.Random(spec.seed).shuffle(keys)

    n = len(corpus)
    targets = [r * n for r in spec.ratios]
    assigned: list[list[int]] = [[], [], []]
    for key in keys:
        idx = groups[key]
        # largest remaining deficit wins; ties go to the earlier split
        deficits = [targets[s] - len(assigned[s]) for s in range(3)]
        s = max(range(3), key=lambda j: (deficits[j], -j))
        assigned[s].extend(idx)

    for s, name in enumerate(("train", "val", "test")):
        if not assigned[s] and targets[s] >= 1.0:
            logger.warning("split %r is empty although its target is %.1f", name, targets[s])

    out = []
    for s, name in enumerate(("train", "val", "test")):
        items = tuple(corpus.items[i] for i in sorted(assigned[s]))
        out.append(Corpus(items, provenance=f"{corpus.provenance}#{name}"))
    return out[0], out[1], out[2]


_HEADER = (
    "A teacher assigns the following math question to a class of middle school students.\n"
    "The question is: {stem}\n"
    "The question topic is: {topic}\n"
    "The question concept is: {concept}\n"
    "The solution is: {solution}\n"
    "The correct answer is: {key}\n"
)
_PRIOR_TAIL = "A possible error made by a student is:"
_ERROR_LINE = "The error made by the student is:"
_ANSWER_LINE = "The incorrect answer given by the student is:"


def _header(mcq: MCQ) -> str:
    return _HEADER.format(
        stem=mcq.stem,
        topic=mcq.topic,
        concept=mcq.concept,
        solution=mcq.explanation if mcq.explanation is not None else NA,
        key=mcq.key,
    )


def prompt_parts(mcq: MCQ, role: str, distractor: Optional[str] = None) -> tuple[str, str]:
    """Split a prompt around its conditioning slot.

    Returns ``(before, after)``: for the decoder the error text goes between
    them; for the other roles ``after`` is empty and ``before`` is the full
    prompt.
    """
    if role == "prior":
        return _header(mcq) + _PRIOR_TAIL, ""
    if role == "decoder":
        return _header(mcq) + _ERROR_LINE, "\n" + _ANSWER_LINE
    if role == "posterior":
        if distractor is None:
            raise ValueError("posterior prompt requires a distractor")
        return _header(mcq) + f"{_ANSWER_LINE} {distractor}\n{_ERROR_LINE}", ""
    raise ValueError(f"unknown role {role!r}; expected one of {ROLES}")


def render_prompt(
    mcq: MCQ,
    role: str,
    error: Optional[str] = None,
    distractor: Optional[str] = None,
) -> str:
    """Render the prompt text for one of the three models, up to its final colon."""
    if role == "decoder":
        if error is None:
            raise ValueError("decoder prompt requires an error")
        before, after = prompt_parts(mcq, role)
        return f"{before} {error}{after}"
    return prompt_parts(mcq, role, distractor)[0]

