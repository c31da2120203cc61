"""Synthetic arithmetic MCQs with a closed, rule-based error taxonomy.

Every distractor is produced by a named ``ErrorRule`` whose description is the
error label, so a trained pipeline can be checked against ground truth.  Each
template family has several stem phrasings; the same parameters therefore
reappear under different stems, which a stem-disjoint split keeps apart.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass
from fractions import Fraction
from math import gcd
from typing import Callable, Optional, Sequence

from divert.data import MCQ, Corpus, DistractorEntry, normalize_text

logger = logging.getLogger(__name__)

Params = tuple


def render_number(x) -> str:
    """Canonical surface form: reduced fraction ``p/q`` or an integer."""
    if isinstance(x, str):
        return x
    f = Fraction(x)
    return str(f.numerator) if f.denominator == 1 else f"{f.numerator}/{f.denominator}"


@dataclass(frozen=True)
class ErrorRule:
    id: str
    description: str
    applies_to: str
    transform: Callable[[Params], object]

    def answer(self, params: Params) -> str:
        return render_number(self.transform(params))


@dataclass(frozen=True)
class Template:
    family: str
    stems: tuple[str, ...]
    stem_regex: tuple[str, ...]
    param_space: tuple[Params, ...]
    key: Callable[[Params], object]
    solution: Callable[[Params], str]
    tags: tuple[str, str]
    rules: tuple[ErrorRule, ...]

    def key_text(self, params: Params) -> str:
        return render_number(self.key(params))

    def stem(self, params: Params, variant: int) -> str:
        return self.stems[variant].format(*params)


# fraction division: a/b ÷ n


def _frac_space():
    return tuple(
        (a, b, n) for n in (2, 3) for b in range(4, 10) for a in range(n + 1, b)
    )


def _frac_solution(a: int, b: int, n: int) -> str:
    raw = f"{a}/{b * n}"
    reduced = render_number(Fraction(a, b * n))
    tail = "" if raw == reduced else f" = {reduced}"
    return f"{a}/{b} ÷ {n} = {raw}{tail}"


_FRAC_RULES = (
    ErrorRule(
        "frac_divide_both",
        "When dividing a fraction by an integer, divides both the numerator and denominator by the integer.",
        "fraction_division",
        lambda p: Fraction(p[0], p[1]),
    ),
    ErrorRule(
        "frac_divide_denominator",
        "When dividing a fraction by an integer, divides the denominator by the integer.",
        "fraction_division",
        lambda p: Fraction(p[0] * p[2], p[1]),
    ),
    ErrorRule(
        "frac_subtract",
        "Subtracts instead of divides.",
        "fraction_division",
        lambda p: Fraction(p[0] - p[2], p[1] - p[2]),
    ),
    ErrorRule(
        "frac_flip",
        "Divides the integer by the fraction instead of dividing the fraction by the integer.",
        "fraction_division",
        lambda p: Fraction(p[2] * p[1], p[0]),
    ),
)

FRACTION_DIVISION = Template(
    family="fraction_division",
    stems=(
        "Calculate: {0}/{1} ÷ {2}",
        "Work out {0}/{1} ÷ {2}",
        "What is {0}/{1} divided by {2}?",
        "Divide {0}/{1} by {2}.",
    ),
    stem_regex=(
        r"Calculate: (\d+)/(\d+) ÷ (\d+)",
        r"Work out (\d+)/(\d+) ÷ (\d+)",
        r"What is (\d+)/(\d+) divided by (\d+)\?",
        r"Divide (\d+)/(\d+) by (\d+)\.",
    ),
    param_space=_frac_space(),
    key=lambda p: Fraction(p[0], p[1] * p[2]),
    solution=lambda p: _frac_solution(*p),
    tags=("Dividing Fractions", "Divide proper fractions by an integer"),
    rules=_FRAC_RULES,
)

# squaring: n^2

_SQUARE_RULES = (
    ErrorRule(
        "square_double",
        "Mixes up squaring and multiplying by 2 or doubling",
        "squaring",
        lambda p: 2 * p[0],
    ),
    ErrorRule(
        "square_repeat_digit",
        "Mixes up squaring with repeating a digit",
        "squaring",
        lambda p: f"{p[0]}{p[0]}",
    ),
    ErrorRule(
        "square_power_as_digit",
        "Reads a power as a normal digit",
        "squaring",
        lambda p: f"{p[0]}2",
    ),
)

SQUARING = Template(
    family="squaring",
    stems=("{0}^2 = ?", "What is {0} squared?", "Calculate {0}^2", "Work out the square of {0}."),
    stem_regex=(
        r"(\d+)\^2 = \?",
        r"What is (\d+) squared\?",
        r"Calculate (\d+)\^2",
        r"Work out the square of (\d+)\.",
    ),
    param_space=tuple((n,) for n in range(3, 21)),
    key=lambda p: p[0] ** 2,
    solution=lambda p: f"{p[0]}^2 = {p[0]} x {p[0]} = {p[0] ** 2}",
    tags=("Squares, Cubes, etc", "Calculate the square of a number"),
    rules=_SQUARE_RULES,
)

# lowest common multiple of a and b


def _lcm(a: int, b: int) -> int:
    return a * b // gcd(a, b)


_LCM_RULES = (
    ErrorRule(
        "lcm_product",
        "Believes finding the product of two numbers gives their lowest common multiple.",
        "lcm",
        lambda p: p[0] * p[1],
    ),
    ErrorRule(
        "lcm_larger",
        "Believes the largest number in a set of numbers is always their lowest common multiple.",
        "lcm",
        lambda p: max(p),
    ),
    ErrorRule(
        "lcm_factor",
        "Confuses factors and multiples.",
        "lcm",
        lambda p: gcd(p[0], p[1]),
    ),
)

LCM = Template(
    family="lcm",
    stems=(
        "What is the lowest common multiple of {0} and {1}?",
        "Find the LCM of {0} and {1}.",
        "What is the least common multiple of {0} and {1}?",
        "Work out the lowest common multiple of {0} and {1}.",
    ),
    stem_regex=(
        r"What is the lowest common multiple of (\d+) and (\d+)\?",
        r"Find the LCM of (\d+) and (\d+)\.",
        r"What is the least common multiple of (\d+) and (\d+)\?",
        r"Work out the lowest common multiple of (\d+) and (\d+)\.",
    ),
    param_space=tuple(
        (a, b) for b in range(4, 21) for a in range(2, b) if gcd(a, b) > 1 and b % a
    ),
    key=lambda p: _lcm(*p),
    solution=lambda p: f"LCM = {p[0]} x {p[1]} ÷ {gcd(*p)} = {_lcm(*p)}",
    tags=("Multiples and Lowest Common Multiple", "Identify the Lowest Common Multiple of two numbers"),
    rules=_LCM_RULES,
)

FAMILIES: dict[str, Template] = {t.family: t for t in (FRACTION_DIVISION, SQUARING, LCM)}


def get_families(names: Optional[Sequence[str]] = None) -> list[Template]:
    if not names:
        return list(FAMILIES.values())
    unknown = [n for n in names if n not in FAMILIES]
    if unknown:
        raise ValueError(f"unknown template families {unknown}; available: {sorted(FAMILIES)}")
    return [FAMILIES[n] for n in names]


def _answers_distinct(t: Template, params: Params) -> bool:
    """Key and every rule of the family give pairwise-distinct answers."""
    seen = {normalize_text(t.key_text(params))}
    for r in t.rules:
        a = normalize_text(r.answer(params))
        if a in seen:
            return False
        seen.add(a)
    return True


def make_item(t: Template, rng: random.Random, rules_per_item: int, max_retries: int = 20) -> Optional[MCQ]:
    if len(t.rules) < rules_per_item:
        raise ValueError(f"family {t.family} has fewer than {rules_per_item} rules")
    for _ in range(max_retries):
        params = rng.choice(t.param_space)
        variant = rng.randrange(len(t.stems))
        rules = rng.sample(t.rules, rules_per_item)
        if not _answers_distinct(t, params):
            continue
        return MCQ(
            stem=t.stem(params, variant),
            key=t.key_text(params),
            explanation=t.solution(params),
            tags=t.tags,
            distractors=tuple(DistractorEntry(r.answer(params), r.description) for r in rules),
        )
    logger.warning("family %s: no collision-free parameters after %d retries; item skipped", t.family, max_retries)
    return None


def drop_labels(corpus: Corpus, fraction: float, seed: int) -> Corpus:
    """Blank the error label of a ``fraction`` of labeled pairs, chosen by seed."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("label-drop fraction must lie in [0, 1]")
    slots = [(i, j) for i, m in enumerate(corpus.items) for j, d in enumerate(m.distractors) if d.error]
    n_drop = round(fraction * len(slots))
    dropped = set(random.Random(seed).sample(slots, n_drop))
    items = []
    for i, m in enumerate(corpus.items):
        dists = tuple(
            DistractorEntry(d.answer, None if (i, j) in dropped else d.error)
            for j, d in enumerate(m.distractors)
        )
        items.append(MCQ(m.stem, m.key, dists, m.explanation, m.tags))
    return Corpus(tuple(items), provenance=f"{corpus.provenance}|drop={fraction}")


def generate_corpus(
    families: Sequence[Template],
    n: int,
    rules_per_item: int = 3,
    seed: int = 0,
    label_drop: float = 0.0,
) -> Corpus:
    """``n`` MCQs cycling through ``families``; item ``i`` draws from its own derived seed."""
    families = list(families)
    if not families:
        raise ValueError("at least one template family is required")
    items = []
    for i in range(n):
        t = families[i % len(families)]
        item = make_item(t, random.Random(seed * 1_000_003 + i), rules_per_item)
        if item is not None:
            items.append(item)
    corpus = Corpus(tuple(items), provenance=f"synthetic(seed={seed}, n={n})")
    if label_drop > 0:
        corpus = drop_labels(corpus, label_drop, seed)
    return corpus


def parse_stem(stem: str) -> Optional[tuple[Template, Params]]:
    for t in FAMILIES.values():
        for rx in t.stem_regex:
            m = re.fullmatch(rx, stem.strip())
            if m:
                params = tuple(int(g) for g in m.groups())
                return t, params
    return None


def oracle_error_for(stem: str, distractor: str) -> Optional[ErrorRule]:
    """The rule that produces ``distractor`` for ``stem``, or None for foreign answers and the key."""
    parsed = parse_stem(stem)
    if parsed is None:
        return None
    t, params = parsed
    target = normalize_text(distractor)
    if target == normalize_text(t.key_text(params)):
        return None
    hits = [r for r in t.rules if normalize_text(r.answer(params)) == target]
    return hits[0] if len(hits) == 1 else None


def rule_by_description(description: str) -> Optional[ErrorRule]:
    target = normalize_text(description)
    for t in FAMILIES.values():
        for r in t.rules:
            if normalize_text(r.description) == target:
                return r
    return None


def taxonomy_manifest(families: Optional[Sequence[Template]] = None) -> str:
    fams = families or list(FAMILIES.values())
    rows = [
        {"id": r.id, "family": t.family, "description": r.description}
        for t in fams
        for r in t.rules
    ]
    return json.dumps({"rules": rows}, indent=1)
