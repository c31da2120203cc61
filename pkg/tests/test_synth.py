import json
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from divert.data import normalize_text
from divert.synth import (
    FAMILIES,
    drop_labels,
    generate_corpus,
    get_families,
    oracle_error_for,
    parse_stem,
    render_number,
    rule_by_description,
    taxonomy_manifest,
)


def test_lcm_worked_example_rules():
    t, params = parse_stem("What is the lowest common multiple of 12 and 15?")
    answers = {r.id: r.answer(params) for r in t.rules}
    assert t.key_text(params) == "60"
    assert answers == {"lcm_product": "180", "lcm_larger": "15", "lcm_factor": "3"}


def test_subtract_rule_reproduces_three_sixths_example():
    # a/b ÷ n with (a, b, n) = (5, 8, 2): subtracting gives 3/6, shown reduced
    rule = next(r for r in FAMILIES["fraction_division"].rules if r.id == "frac_subtract")
    assert Fraction(rule.answer((5, 8, 2))) == Fraction(3, 6)


def test_render_number():
    assert render_number(Fraction(4, 2)) == "2"
    assert render_number(Fraction(6, 8)) == "3/4"
    assert render_number(12) == "12"
    assert render_number("132") == "132"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 40))
def test_generated_items_obey_invariants(seed, n):
    c = generate_corpus(get_families(), n, seed=seed)
    assert len(c) == n
    for m in c.items:
        answers = [normalize_text(d.answer) for d in m.distractors]
        assert len(set(answers)) == len(answers) == 3
        assert normalize_text(m.key) not in answers
        for d in m.distractors:
            rule = oracle_error_for(m.stem, d.answer)
            assert rule is not None and rule.description == d.error


def test_generation_is_deterministic():
    a = generate_corpus(get_families(), 30, seed=7)
    b = generate_corpus(get_families(), 30, seed=7)
    assert a.items == b.items
    assert a.items != generate_corpus(get_families(), 30, seed=8).items


def test_families_cycle():
    c = generate_corpus(get_families(), 9, seed=0)
    fams = [parse_stem(m.stem)[0].family for m in c.items]
    assert fams == ["fraction_division", "squaring", "lcm"] * 3


def test_stems_parse_back_for_every_phrasing():
    for t in FAMILIES.values():
        params = t.param_space[0]
        for v in range(len(t.stems)):
            parsed = parse_stem(t.stem(params, v))
            assert parsed == (t, params)


def test_label_drop_fraction_and_determinism():
    c = generate_corpus(get_families(), 40, seed=1)
    d = drop_labels(c, 0.5, seed=3)
    n_all = len(c.pairs())
    assert len(d.labeled_pairs()) == n_all - round(0.5 * n_all)
    assert [p.distractor for p in d.pairs()] == [p.distractor for p in c.pairs()]
    assert d.items == drop_labels(c, 0.5, seed=3).items
    assert len(generate_corpus(get_families(), 40, seed=1, label_drop=1.0).labeled_pairs()) == 0
    with pytest.raises(ValueError):
        drop_labels(c, 1.5, 0)


def test_unknown_family_rejected():
    with pytest.raises(ValueError, match="unknown"):
        get_families(["geometry"])


def test_oracle_rejects_key_and_foreign_answers():
    stem = "What is the lowest common multiple of 12 and 15?"
    assert oracle_error_for(stem, "60") is None
    assert oracle_error_for(stem, "27") is None
    assert oracle_error_for("Not a template", "3") is None


def test_taxonomy_manifest_lists_every_rule():
    rows = json.loads(taxonomy_manifest())["rules"]
    assert len(rows) == sum(len(t.rules) for t in FAMILIES.values())
    assert all(rule_by_description(r["description"]).id == r["id"] for r in rows)
