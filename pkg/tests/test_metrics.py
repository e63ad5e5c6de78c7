import json
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmdial import metrics
from mmdial.metrics import (METRICS, AlignmentError, EvalCase, align, bleu, cider, evaluate_corpus,
                            rouge_l, score_all)

from golden import GOLDEN, HAND
from oracles import oracle_all


def cases_of(corpus):
    return [EvalCase(c, r) for c, r in corpus]


@pytest.mark.parametrize("name", sorted(GOLDEN))
def test_golden_matches_oracle(name):
    got = score_all(cases_of(GOLDEN[name]))
    want = oracle_all(GOLDEN[name])
    for m in METRICS:
        assert abs(got[m] - want[m]) <= 1e-6, (m, got[m], want[m])


@pytest.mark.parametrize("key", sorted(HAND))
def test_hand_derived_values(key):
    name, metric = key
    got = score_all(cases_of(GOLDEN[name]))[metric]
    assert abs(got - HAND[key]) <= 1e-9


def test_hand_values_round_as_documented():
    assert round(HAND[("brevity_only", "BLEU-1")], 4) == 0.3679
    assert abs(HAND[("lcs_half_recall", "ROUGE-L")] - 0.6289) < 1e-4


def test_perfect_predictions_score_one():
    r = score_all(cases_of(GOLDEN["perfect_two_cases"]))
    for m in METRICS[:5]:
        assert abs(r[m] - 1.0) < 1e-12
    assert abs(r["CIDEr"] - 10.0) < 1e-9


def test_smoothing_flag():
    cases = cases_of(GOLDEN["bleu4_zero"])
    assert bleu(cases, 4) == 0.0
    assert bleu(cases, 4, smooth=True) > 0.0


def test_argument_errors():
    with pytest.raises(ValueError):
        bleu([], 4)
    with pytest.raises(ValueError):
        bleu(cases_of(GOLDEN["disjoint"]), 5)
    with pytest.raises(ValueError):
        EvalCase(["a"], [])


words = st.sampled_from("a b c d the man is yes no".split())
corpora = st.lists(st.tuples(st.lists(words, max_size=8), st.lists(st.lists(words, min_size=1, max_size=8),
                                                                    min_size=1, max_size=3)),
                   min_size=1, max_size=6)


@settings(max_examples=60, deadline=None)
@given(corpora, st.randoms())
def test_permutation_invariance_and_ranges(corpus, rnd):
    a = score_all(cases_of(corpus))
    shuffled = list(corpus)
    rnd.shuffle(shuffled)
    b = score_all(cases_of(shuffled))
    for m in METRICS:
        assert math.isclose(a[m], b[m], rel_tol=1e-12, abs_tol=1e-12)
    assert 0.0 <= a["ROUGE-L"] <= 1.0 and a["CIDEr"] >= 0.0
    want = oracle_all(corpus)
    for m in METRICS:
        assert abs(a[m] - want[m]) <= 1e-6


def test_align_and_files(tmp_path):
    preds = [{"dialogue_id": "v1", "turn": 1, "text": "yes he is"},
             {"dialogue_id": "v1", "turn": 2, "text": "two"}]
    refs = [{"dialogue_id": "v1", "turn": 1, "texts": ["yes he is", "yes"]},
            {"dialogue_id": "v1", "turn": 2, "texts": ["two people"]}]
    metrics.write_jsonl(tmp_path / "p.jsonl", preds)
    metrics.write_jsonl(tmp_path / "r.jsonl", refs)
    report = evaluate_corpus(tmp_path / "p.jsonl", tmp_path / "r.jsonl")
    assert set(report) == set(METRICS)
    table = metrics.format_report(report)
    assert table.splitlines()[0].split() == list(METRICS)
    with pytest.raises(AlignmentError, match="v1#2"):
        align(preds, refs[:1])
    with pytest.raises(AlignmentError, match="empty"):
        align([], refs)
