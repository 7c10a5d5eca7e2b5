"""Tests for answer normalization, F1 and Exact Match."""

import random
import re
import string

import pytest

from modules.eval_metrics import (Metric, Score, evaluate, exact_match, f1_score,
                                  normalize_answer, score_predictions)
from utils.errors import MetricError


def brute_force_tokens(text):
    kept = "".join(ch for ch in text.lower() if ch not in string.punctuation)
    words = kept.split()
    return [word for word in words if word not in ("a", "an", "the")]


def brute_force_f1(pred, gold):
    p, g = brute_force_tokens(pred), brute_force_tokens(gold)
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    remaining = list(g)
    overlap = 0
    for token in p:
        if token in remaining:
            remaining.remove(token)
            overlap += 1
    if overlap == 0:
        return 0.0
    precision, recall = overlap / len(p), overlap / len(g)
    return 2 * precision * recall / (precision + recall)


VOCAB = ["the", "a", "an", "cat", "Cat", "dog", "blue", "whale", "red,", "brick", "house.",
         "Paris!", "the's", "x-ray", "42", "été", "AN", "The"]


def random_answer(rng):
    return " ".join(rng.choice(VOCAB) for _ in range(rng.randint(0, 6)))


@pytest.mark.parametrize("text, tokens", [
    ("The Eiffel Tower!", ["eiffel", "tower"]),
    ("", []),
    ("A   dog,  the dog.", ["dog", "dog"]),
])
def test_normalize_answer(text, tokens):
    assert normalize_answer(text) == tokens


def test_f1_fixed_cases():
    assert f1_score("blue whale", "blue whale").value == 1.0
    assert f1_score("blue whale", "red house").value == 0.0
    assert f1_score("red brick building", "brick building").value == pytest.approx(0.8)
    assert f1_score("", "").value == 1.0
    assert f1_score("", "cat").value == 0.0


def test_exact_match_fixed_cases():
    assert exact_match("The cat", "cat").value == 1.0
    assert exact_match("cats", "cat").value == 0.0
    assert exact_match("", "").value == 1.0


def test_evaluate_takes_max_over_golds():
    assert evaluate("Paris", ["Paris", "paris france"], Metric.F1).value == 1.0
    assert evaluate("y", ["x"], "em").value == 0.0
    assert evaluate("red brick building", ["brick building", "red house"], "f1").value == \
        pytest.approx(0.8)


def test_evaluate_requires_golds():
    with pytest.raises(MetricError):
        evaluate("x", [], "f1")


def test_unknown_metric():
    with pytest.raises(MetricError):
        Metric.parse("bleu")


def test_em_scores_are_binary():
    with pytest.raises(MetricError):
        Score(0.5, Metric.EM)


def test_agrees_with_brute_force_reference():
    rng = random.Random(2024)
    for _ in range(200):
        pred, gold = random_answer(rng), random_answer(rng)
        assert f1_score(pred, gold).value == pytest.approx(brute_force_f1(pred, gold), abs=1e-9)
        expected_em = float(brute_force_tokens(pred) == brute_force_tokens(gold))
        assert exact_match(pred, gold).value == expected_em


def test_properties_over_random_pairs():
    rng = random.Random(7)
    for _ in range(200):
        pred, gold, extra = random_answer(rng), random_answer(rng), random_answer(rng)
        assert f1_score(pred, gold).value == pytest.approx(f1_score(gold, pred).value)
        if exact_match(pred, gold).value == 1.0:
            assert f1_score(pred, gold).value == 1.0
        base = evaluate(pred, [gold], "f1").value
        assert evaluate(pred, [gold, extra], "f1").value >= base


def test_score_predictions():
    rows = [{"id": "1", "prediction": "Paris", "golds": ["paris"]},
            {"id": "2", "prediction": "Rome", "golds": "london"}]
    result = score_predictions(rows, "em")
    assert result["count"] == 2
    assert result["mean"] == 0.5
    assert result["scores"] == [{"id": "1", "score": 1.0}, {"id": "2", "score": 0.0}]


def test_score_predictions_missing_field():
    with pytest.raises(MetricError):
        score_predictions([{"id": "1", "golds": ["x"]}], "f1")


def test_articles_only_removed_as_words():
    assert normalize_answer("another theatre") == ["another", "theatre"]
    assert re.fullmatch(r"[a-z ]*", " ".join(normalize_answer("The Tower")))
