"""Answer scoring: SQuAD-style normalization, token F1 and Exact Match."""

import re
import string
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Iterable, List, Sequence, Union

from utils.errors import MetricError

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCTUATION = set(string.punctuation)


class Metric(str, Enum):
    F1 = "f1"
    EM = "em"

    @classmethod
    def parse(cls, value: Union[str, "Metric"]) -> "Metric":
        if isinstance(value, Metric):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise MetricError(f"unknown metric {value!r} (expected 'f1' or 'em')")


@dataclass(frozen=True)
class Score:
    value: float
    metric: Metric

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise MetricError(f"score {self.value} outside [0, 1]")
        if self.metric is Metric.EM and self.value not in (0.0, 1.0):
            raise MetricError(f"exact match score must be 0 or 1, got {self.value}")


def normalize_answer(s: str) -> List[str]:
    """Lowercase, strip punctuation, drop articles, split on whitespace."""
    s = s.lower()
    s = ''.join(ch for ch in s if ch not in _PUNCTUATION)
    s = _ARTICLES.sub(' ', s)
    return s.split()


def f1_score(pred: str, gold: str) -> Score:
    pred_tokens = normalize_answer(pred)
    gold_tokens = normalize_answer(gold)
    if not pred_tokens or not gold_tokens:
        return Score(float(pred_tokens == gold_tokens), Metric.F1)
    overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if overlap == 0:
        return Score(0.0, Metric.F1)
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return Score(2 * precision * recall / (precision + recall), Metric.F1)


def exact_match(pred: str, gold: str) -> Score:
    return Score(float(normalize_answer(pred) == normalize_answer(gold)), Metric.EM)


_SCORERS = {Metric.F1: f1_score, Metric.EM: exact_match}


def evaluate(pred: str, golds: Sequence[str], metric: Union[str, Metric]) -> Score:
    """Best score of ``pred`` over all gold answers.

    Raises:
        MetricError: If ``golds`` is empty.
    """
    metric = Metric.parse(metric)
    if not golds:
        raise MetricError("at least one gold answer is required")
    scorer = _SCORERS[metric]
    return max((scorer(pred, gold) for gold in golds), key=lambda score: score.value)


def score_predictions(rows: Iterable[Dict[str, Any]], metric: Union[str, Metric]) -> Dict[str, Any]:
    """Score ``{"id", "prediction", "golds"}`` rows; returns the mean and per-id scores."""
    metric = Metric.parse(metric)
    per_id = []
    for row in rows:
        for key in ('id', 'prediction', 'golds'):
            if key not in row:
                raise MetricError(f"prediction row is missing {key!r}")
        golds = row['golds'] if isinstance(row['golds'], list) else [row['golds']]
        per_id.append({'id': row['id'],
                       'score': evaluate(str(row['prediction']), golds, metric).value})
    mean = sum(item['score'] for item in per_id) / len(per_id) if per_id else 0.0
    return {'metric': metric.value, 'count': len(per_id), 'mean': mean, 'scores': per_id}
