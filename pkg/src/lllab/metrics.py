"""Answer-level metrics and test-set evaluation by greedy decoding."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import greedy_decode_batch
from .taskdata import EOS_ID, PAD_ID, TaskDataset

METRICS = ("exact_match", "token_f1")
DECODE_SLACK = 4


@dataclass(frozen=True)
class MetricRecord:
    epoch: int
    training_task: str
    eval_task: str
    metric_name: str
    value: float

    def __post_init__(self):
        if self.metric_name not in METRICS:
            raise ValueError(f"unknown metric {self.metric_name!r}")
        if not 0.0 <= self.value <= 100.0:
            raise ValueError(f"metric value {self.value} outside [0, 100]")


def _strip_eos(seq: Sequence[int]) -> list[int]:
    seq = list(seq)
    while seq and seq[-1] == EOS_ID:
        seq.pop()
    return seq


def exact_match(prediction: Sequence[int], gold: Sequence[int]) -> int:
    return int(_strip_eos(prediction) == _strip_eos(gold))


def token_f1(prediction: Sequence, gold: Sequence) -> float:
    """Token-multiset F1 in [0, 100]; two empty sequences score 100."""
    pred, ref = _strip_eos(prediction), _strip_eos(gold)
    if not pred and not ref:
        return 100.0
    if not pred or not ref:
        return 0.0
    common = sum((Counter(pred) & Counter(ref)).values())
    if common == 0:
        return 0.0
    p, r = common / len(pred), common / len(ref)
    return 100.0 * 2 * p * r / (p + r)


def predict_answers(model, task: TaskDataset, split: str = "test") -> list[tuple[int, ...]]:
    samples = getattr(task, split)
    budget = max(len(s.answer) for s in samples) + DECODE_SLACK
    decoded = greedy_decode_batch(model, [s.prefix for s in samples], EOS_ID, budget, PAD_ID)
    return [d.tokens for d in decoded]


def score_predictions(preds, task: TaskDataset, metric: str, split: str = "test") -> float:
    golds = [s.answer for s in getattr(task, split)]
    if metric == "exact_match":
        vals = [100.0 * exact_match(p, g) for p, g in zip(preds, golds)]
    else:
        vals = [token_f1(p, g) for p, g in zip(preds, golds)]
    return float(np.mean(vals))


def evaluate_task(model, task: TaskDataset,
                  metrics: Sequence[str] | None = None) -> dict[str, float]:
    """Greedy-decode every test answer and score it; keys are metric names.

    The task's configured metric is always included.
    """
    if task.vocab is not None and model.vocab_size != len(task.vocab):
        raise ValueError(f"vocabulary mismatch: model {model.vocab_size}, task {len(task.vocab)}")
    metrics = list(metrics or METRICS)
    if task.spec.metric not in metrics:
        metrics.append(task.spec.metric)
    preds = predict_answers(model, task)
    return {m: score_predictions(preds, task, m) for m in metrics}
