"""Training losses: NLL, Word-KD, Seq-KD and Seq-KD_soft.

Each loss sums per-token terms over target positions ``t >= t0`` of one
sample (target position ``t`` is predicted from ``x_{<t}``; position 0 is
the begin token and is never a target). ``t0 = a1`` gives the answer loss,
``t0 = 0`` the whole-sequence loss. Batched variants average the per-sample
sums over the batch.

The KD temperature divides both teacher and student logits; Seq-KD is a
plain hard-target NLL on the teacher's greedy decode.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .model import greedy_decode_batch, pad_batch
from .taskdata import EOS_ID, PAD_ID, Sample

LOSS_KINDS = ("NLL", "WordKD", "SeqKDsoft", "SeqKD")


@dataclass(frozen=True)
class LossKind:
    kind: str = "NLL"
    temperature: float = 2.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def uses_teacher(self) -> bool:
        return self.kind != "NLL"

    @property
    def uses_decode(self) -> bool:
        return self.kind in ("SeqKD", "SeqKDsoft")


class TeacherHandle:
    """Read-only view of a frozen teacher. Only exposes no-grad logits."""

    def __init__(self, model):
        self._model = model
        self._memo: dict[tuple, np.ndarray] = {}
        self.frozen = True
        self.vocab_size = model.vocab_size
        self.context_len = model.context_len

    @property
    def model(self):
        return self._model

    def logits_numpy(self, ids) -> np.ndarray:
        # Under the causal mask a right-padded row scores the same whatever
        # batch it sits in, and the teacher never changes, so each distinct
        # row is run once. Padding positions come back as zeros.
        ids = np.asarray(ids, dtype=np.int64)
        keys = []
        for row in ids:
            real = np.flatnonzero(row != PAD_ID)
            keys.append(tuple(row[:real[-1] + 1].tolist()) if len(real) else ())
        todo = [i for i, k in enumerate(keys) if k and k not in self._memo]
        if todo:
            width = max(len(keys[i]) for i in todo)
            fresh = self._model.logits_numpy(ids[todo, :width])
            for j, i in enumerate(todo):
                self._memo[keys[i]] = fresh[j, :len(keys[i])]
        out = np.zeros(ids.shape + (self.vocab_size,))
        for b, k in enumerate(keys):
            if k:
                out[b, :len(k)] = self._memo[k]
        return out

    def checksum(self) -> str:
        return self._model.checksum()


def _teacher(t):
    return t if isinstance(t, TeacherHandle) else TeacherHandle(t)


def _check_vocab(student, teacher) -> None:
    if student.vocab_size != teacher.vocab_size:
        raise ValueError(f"vocabulary mismatch: student {student.vocab_size}, "
                         f"teacher {teacher.vocab_size}")


def position_weights(samples: Sequence[Sample], t0s: Sequence[int], width: int,
                     lm_weight: float | None = None) -> np.ndarray:
    """(B, width) weights; row ``t`` weights the prediction of token ``t + 1``.

    With ``lm_weight`` set, each sample gets its answer positions from
    ``t0s`` plus ``lm_weight`` times every position, i.e. the QA + LM sum.
    """
    w = np.zeros((len(samples), width))
    for b, (s, t0) in enumerate(zip(samples, t0s)):
        if not 0 <= t0 < s.T:
            raise ValueError(f"t0={t0} out of range for sample of length {s.T}")
        start = max(t0, 1)
        w[b, start - 1:s.T - 1] = 1.0
        if lm_weight is not None:
            w[b, 0:s.T - 1] += lm_weight
    return w


def _one_hot_targets(ids: np.ndarray, vocab_size: int) -> np.ndarray:
    B, L = ids.shape
    out = np.zeros((B, L, vocab_size))
    nxt = np.full((B, L), PAD_ID)
    nxt[:, :-1] = ids[:, 1:]
    np.put_along_axis(out, nxt[..., None], 1.0, axis=2)
    out[:, -1, :] = 0.0
    return out


def _teacher_probs(teacher, ids: np.ndarray, tau: float) -> np.ndarray:
    z = teacher.logits_numpy(ids) / tau
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def cross_entropy_from_logits(logits: Tensor, targets: np.ndarray, weights: np.ndarray,
                              tau: float | None = None) -> Tensor:
    """``(1/B) sum_b sum_t w[b,t] sum_k -targets[b,t,k] log softmax(logits/tau)[b,t,k]``."""
    if logits.shape != targets.shape or logits.shape[:2] != weights.shape:
        raise ad.ShapeError(f"cross entropy: logits {logits.shape}, targets {targets.shape}, "
                            f"weights {weights.shape}")
    z = logits if tau is None else ad.mul(logits, 1.0 / tau)
    logp = ad.log_softmax(z, axis=-1)
    coef = targets * weights[..., None] * (-1.0 / logits.shape[0])
    return ad.reduce_sum(ad.mul(logp, coef))


def batch_nll(student, samples: Sequence[Sample], t0s: Sequence[int] | None = None,
              lm_weight: float | None = None) -> Tensor:
    ids = pad_batch([s.encoded for s in samples], PAD_ID)
    t0s = [s.a1 for s in samples] if t0s is None else t0s
    w = position_weights(samples, t0s, ids.shape[1], lm_weight)
    return cross_entropy_from_logits(student.forward(ids), _one_hot_targets(ids, student.vocab_size), w)


def batch_word_kd(student, teacher, samples: Sequence[Sample], tau: float,
                  t0s: Sequence[int] | None = None, lm_weight: float | None = None) -> Tensor:
    teacher = _teacher(teacher)
    _check_vocab(student, teacher)
    ids = pad_batch([s.encoded for s in samples], PAD_ID)
    t0s = [s.a1 for s in samples] if t0s is None else t0s
    w = position_weights(samples, t0s, ids.shape[1], lm_weight)
    with no_grad():
        probs = _teacher_probs(teacher, ids, tau)
    return cross_entropy_from_logits(student.forward(ids), probs, w, tau)


def nll_loss(student, sample: Sample, t0: int) -> Tensor:
    """Summed ``-log P(x_t | x_<t)`` over target positions ``t >= t0``."""
    return batch_nll(student, [sample], [t0])


def word_kd_loss(student, teacher, sample: Sample, t0: int, tau: float = 2.0) -> Tensor:
    """Teacher/student cross-entropy along the gold prefix, both at temperature ``tau``."""
    return batch_word_kd(student, teacher, [sample], tau, [t0])


def teacher_decode_batch(teacher, samples: Sequence[Sample],
                         max_answer_len: int | None = None) -> list[Sample]:
    """Replace each answer by the teacher's greedy decode from the ANS-terminated prefix."""
    teacher = _teacher(teacher)
    budget = teacher.context_len - 1 if max_answer_len is None else max_answer_len
    out = []
    # the answer plus EOS must still fit in the context window
    decoded = greedy_decode_batch(teacher.model, [s.prefix for s in samples], EOS_ID,
                                  max_len=budget, pad_id=PAD_ID)
    for s, d in zip(samples, decoded):
        room = teacher.context_len - s.a1 - 1
        truncated = d.truncated or len(d.tokens) > room
        tail = () if truncated else (EOS_ID,)
        out.append(Sample(s.task_id, s.context, s.question, d.tokens,
                          s.prefix + d.tokens + tail, s.a1, truncated))
    return out


def teacher_decode_answer(teacher, sample: Sample, max_answer_len: int | None = None) -> Sample:
    return teacher_decode_batch(teacher, [sample], max_answer_len)[0]


def _require_complete(xhat: Sample) -> None:
    if xhat.truncated:
        raise ValueError("teacher decode was truncated (no EOS); excluded from Seq-KD")


def seq_kd_loss(student, xhat: Sample, t0: int) -> Tensor:
    """Hard-target NLL on the teacher sequence."""
    _require_complete(xhat)
    return nll_loss(student, xhat, t0)


def seq_kd_soft_loss(student, teacher, xhat: Sample, t0: int, tau: float = 2.0) -> Tensor:
    """Word-KD computed along the teacher's decoded prefix."""
    _require_complete(xhat)
    return word_kd_loss(student, teacher, xhat, t0, tau)


def batch_new_task_loss(student, teacher, samples: Sequence[Sample], loss_kind: LossKind,
                        lm_weight: float = 1.0, decoded: Sequence[Sample] | None = None) -> Tensor:
    """Answer loss plus ``lm_weight`` times whole-sequence loss, averaged over the batch.

    For the Seq-KD kinds ``decoded`` may carry precomputed teacher decodes;
    truncated decodes are dropped from the batch.
    """
    kind = loss_kind.kind
    if kind == "NLL":
        return batch_nll(student, samples, lm_weight=lm_weight)
    if teacher is None:
        raise ValueError(f"{kind} needs a teacher")
    if loss_kind.uses_decode:
        xs = decoded if decoded is not None else teacher_decode_batch(teacher, samples)
        samples = [x for x in xs if not x.truncated]
        if not samples:
            raise ValueError("every teacher decode in the batch was truncated")
    if kind == "SeqKD":
        return batch_nll(student, samples, lm_weight=lm_weight)
    return batch_word_kd(student, teacher, samples, loss_kind.temperature, lm_weight=lm_weight)


def new_task_loss(student, teacher, sample: Sample, loss_kind: LossKind,
                  lm_weight: float = 1.0) -> Tensor:
    return batch_new_task_loss(student, teacher, [sample], loss_kind, lm_weight)


def batch_prev_task_loss(student, samples: Sequence[Sample], lm_weight: float = 1.0) -> Tensor:
    """Pseudo-sample loss: always plain NLL, never a teacher."""
    return batch_nll(student, samples, lm_weight=lm_weight)


def prev_task_loss(student, pseudo: Sample, lm_weight: float = 1.0) -> Tensor:
    return batch_prev_task_loss(student, [pseudo], lm_weight)
