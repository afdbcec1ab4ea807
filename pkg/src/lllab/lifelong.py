"""Training drivers: teacher-distilled streams, pseudo-replay, finetune, multitask.

A stream trains one student on the tasks in ``config.order``. For each task
the distilled driver

1. trains a disposable teacher on that task alone,
2. samples ``floor(gamma * |D_m|)`` pseudo-samples for earlier tasks from
   the student itself,
3. runs ``epochs_per_task`` epochs in which new-task batches use the
   configured distillation loss and pseudo batches use plain NLL, with
   ``floor(gamma * n_new_batches)`` pseudo batches shuffled into each epoch,
4. evaluates every task's test set after every epoch, then drops the teacher.

The replay baseline is the same loop with NLL on new data and no teacher;
finetune also drops the replay.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .distill import LossKind, TeacherHandle, batch_new_task_loss, batch_prev_task_loss, \
    teacher_decode_batch
from .metrics import METRICS, DECODE_SLACK, MetricRecord, evaluate_task
from .model import LanguageModel, ModelConfig, top_k_sample_batch
from .taskdata import EOS_ID, PAD_ID, Reject, Sample, TaskDataset, Vocabulary, \
    make_lm_prefix, parse_pseudo

log = logging.getLogger(__name__)

METHODS = ("finetune", "lamol", "l2kd-word", "l2kd-seq", "l2kd-seqsoft",
           "multitask", "multitask-seqkd")
METHOD_LOSS = {"l2kd-word": "WordKD", "l2kd-seq": "SeqKD", "l2kd-seqsoft": "SeqKDsoft"}
RETRY_FACTOR = 5


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, phase: str, detail: str = ""):
        super().__init__(f"non-finite loss at step {step} ({phase}) {detail}".strip())
        self.step = step
        self.phase = phase


class TeacherQualityError(RuntimeError):
    pass


@dataclass(frozen=True)
class StreamConfig:
    order: tuple[str, ...] = ()
    gamma: float = 0.2
    epochs_per_task: int = 9
    loss_kind: LossKind = LossKind("NLL")
    batch_size: int = 16
    seed: int = 0
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 64
    context_len: int = 128
    lr: float = 6.25e-5
    adam_epsilon: float = 1.0e-4
    weight_decay: float = 0.01
    warmup_ratio: float = 0.005
    max_grad_norm: float = 1.0
    top_k: int = 20
    lm_weight: float = 1.0
    reset_optimizer: bool = True
    teacher_min_score: float = 95.0
    retain_teachers: bool = False
    max_gen_len: int = 32

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(self.order))
        if isinstance(self.loss_kind, dict):
            object.__setattr__(self, "loss_kind", LossKind(**self.loss_kind))
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.epochs_per_task < 1:
            raise ValueError("epochs_per_task must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(set(self.order)) != len(self.order):
            raise ValueError(f"task order has duplicates: {self.order}")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, self.n_layers, self.n_heads, self.d_model, self.context_len)

    def adam(self, total_steps: int) -> ad.AdamState:
        return ad.AdamState(total_steps=max(1, total_steps), lr_max=self.lr,
                            epsilon=self.adam_epsilon, weight_decay=self.weight_decay,
                            warmup_ratio=self.warmup_ratio, max_grad_norm=self.max_grad_norm)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["order"] = list(self.order)
        return d


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from a mix of ints and strings."""
    return zlib.crc32("/".join(str(p) for p in parts).encode())


@dataclass
class PseudoDataset:
    samples: list[Sample]
    requested: dict[str, int]
    accepted: dict[str, int]
    attempts: dict[str, int]
    rejects: dict[str, int]

    @property
    def shortfall(self) -> int:
        return sum(self.requested.values()) - len(self.samples)

    def summary(self) -> dict:
        return {"requested": self.requested, "accepted": self.accepted,
                "attempts": self.attempts, "rejects": self.rejects}


@dataclass
class RunReport:
    method: str
    order: tuple[str, ...]
    seed: int
    epochs_per_task: int
    metrics: dict[str, str]
    records: list[MetricRecord] = field(default_factory=list)
    audit: list[dict] = field(default_factory=list)
    pseudo: list[dict] = field(default_factory=list)
    teacher_scores: dict[str, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    student: LanguageModel | None = field(default=None, repr=False)
    teachers: dict[str, LanguageModel] = field(default_factory=dict, repr=False)

    @property
    def total_epochs(self) -> int:
        return max((r.epoch for r in self.records), default=0)

    def boundaries(self) -> list[int]:
        """Last epoch of every task except the final one."""
        if self.method.startswith("multitask"):
            return []
        return [self.epochs_per_task * (i + 1) for i in range(len(self.order) - 1)]

    def score(self, epoch: int, task: str, metric: str | None = None) -> float:
        metric = metric or self.metrics[task]
        for r in self.records:
            if r.epoch == epoch and r.eval_task == task and r.metric_name == metric:
                return r.value
        raise KeyError(f"no {metric} record for {task} at epoch {epoch}")

    def final_scores(self) -> dict[str, float]:
        last = self.total_epochs
        return {t: self.score(last, t) for t in self.order}

    def final_average(self) -> float:
        return float(np.mean(list(self.final_scores().values())))

    def post_task_score(self, task: str) -> float:
        """Score on ``task`` right after the student finished training on it."""
        if self.method.startswith("multitask"):
            return self.score(self.total_epochs, task)
        return self.score(self.epochs_per_task * (self.order.index(task) + 1), task)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "training_task", "eval_task", "metric", "value"])
        for r in self.records:
            w.writerow([r.epoch, r.training_task, r.eval_task, r.metric_name, repr(r.value)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "method": self.method, "order": list(self.order), "seed": self.seed,
            "epochs_per_task": self.epochs_per_task, "metrics": self.metrics,
            "records": [asdict(r) for r in self.records], "audit": self.audit,
            "pseudo": self.pseudo, "teacher_scores": self.teacher_scores,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(d["method"], tuple(d["order"]), d["seed"], d["epochs_per_task"],
                   d["metrics"], [MetricRecord(**r) for r in d["records"]], d["audit"],
                   d["pseudo"], d["teacher_scores"], d.get("config", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def write(self, out_dir: str | Path, stem: str) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jp, cp = out / f"{stem}.json", out / f"{stem}.csv"
        jp.write_text(self.to_json())
        cp.write_text(self.csv_text())
        return jp, cp


# ------------------------------------------------------------------ helpers


class _Trainer:
    """Owns the step counter and divergence checks for one model."""

    def __init__(self, model: LanguageModel, phase: str):
        self.model = model
        self.params = model.parameters()
        self.phase = phase
        self.steps = 0

    def step(self, opt: ad.AdamState, loss_fn: Callable[[], ad.Tensor]) -> float:
        self.model.zero_grad()
        try:
            with ad.Tape() as tape:
                loss = loss_fn()
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(self.steps, self.phase)
                ad.backward(tape, loss)
            ad.adam_step(opt, self.params, [p.grad for p in self.params])
        except ad.NonFiniteError as exc:
            raise DivergenceError(self.steps, self.phase, str(exc)) from exc
        self.steps += 1
        return value


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def _eval_all(model, tasks: Sequence[TaskDataset], epoch: int, training_task: str) -> list[MetricRecord]:
    out = []
    for task in tasks:
        scores = evaluate_task(model, task)
        for name in METRICS:
            out.append(MetricRecord(epoch, training_task, task.task_id, name, scores[name]))
    return out


def _teacher_cache_key(task: TaskDataset, config: StreamConfig) -> tuple:
    c = config
    return (task.spec, task.vocab.tokens if task.vocab else None, c.seed, c.epochs_per_task,
            c.batch_size, c.n_layers, c.n_heads, c.d_model, c.context_len, c.lr, c.adam_epsilon,
            c.weight_decay, c.warmup_ratio, c.max_grad_norm, c.lm_weight)


_TEACHER_CACHE: dict[tuple, tuple[dict, float, list]] = {}


def _vocab_size(tasks: Sequence[TaskDataset]) -> int:
    vocab = tasks[0].vocab
    if vocab is None:
        raise ValueError("tasks must be generated with a shared vocabulary")
    for t in tasks:
        if t.vocab != vocab:
            raise ValueError(f"task {t.task_id} uses a different vocabulary")
    return len(vocab)


def train_teacher(task: TaskDataset, config: StreamConfig, audit: list | None = None,
                  use_cache: bool = True) -> tuple[LanguageModel, float]:
    """Fresh model trained with QA+LM NLL on ``task`` only; returns (model, test score).

    Raises :class:`TeacherQualityError` if the test score misses
    ``config.teacher_min_score``.
    """
    if len(task.train) == 0:
        raise ValueError(f"task {task.task_id} has no training data")
    vocab_size = _vocab_size([task])
    key = _teacher_cache_key(task, config)
    model = LanguageModel(config.model_config(vocab_size),
                          seed=derive_seed(config.seed, "teacher", task.task_id))
    if use_cache and key in _TEACHER_CACHE:
        state, score, events = _TEACHER_CACHE[key]
        model.load_state_dict(state)
    else:
        rng = np.random.default_rng(derive_seed(config.seed, "teacher-data", task.task_id))
        n_batches = math.ceil(len(task.train) / config.batch_size)
        opt = config.adam(n_batches * config.epochs_per_task)
        trainer = _Trainer(model, f"teacher:{task.task_id}")
        nll = LossKind("NLL")
        events = []
        for epoch in range(config.epochs_per_task):
            for idx in _batches(len(task.train), config.batch_size, rng):
                batch = [task.train[i] for i in idx]
                trainer.step(opt, lambda: batch_new_task_loss(model, None, batch, nll, config.lm_weight))
                events.append(sorted({s.task_id for s in batch}))
        score = evaluate_task(model, task)[task.spec.metric]
        _TEACHER_CACHE[key] = (model.state_dict(), score, events)
    if audit is not None:
        foreign = sorted({t for ev in events for t in ev} - {task.task_id})
        audit.append({"event": "teacher_trained", "task": task.task_id, "steps": len(events),
                      "foreign_tasks": foreign, "score": score})
    if score < config.teacher_min_score:
        raise TeacherQualityError(
            f"teacher for {task.task_id} reached {score:.1f} < {config.teacher_min_score} "
            f"after {config.epochs_per_task} epochs (lr={config.lr}, n_train={len(task.train)}); "
            "raise lr/n_train or lower teacher_min_score")
    return model, score


def sample_pseudo_data(student, vocab: Vocabulary, prev_tasks: Sequence[str], count: int,
                       rng: np.random.Generator, k: int = 20, max_len: int = 32) -> PseudoDataset:
    """Generate ``count`` well-formed pseudo-samples, split evenly over ``prev_tasks``.

    Malformed generations are redrawn until each task has used
    ``RETRY_FACTOR`` times its quota; any remaining gap is reported, not raised.
    """
    prev_tasks = list(prev_tasks)
    requested = {t: 0 for t in prev_tasks}
    if prev_tasks and count > 0:
        base, extra = divmod(int(count), len(prev_tasks))
        for i, t in enumerate(prev_tasks):
            requested[t] = base + (1 if i < extra else 0)
    accepted = {t: 0 for t in prev_tasks}
    attempts = {t: 0 for t in prev_tasks}
    rejects: dict[str, int] = {}
    samples: list[Sample] = []
    k = min(k, student.vocab_size)
    for t in prev_tasks:
        want, cap = requested[t], RETRY_FACTOR * requested[t]
        prefix = make_lm_prefix(vocab, t)
        while accepted[t] < want and attempts[t] < cap:
            n = min(want - accepted[t], cap - attempts[t])
            attempts[t] += n
            for d in top_k_sample_batch(student, [prefix] * n, k, rng, EOS_ID, max_len, PAD_ID):
                if d.truncated:
                    parsed = Reject("not terminated by EOS")
                else:
                    parsed = parse_pseudo(vocab, prefix + list(d.tokens) + [EOS_ID])
                if isinstance(parsed, Reject):
                    rejects[parsed.reason] = rejects.get(parsed.reason, 0) + 1
                else:
                    samples.append(parsed)
                    accepted[t] += 1
    return PseudoDataset(samples, requested, accepted, attempts, rejects)


def pseudo_count(gamma: float, n: int) -> int:
    # guard against 0.2 * 100 landing a hair below 20
    return int(math.floor(gamma * n + 1e-9))


# ------------------------------------------------------------------- streams


def _resolve(tasks: Sequence[TaskDataset], config: StreamConfig) -> list[TaskDataset]:
    by_id = {t.task_id: t for t in tasks}
    order = config.order or tuple(t.task_id for t in tasks)
    missing = [t for t in order if t not in by_id]
    if missing:
        raise ValueError(f"order names unknown tasks: {missing}")
    return [by_id[t] for t in order]


def _new_report(method: str, stream: list[TaskDataset], config: StreamConfig) -> RunReport:
    return RunReport(method, tuple(t.task_id for t in stream), config.seed, config.epochs_per_task,
                     {t.task_id: t.spec.metric for t in stream}, config=config.to_dict())


def _save_checkpoint(model, out_dir, name, vocab, extra=None):
    if out_dir is None:
        return
    path = Path(out_dir) / "checkpoints"
    path.mkdir(parents=True, exist_ok=True)
    meta = {"vocab": vocab.to_dict(), **(extra or {})}
    model.save(path / name, meta)


def _retain(report: RunReport, teacher, task_id: str, vocab, out_dir) -> None:
    report.teachers[task_id] = teacher
    _save_checkpoint(teacher, out_dir, f"teacher_{task_id}", vocab, {"task": task_id})


def _run_stream(tasks: Sequence[TaskDataset], config: StreamConfig, method: str,
                teacher_fn: Callable[[TaskDataset], object] | None = None,
                out_dir: str | Path | None = None) -> RunReport:
    stream = _resolve(tasks, config)
    vocab = stream[0].vocab
    vocab_size = _vocab_size(stream)
    loss_kind = config.loss_kind
    distill = method.startswith("l2kd")
    if distill and not loss_kind.uses_teacher:
        raise ValueError(f"{method} needs a distillation loss kind, got {loss_kind.kind}")
    gamma = 0.0 if method == "finetune" else config.gamma
    report = _new_report(method, stream, config)
    if method == "finetune":
        report.audit.append({"event": "gamma_override", "gamma": 0.0})
        log.info("finetune: gamma forced to 0")

    student = LanguageModel(config.model_config(vocab_size), seed=derive_seed(config.seed, "student"))
    trainer = _Trainer(student, "student")
    data_rng = np.random.default_rng(derive_seed(config.seed, "student-data"))
    gen_rng = np.random.default_rng(derive_seed(config.seed, "pseudo"))
    nll = LossKind("NLL")
    opt = None
    epoch_global = 0
    n_new = [math.ceil(len(t.train) / config.batch_size) for t in stream]
    n_pseudo = [pseudo_count(gamma, n) for n in n_new]
    if not config.reset_optimizer:
        opt = config.adam(sum(config.epochs_per_task * (a + b) for a, b in zip(n_new, n_pseudo)))

    for m, task in enumerate(stream):
        teacher = None
        decoded = None
        if distill:
            if teacher_fn is not None:
                teacher = teacher_fn(task)
                report.audit.append({"event": "teacher_injected", "task": task.task_id})
            else:
                teacher, score = train_teacher(task, config, report.audit)
                report.teacher_scores[task.task_id] = score
            teacher = TeacherHandle(teacher)
            report.audit.append({"event": "teacher_created", "task": task.task_id})
            if loss_kind.uses_decode:
                budget = max(len(s.answer) for s in task.train) + DECODE_SLACK
                decoded = teacher_decode_batch(teacher, task.train, budget)
                n_trunc = sum(x.truncated for x in decoded)
                report.audit.append({"event": "teacher_decode", "task": task.task_id,
                                     "truncated": n_trunc})

        prev = [t.task_id for t in stream[:m]]
        want = pseudo_count(gamma, len(task.train)) if prev else 0
        pseudo = sample_pseudo_data(student, vocab, prev, want, gen_rng, config.top_k,
                                    config.max_gen_len)
        report.pseudo.append({"task": task.task_id, **pseudo.summary()})
        n_pb = n_pseudo[m] if pseudo.samples else 0
        if config.reset_optimizer:
            opt = config.adam(config.epochs_per_task * (n_new[m] + n_pb))
        checksum = teacher.checksum() if teacher is not None else None

        for _ in range(config.epochs_per_task):
            plan = [("new", idx) for idx in _batches(len(task.train), config.batch_size, data_rng)]
            if n_pb:
                order = data_rng.permutation(len(pseudo.samples))
                need = n_pb * config.batch_size
                pool = np.resize(order, max(need, 1))
                plan += [("pseudo", pool[i * config.batch_size:(i + 1) * config.batch_size])
                         for i in range(n_pb)]
                plan = [plan[i] for i in data_rng.permutation(len(plan))]
            for kind, idx in plan:
                if kind == "new":
                    batch = [task.train[i] for i in idx]
                    dec = [decoded[i] for i in idx] if decoded is not None else None
                    lk = loss_kind if distill else nll
                    if dec is not None and all(x.truncated for x in dec):
                        # nothing left once truncated decodes are excluded
                        report.audit.append({"event": "step_skipped", "task": task.task_id,
                                             "reason": "all teacher decodes truncated"})
                        continue
                    trainer.step(opt, lambda: batch_new_task_loss(
                        student, teacher, batch, lk, config.lm_weight, dec))
                else:
                    batch = [pseudo.samples[i] for i in idx]
                    lk = nll
                    trainer.step(opt, lambda: batch_prev_task_loss(student, batch, config.lm_weight))
                report.audit.append({"event": "step", "task": task.task_id, "batch": kind,
                                     "loss": lk.kind, "gold_tasks": sorted({s.task_id for s in batch})
                                     if kind == "new" else [],
                                     "pseudo_tasks": sorted({s.task_id for s in batch})
                                     if kind == "pseudo" else []})
            epoch_global += 1
            if teacher is not None and teacher.checksum() != checksum:
                raise RuntimeError(f"teacher for {task.task_id} changed during student training")
            report.records += _eval_all(student, stream, epoch_global, task.task_id)
            log.info("%s %s epoch %d: %s", method, task.task_id, epoch_global,
                     {t.task_id: report.score(epoch_global, t.task_id) for t in stream})

        _save_checkpoint(student, out_dir, f"student_after_{m + 1}_{task.task_id}", vocab,
                         {"task": task.task_id, "epoch": epoch_global})
        if teacher is not None:
            if config.retain_teachers:
                _retain(report, teacher.model, task.task_id, vocab, out_dir)
            report.audit.append({"event": "teacher_discarded", "task": task.task_id})
            teacher = None

    if config.retain_teachers and not distill:
        for task in stream:
            t_model, score = train_teacher(task, config, report.audit)
            report.teacher_scores[task.task_id] = score
            _retain(report, t_model, task.task_id, vocab, out_dir)
    report.student = student
    _save_checkpoint(student, out_dir, "student_final", vocab)
    return report


def run_l2kd_stream(tasks, config: StreamConfig, teacher_fn=None, out_dir=None) -> RunReport:
    method = {v: k for k, v in METHOD_LOSS.items()}.get(config.loss_kind.kind)
    if method is None:
        raise ValueError(f"loss kind {config.loss_kind.kind} is not a distillation kind")
    return _run_stream(tasks, config, method, teacher_fn, out_dir)


def run_lamol_stream(tasks, config: StreamConfig, out_dir=None) -> RunReport:
    return _run_stream(tasks, replace(config, loss_kind=LossKind("NLL", config.loss_kind.temperature)),
                       "lamol", out_dir=out_dir)


def run_finetune_stream(tasks, config: StreamConfig, out_dir=None) -> RunReport:
    return _run_stream(tasks, replace(config, loss_kind=LossKind("NLL", config.loss_kind.temperature)),
                       "finetune", out_dir=out_dir)


def run_multitask(tasks, config: StreamConfig, with_seq_kd: bool = False,
                  out_dir=None) -> RunReport:
    """One model on the shuffled union for ``epochs_per_task * len(tasks)`` epochs."""
    stream = _resolve(tasks, config)
    vocab = stream[0].vocab
    vocab_size = _vocab_size(stream)
    method = "multitask-seqkd" if with_seq_kd else "multitask"
    report = _new_report(method, stream, config)
    pool = [s for t in stream for s in t.train]
    targets = pool
    if with_seq_kd:
        targets = []
        for task in stream:
            teacher, score = train_teacher(task, config, report.audit)
            report.teacher_scores[task.task_id] = score
            budget = max(len(s.answer) for s in task.train) + DECODE_SLACK
            targets += teacher_decode_batch(teacher, task.train, budget)
            if config.retain_teachers:
                _retain(report, teacher, task.task_id, vocab, out_dir)
        report.audit.append({"event": "teachers_ready", "count": len(stream)})
    elif config.retain_teachers:
        for task in stream:
            teacher, score = train_teacher(task, config, report.audit)
            report.teacher_scores[task.task_id] = score
            _retain(report, teacher, task.task_id, vocab, out_dir)

    student = LanguageModel(config.model_config(vocab_size), seed=derive_seed(config.seed, "student"))
    trainer = _Trainer(student, "student")
    rng = np.random.default_rng(derive_seed(config.seed, "student-data"))
    epochs = config.epochs_per_task * len(stream)
    n_batches = math.ceil(len(pool) / config.batch_size)
    opt = config.adam(epochs * n_batches)
    nll = LossKind("NLL")
    for epoch in range(1, epochs + 1):
        for idx in _batches(len(pool), config.batch_size, rng):
            batch = [targets[i] for i in idx if not targets[i].truncated]
            if not batch:
                continue
            trainer.step(opt, lambda: batch_prev_task_loss(student, batch, config.lm_weight)
                         if not with_seq_kd else
                         batch_new_task_loss(student, None, batch, nll, config.lm_weight))
            report.audit.append({"event": "step", "task": "multitask", "batch": "new",
                                 "loss": "SeqKD" if with_seq_kd else "NLL",
                                 "gold_tasks": sorted({s.task_id for s in batch}),
                                 "pseudo_tasks": []})
        report.records += _eval_all(student, stream, epoch, "multitask")
    report.student = student
    _save_checkpoint(student, out_dir, "student_final", vocab)
    return report


def run_method(method: str, tasks, config: StreamConfig, out_dir=None) -> RunReport:
    if method == "finetune":
        return run_finetune_stream(tasks, config, out_dir)
    if method == "lamol":
        return run_lamol_stream(tasks, config, out_dir)
    if method in METHOD_LOSS:
        kind = LossKind(METHOD_LOSS[method], config.loss_kind.temperature)
        return run_l2kd_stream(tasks, replace(config, loss_kind=kind), out_dir=out_dir)
    if method == "multitask":
        return run_multitask(tasks, config, False, out_dir)
    if method == "multitask-seqkd":
        return run_multitask(tasks, config, True, out_dir)
    raise ValueError(f"unknown method {method!r}")
