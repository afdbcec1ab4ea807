"""Report builders: order permutations, learning curves, teacher-split analysis."""

from __future__ import annotations

import csv
import io
import itertools
import math
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .lifelong import RunReport, StreamConfig, run_method
from .metrics import exact_match, predict_answers
from .taskdata import TaskDataset

log = logging.getLogger(__name__)


def run_stem(method: str, order: Sequence[str], seed: int) -> str:
    return f"{method}_{'-'.join(order)}_{seed}"


# -------------------------------------------------------------- permutations


@dataclass
class PermutationReport:
    """Final scores per method and order, with Table-3 style mean/std rows.

    Standard deviations are population (ddof=0) over orders. The ``avg``
    entry of ``std`` is the mean of the per-task standard deviations; the
    ``avg`` entry of ``mean`` is the mean of the per-task means.
    """

    tasks: tuple[str, ...]
    scores: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)

    @property
    def methods(self) -> list[str]:
        return list(self.scores)

    def per_task(self, method: str) -> dict[str, np.ndarray]:
        rows = self.scores[method].values()
        return {t: np.array([r[t] for r in rows]) for t in self.tasks}

    def mean(self, method: str) -> dict[str, float]:
        per = self.per_task(method)
        out = {t: float(v.mean()) for t, v in per.items()}
        out["avg"] = float(np.mean([out[t] for t in self.tasks]))
        return out

    def std(self, method: str) -> dict[str, float]:
        per = self.per_task(method)
        out = {t: float(v.std(ddof=0)) for t, v in per.items()}
        out["avg"] = float(np.mean([out[t] for t in self.tasks]))
        return out

    def std_of_average(self, method: str) -> float:
        avgs = [np.mean([r[t] for t in self.tasks]) for r in self.scores[method].values()]
        return float(np.std(avgs, ddof=0))

    def to_dict(self) -> dict:
        return {"tasks": list(self.tasks), "scores": self.scores,
                "mean": {m: self.mean(m) for m in self.methods},
                "std": {m: self.std(m) for m in self.methods}}

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "method", *self.tasks, "avg"])
        for stat in ("mean", "std"):
            for m in self.methods:
                vals = getattr(self, stat)(m)
                w.writerow([stat, m, *(f"{vals[t]:.2f}" for t in self.tasks), f"{vals['avg']:.2f}"])
        return buf.getvalue()


def _run_one(method: str, tasks, config: StreamConfig) -> dict:
    return run_method(method, tasks, config).to_dict()


def permutation_harness(tasks: Sequence[TaskDataset], config: StreamConfig,
                        methods: Sequence[str], out_dir: str | Path | None = None,
                        jobs: int = 1, max_tasks: int = 4) -> PermutationReport:
    """Run every method on every ordering of ``tasks`` with the same seed.

    With ``out_dir`` each run is written as ``{method}_{order}_{seed}`` and
    recorded in ``completed.json``; runs already listed there are reloaded
    instead of retrained.
    """
    ids = tuple(t.task_id for t in tasks)
    if len(ids) > max_tasks:
        raise ValueError(f"{len(ids)} tasks give {math.factorial(len(ids))} orders; "
                         f"limit is {max_tasks} tasks")
    orders = list(itertools.permutations(ids))
    out = Path(out_dir) if out_dir is not None else None
    manifest_path = out / "completed.json" if out else None
    done: list[str] = json.loads(manifest_path.read_text()) if out and manifest_path.exists() else []

    jobs_todo, reports = [], {}
    for order in orders:
        for method in methods:
            stem = run_stem(method, order, config.seed)
            if stem in done and (out / f"{stem}.json").exists():
                reports[stem] = RunReport.from_dict(json.loads((out / f"{stem}.json").read_text()))
                log.info("resume: %s already complete", stem)
            else:
                jobs_todo.append((stem, method, replace(config, order=order)))

    def finish(stem, rep: RunReport):
        reports[stem] = rep
        if out:
            rep.write(out, stem)
            done.append(stem)
            manifest_path.write_text(json.dumps(sorted(done), indent=1))
        log.info("finished %s: final %s", stem, rep.final_scores())

    if jobs > 1 and len(jobs_todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [(stem, pool.submit(_run_one, method, list(tasks), cfg))
                    for stem, method, cfg in jobs_todo]
            for stem, fut in futs:
                finish(stem, RunReport.from_dict(fut.result()))
    else:
        for stem, method, cfg in jobs_todo:
            finish(stem, run_method(method, tasks, cfg))

    report = PermutationReport(ids)
    for method in methods:
        report.scores[method] = {
            "-".join(order): reports[run_stem(method, order, config.seed)].final_scores()
            for order in orders}
    if out:
        (out / "permutation_report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
        (out / "permutation_table.csv").write_text(report.table_csv())
    return report


# ------------------------------------------------------------------- curves


def learning_curves(report: RunReport) -> dict[str, list[dict]]:
    """Per eval task: score by global epoch, with task-boundary markers."""
    expected = report.epochs_per_task * len(report.order)
    boundaries = set(report.boundaries())
    curves = {}
    for task in report.order:
        metric = report.metrics[task]
        rows = sorted((r for r in report.records
                       if r.eval_task == task and r.metric_name == metric), key=lambda r: r.epoch)
        if [r.epoch for r in rows] != list(range(1, expected + 1)):
            raise ValueError(f"report incomplete for {task}: {len(rows)} of {expected} epochs")
        curves[task] = [{"epoch": r.epoch, "training_task": r.training_task, "value": r.value,
                         "boundary": int(r.epoch in boundaries)} for r in rows]
    return curves


def curves_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["epoch", "training_task", "value", "boundary"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


# ------------------------------------------------------------ teacher split


@dataclass(frozen=True)
class SplitResult:
    acc: float
    acc_a: float | None
    acc_b: float | None
    n_a: int
    n_b: int

    def weighted(self) -> float:
        n = self.n_a + self.n_b
        return ((self.n_a * (self.acc_a or 0.0)) + (self.n_b * (self.acc_b or 0.0))) / n


def teacher_split_analysis(student, teacher, task: TaskDataset) -> SplitResult:
    """Student exact-match accuracy overall and on the teacher-correct (A) / wrong (B) groups.

    An empty group has accuracy ``None``.
    """
    gold = [s.answer for s in task.test]
    t_ok = [exact_match(p, g) for p, g in zip(predict_answers(teacher, task), gold)]
    s_ok = [exact_match(p, g) for p, g in zip(predict_answers(student, task), gold)]
    group_a = [s for s, t in zip(s_ok, t_ok) if t]
    group_b = [s for s, t in zip(s_ok, t_ok) if not t]

    def pct(xs):
        return 100.0 * sum(xs) / len(xs) if xs else None

    return SplitResult(pct(s_ok), pct(group_a), pct(group_b), len(group_a), len(group_b))


def split_table_csv(task_id: str, rows: dict[str, SplitResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "model", "acc", "acc_A", "acc_B", "n_A", "n_B"])
    for name, r in rows.items():
        fmt = lambda v: "" if v is None else repr(v)  # noqa: E731
        w.writerow([task_id, name, repr(r.acc), fmt(r.acc_a), fmt(r.acc_b), r.n_a, r.n_b])
    return buf.getvalue()
