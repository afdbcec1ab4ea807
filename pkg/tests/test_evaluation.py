import json

import numpy as np
import pytest

from lllab import evaluation
from lllab.evaluation import (PermutationReport, SplitResult, learning_curves,
                              permutation_harness, teacher_split_analysis)
from lllab.lifelong import RunReport, run_method
from lllab.metrics import MetricRecord

from test_lifelong import tiny_config, tiny_tasks
from test_metrics import oracle_for


@pytest.fixture(scope="module")
def tasks():
    return tiny_tasks(n_train=40)


def test_permutation_stats_hand_values():
    rep = PermutationReport(("a", "b"))
    rep.scores["m"] = {"a-b": {"a": 0.0, "b": 100.0}, "b-a": {"a": 100.0, "b": 50.0}}
    assert rep.mean("m") == {"a": 50.0, "b": 75.0, "avg": 62.5}
    # population std: |0 - 100| / 2 and |100 - 50| / 2
    assert rep.std("m") == {"a": 50.0, "b": 25.0, "avg": 37.5}
    assert rep.std_of_average("m") == pytest.approx(12.5)
    lines = rep.table_csv().splitlines()
    assert lines[0] == "row,method,a,b,avg"
    assert lines[1:] == ["mean,m,50.00,75.00,62.50", "std,m,50.00,25.00,37.50"]


def test_harness_runs_all_orders_and_resumes(tasks, tmp_path, monkeypatch):
    cfg = tiny_config()
    rep = permutation_harness(tasks, cfg, ["finetune", "lamol"], out_dir=tmp_path)
    assert len(rep.scores["finetune"]) == len(rep.scores["lamol"]) == 6
    done = json.loads((tmp_path / "completed.json").read_text())
    assert len(done) == 12 and "lamol_reverse-sort-copy_0" in done
    assert (tmp_path / "finetune_copy-sort-reverse_0.csv").exists()

    def boom(*a, **k):
        raise AssertionError("completed run retrained")

    monkeypatch.setattr(evaluation, "run_method", boom)
    again = permutation_harness(tasks, cfg, ["finetune", "lamol"], out_dir=tmp_path)
    assert again.to_dict() == rep.to_dict()


def test_harness_resumes_partial_manifest(tasks, tmp_path):
    cfg = tiny_config()
    permutation_harness(tasks[:2], cfg, ["finetune"], out_dir=tmp_path)
    manifest = tmp_path / "completed.json"
    manifest.write_text(json.dumps(json.loads(manifest.read_text())[:1]))
    rep = permutation_harness(tasks[:2], cfg, ["finetune"], out_dir=tmp_path)
    assert len(json.loads(manifest.read_text())) == 2 and len(rep.scores["finetune"]) == 2


def test_harness_rejects_too_many_tasks(tasks):
    with pytest.raises(ValueError, match="orders"):
        permutation_harness(tasks, tiny_config(), ["finetune"], max_tasks=2)


def test_learning_curves_shape(tasks):
    rep = run_method("lamol", tasks, tiny_config(epochs_per_task=2))
    curves = learning_curves(rep)
    assert set(curves) == {"reverse", "sort", "copy"}
    for rows in curves.values():
        assert [r["epoch"] for r in rows] == list(range(1, 7))
        assert [r["boundary"] for r in rows] == [0, 1, 0, 1, 0, 0]
    assert evaluation.curves_csv(curves["sort"]).count("\n") == 7


def test_learning_curves_reject_incomplete(tasks):
    rep = run_method("finetune", tasks[:2], tiny_config())
    rep.records = [r for r in rep.records if r.epoch != 2]
    with pytest.raises(ValueError, match="incomplete"):
        learning_curves(rep)


def test_teacher_split_on_self_is_100_0(tasks):
    model = run_method("lamol", tasks[:1], tiny_config()).student
    r = teacher_split_analysis(model, model, tasks[0])
    if r.n_a:
        assert r.acc_a == 100.0
    if r.n_b:
        assert r.acc_b == 0.0


def test_teacher_split_with_oracle_teacher(tasks):
    task = tasks[0]
    oracle = oracle_for(task)
    r = teacher_split_analysis(oracle, oracle, task)
    assert (r.acc, r.acc_a, r.acc_b, r.n_a, r.n_b) == (100.0, 100.0, None, len(task.test), 0)
    student = run_method("finetune", [task], tiny_config()).student
    s = teacher_split_analysis(student, oracle, task)
    assert s.acc_b is None
    assert s.acc == pytest.approx(s.weighted(), abs=1e-9)


@pytest.mark.parametrize("flags", [[1, 1, 0, 0, 1], [0, 0, 0], [1, 0, 1, 1]])
def test_split_weighted_identity(flags):
    # groups are built from synthetic per-question outcomes
    s_ok = [1, 0, 1, 0, 1][:len(flags)]
    a = [s for s, t in zip(s_ok, flags) if t]
    b = [s for s, t in zip(s_ok, flags) if not t]
    r = SplitResult(100 * np.mean(s_ok), 100 * np.mean(a) if a else None,
                    100 * np.mean(b) if b else None, len(a), len(b))
    assert r.acc == pytest.approx(r.weighted(), abs=1e-9)


def test_curve_boundaries_match_report_metadata():
    recs = [MetricRecord(e, "x", "x", "exact_match", 50.0) for e in (1, 2)]
    rep = RunReport("lamol", ("x",), 0, 2, {"x": "exact_match"}, recs)
    assert [r["boundary"] for r in learning_curves(rep)["x"]] == [0, 0]
