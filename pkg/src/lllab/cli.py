"""Command-line runner: ``run``, ``permute`` and ``analyze``.

Configs are flat JSON objects. Any StreamConfig field may appear at top
level, plus ``method`` / ``methods``, ``temperature``, ``tasks`` (``"desk"``
or a list of task specs), ``n_train``/``n_test``/``data_seed`` for the desk
preset, and ``split_analysis``. Every resolved value is echoed into
``resolved-config.json`` so the run can be repeated from that file alone.

Exit codes: 0 ok, 1 runtime failure (state dumped to ``failure.json``),
2 bad config or missing artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import traceback
from pathlib import Path

from . import evaluation
from .distill import LossKind
from .lifelong import METHOD_LOSS, METHODS, DivergenceError, RunReport, StreamConfig, run_method
from .model import LanguageModel
from .presets import DESK_CONFIG, desk_specs, make_tasks
from .taskdata import TaskSpec

log = logging.getLogger("lllab")

LIFELONG = ("finetune", "lamol", "l2kd-word", "l2kd-seq", "l2kd-seqsoft")
STREAM_FIELDS = {f.name: f for f in dataclasses.fields(StreamConfig)}
EXTRA_DEFAULTS = {
    "method": "l2kd-word",
    "methods": list(LIFELONG),
    "temperature": DESK_CONFIG.loss_kind.temperature,
    "tasks": "desk",
    "n_train": 1000,
    "n_test": 100,
    "data_seed": 0,
    "split_analysis": False,
}


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _check_type(name: str, value, expected) -> None:
    ok = {
        int: lambda v: isinstance(v, int) and not isinstance(v, bool),
        float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        bool: lambda v: isinstance(v, bool),
        str: lambda v: isinstance(v, str),
    }[expected](value)
    if not ok:
        raise ConfigError(name, f"expected {expected.__name__}, got {type(value).__name__}")


def resolve_config(raw: dict) -> dict:
    """Fill defaults and validate; raises ConfigError naming the bad field."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    base = {k: v for k, v in DESK_CONFIG.to_dict().items() if k != "loss_kind"}
    cfg = {**base, **EXTRA_DEFAULTS}
    for key, value in raw.items():
        if key == "loss_kind":
            continue
        if key not in cfg:
            raise ConfigError(key, "unknown field")
        cfg[key] = value

    for name, default in base.items():
        if name == "order":
            if not isinstance(cfg[name], list) or not all(isinstance(x, str) for x in cfg[name]):
                raise ConfigError(name, "expected a list of task ids")
            continue
        _check_type(name, cfg[name], type(default))
        if isinstance(default, float):
            cfg[name] = float(cfg[name])
    for name in ("temperature",):
        _check_type(name, cfg[name], float)
        cfg[name] = float(cfg[name])
    for name in ("n_train", "n_test", "data_seed"):
        _check_type(name, cfg[name], int)
    _check_type("split_analysis", cfg["split_analysis"], bool)
    _check_type("method", cfg["method"], str)

    positive = ("epochs_per_task", "batch_size", "n_layers", "n_heads", "d_model", "context_len",
                "top_k", "max_gen_len", "n_train", "n_test")
    for name in positive:
        if cfg[name] < 1:
            raise ConfigError(name, "must be >= 1")
    for name in ("gamma", "lr", "weight_decay", "warmup_ratio", "max_grad_norm", "lm_weight"):
        if cfg[name] < 0:
            raise ConfigError(name, "must be >= 0")
    if cfg["temperature"] <= 0:
        raise ConfigError("temperature", "must be > 0")
    if cfg["adam_epsilon"] <= 0:
        raise ConfigError("adam_epsilon", "must be > 0")
    if cfg["d_model"] % cfg["n_heads"]:
        raise ConfigError("d_model", f"{cfg['d_model']} not divisible by n_heads={cfg['n_heads']}")
    if cfg["method"] not in METHODS:
        raise ConfigError("method", f"unknown method {cfg['method']!r}; choose from {list(METHODS)}")
    if not isinstance(cfg["methods"], list) or not cfg["methods"]:
        raise ConfigError("methods", "expected a non-empty list")
    for m in cfg["methods"]:
        if m not in METHODS:
            raise ConfigError("methods", f"unknown method {m!r}")
    if "loss_kind" in raw:
        want = METHOD_LOSS.get(cfg["method"], "NLL")
        given = raw["loss_kind"]
        if given != want:
            raise ConfigError("loss_kind", f"method {cfg['method']} uses {want}, config says {given}")
    cfg["loss_kind"] = METHOD_LOSS.get(cfg["method"], "NLL")

    if cfg["tasks"] == "desk":
        specs = desk_specs(cfg["n_train"], cfg["n_test"], cfg["data_seed"])
    elif isinstance(cfg["tasks"], list) and cfg["tasks"]:
        try:
            specs = [TaskSpec.from_dict(d) for d in cfg["tasks"]]
        except (TypeError, ValueError) as exc:
            raise ConfigError("tasks", str(exc)) from None
    else:
        raise ConfigError("tasks", "expected \"desk\" or a non-empty list of task specs")
    ids = [s.task_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError("tasks", f"duplicate task ids {ids}")
    cfg["tasks"] = [s.to_dict() for s in specs]
    if not cfg["order"] or (not raw.get("order") and raw.get("tasks") not in (None, "desk")):
        cfg["order"] = ids
    unknown = [t for t in cfg["order"] if t not in ids]
    if unknown:
        raise ConfigError("order", f"unknown task ids {unknown}")
    longest = max(s.max_encoded_len() for s in specs)
    if cfg["context_len"] < longest:
        raise ConfigError("context_len", f"{cfg['context_len']} < longest encoded sample {longest}")
    if cfg["split_analysis"]:
        cfg["retain_teachers"] = True
    return cfg


def stream_config(cfg: dict) -> StreamConfig:
    kw = {k: cfg[k] for k in STREAM_FIELDS if k != "loss_kind"}
    kw["order"] = tuple(cfg["order"])
    return StreamConfig(loss_kind=LossKind(cfg["loss_kind"], cfg["temperature"]), **kw)


def load_config(path: str | Path, seed: int | None = None) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("<file>", f"{path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    if seed is not None:
        raw = {**raw, "seed": seed}
    return resolve_config(raw)


def _tasks(cfg: dict):
    return make_tasks([TaskSpec.from_dict(d) for d in cfg["tasks"]])


def _dump_failure(out: Path, cfg: dict, exc: BaseException) -> Path:
    state = {"error": type(exc).__name__, "message": str(exc),
             "traceback": traceback.format_exc(), "config": cfg}
    if isinstance(exc, DivergenceError):
        state.update(step=exc.step, phase=exc.phase)
    path = out / "failure.json"
    path.write_text(json.dumps(state, indent=1, sort_keys=True))
    return path


def _prepare(args, cmd: str):
    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved-config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))
    log.info("%s: config resolved into %s", cmd, out / "resolved-config.json")
    return cfg, out


def cmd_run(args) -> int:
    cfg, out = _prepare(args, "run")
    try:
        report = run_method(cfg["method"], _tasks(cfg), stream_config(cfg), out_dir=out)
    except Exception as exc:  # noqa: BLE001 - every training failure maps to exit 1
        path = _dump_failure(out, cfg, exc)
        log.error("run failed: %s (state in %s)", exc, path)
        return 1
    stem = evaluation.run_stem(cfg["method"], cfg["order"], cfg["seed"])
    jp, cp = report.write(out, stem)
    log.info("wrote %s and %s; final scores %s", jp, cp, report.final_scores())
    return 0


def cmd_permute(args) -> int:
    cfg, out = _prepare(args, "permute")
    try:
        report = evaluation.permutation_harness(_tasks(cfg), stream_config(cfg), cfg["methods"],
                                                out_dir=out, jobs=args.jobs)
    except Exception as exc:  # noqa: BLE001
        path = _dump_failure(out, cfg, exc)
        log.error("permute failed: %s (state in %s)", exc, path)
        return 1
    sys.stderr.write(report.table_csv())
    return 0


def _find_report(run_dir: Path) -> Path | None:
    skip = {"resolved-config.json", "failure.json", "completed.json", "permutation_report.json"}
    found = sorted(p for p in run_dir.glob("*.json") if p.name not in skip)
    return found[0] if len(found) == 1 else None


def cmd_analyze(args) -> int:
    run_dir = Path(args.dir)
    out = Path(args.out) if args.out else run_dir / "analysis"
    missing = []
    cfg_path = run_dir / "resolved-config.json"
    if not cfg_path.exists():
        missing.append(str(cfg_path))
    report_path = _find_report(run_dir) if run_dir.is_dir() else None
    if report_path is None:
        missing.append(f"{run_dir}/<method>_<order>_<seed>.json (exactly one run report)")
    if missing:
        sys.stderr.write("missing artifacts:\n" + "".join(f"  {m}\n" for m in missing))
        return 2
    cfg = json.loads(cfg_path.read_text())
    report = RunReport.from_dict(json.loads(report_path.read_text()))
    ckpt = run_dir / "checkpoints"
    want_split = cfg.get("split_analysis", False)
    if want_split:
        needed = [ckpt / "student_final"] + [ckpt / f"teacher_{t}" for t in report.order]
        absent = [str(p) + ".json" for p in needed if not (p.with_suffix(".json")).exists()]
        if absent:
            sys.stderr.write("missing artifacts:\n" + "".join(f"  {m}\n" for m in absent))
            return 2
    out.mkdir(parents=True, exist_ok=True)
    try:
        curves = evaluation.learning_curves(report)
    except ValueError as exc:
        sys.stderr.write(f"missing artifacts: {exc}\n")
        return 2
    for task, rows in curves.items():
        (out / f"curve_{task}.csv").write_text(evaluation.curves_csv(rows))
    if want_split:
        tasks = {t.task_id: t for t in _tasks(cfg)}
        student, _ = LanguageModel.load(ckpt / "student_final")
        for task_id in report.order:
            teacher, _ = LanguageModel.load(ckpt / f"teacher_{task_id}")
            rows = {"student": evaluation.teacher_split_analysis(student, teacher, tasks[task_id]),
                    "teacher": evaluation.teacher_split_analysis(teacher, teacher, tasks[task_id])}
            (out / f"split_{task_id}.csv").write_text(evaluation.split_table_csv(task_id, rows))
    log.info("analysis written to %s", out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lllab", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (default: runs/<command>)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for permute")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run", "permute"):
        s = sub.add_parser(name)
        s.add_argument("config")
    s = sub.add_parser("analyze")
    s.add_argument("dir")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.jobs < 1:
        sys.stderr.write("--jobs: must be >= 1\n")
        return 2
    if args.command != "analyze" and args.out is None:
        args.out = str(Path("runs") / args.command)
    try:
        return {"run": cmd_run, "permute": cmd_permute, "analyze": cmd_analyze}[args.command](args)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
