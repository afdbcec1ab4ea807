"""Train the reverse -> sort -> copy stream with each lifelong method and
show how much of the first task survives.

    python3 demos/forgetting_stream.py                          # about a CPU-minute per method
    python3 demos/forgetting_stream.py --methods finetune,lamol
"""

import argparse
import time

from lllab.lifelong import run_method
from lllab.presets import desk_config, desk_tasks

METHODS = ("finetune", "lamol", "l2kd-word", "l2kd-seqsoft", "multitask")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--methods", default=",".join(METHODS))
    args = ap.parse_args()

    tasks = desk_tasks()
    cfg = desk_config(seed=args.seed)
    first = cfg.order[0]

    print(f"{'method':14s} {first + ' after it':>14s} {first + ' at end':>12s} {'avg at end':>11s} {'cpu s':>6s}")
    for method in args.methods.split(","):
        t = time.process_time()
        rep = run_method(method, tasks, cfg)
        print(f"{method:14s} {rep.post_task_score(first):14.1f} {rep.final_scores()[first]:12.1f} "
              f"{rep.final_average():11.1f} {time.process_time() - t:6.0f}")
        if rep.teacher_scores:
            print(f"{'':14s} teachers: {rep.teacher_scores}")


if __name__ == "__main__":
    main()
