"""Run every order of a small three-task stream and print the mean/std table.

Desk scale: the 12 runs for two methods take about 8 CPU-minutes; --jobs
spreads them over processes.
Results (per-run JSON/CSV, the table and a resumable manifest) go to --out.
"""

import argparse

from lllab.evaluation import permutation_harness
from lllab.presets import desk_config, desk_tasks


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/demo-permutations")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--methods", default="finetune,lamol")
    args = ap.parse_args()

    tasks = desk_tasks()
    cfg = desk_config()
    report = permutation_harness(tasks, cfg, args.methods.split(","), out_dir=args.out, jobs=args.jobs)
    print(report.table_csv())
    for m in report.scores:
        print(f"{m}: std of per-order averages {report.std_of_average(m):.1f}")


if __name__ == "__main__":
    main()
