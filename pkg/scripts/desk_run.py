"""Train and evaluate the dual model on the synthetic desk corpus for a few seeds.

    python3 scripts/desk_run.py --seeds 0 1 2 --out runs/desk
"""
import argparse
import time
from pathlib import Path

from rstpm.evaluate import write_report_csv
from rstpm.pipeline import RunConfig, run_desk


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--epochs", type=int, default=RunConfig.epochs)
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for seed in args.seeds:
        t0 = time.perf_counter()
        run = run_desk(RunConfig(seed=seed, epochs=args.epochs))
        rep = run.reports[0]
        rep.tags["seed"] = str(seed)
        reports.append(rep)
        for key, losses in run.loss_reports.items():
            for pair, r in losses.items():
                r.write_csv(out / f"loss_seed{seed}_{pair}.csv")
        print(f"seed {seed}: pixel AUC {rep.pixel_auc:.4f}  image AUC {rep.image_auc:.4f}  "
              f"({time.perf_counter() - t0:.0f}s)")
    write_report_csv(reports, out / "desk.csv")


if __name__ == "__main__":
    main()
