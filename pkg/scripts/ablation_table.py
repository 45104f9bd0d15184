"""Per-resolution ablation grid (baseline / dual x attention on / off) printed as a table.

    python3 scripts/ablation_table.py --seed 0 --plan desk
"""
import argparse
from pathlib import Path

from rstpm.backbones import DISTILL_LEVELS
from rstpm.evaluate import AblationPlan, write_report_csv
from rstpm.pipeline import RunConfig, run_desk


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--plan", choices=("desk", "full"), default="desk")
    ap.add_argument("--epochs", type=int, default=RunConfig.epochs)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    plan = AblationPlan.desk() if args.plan == "desk" else AblationPlan()
    run = run_desk(RunConfig(seed=args.seed, epochs=args.epochs), plan)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(run.reports, out / "ablation.csv")

    cols = [f"1/{l}" for l in DISTILL_LEVELS] + ["multi"]
    for metric in ("pixel", "image"):
        print(f"\n{metric} AUC")
        print(f"{'mode':32s} {'maps':4s} " + " ".join(f"{c:>6s}" for c in cols))
        for r in run.reports:
            fused = r.pixel_auc if metric == "pixel" else r.image_auc
            variants = ("A", "B", "A+B") if r.tags["fusion"] == "dual" else ("A",)
            for v in variants:
                singles = r.single_resolution(v, metric)
                vals = [singles[l] for l in DISTILL_LEVELS] + [fused]
                print(f"{r.tags['mode']:32s} {v:4s} " + " ".join(f"{x:6.3f}" for x in vals))


if __name__ == "__main__":
    main()
