"""End-to-end desk run on a phantom cohort: stage 1, stage 2, extrapolation and survival.

    python3 scripts/toy_pipeline.py               # 100 subjects at 32^3, roughly 15 minutes
    python3 scripts/toy_pipeline.py --quick       # 16^3 smoke run, about a minute
"""
import argparse
import json
import math

import numpy as np

from vqode4d.toyrun import ToyConfig, extrapolation_rhos, quick_config, run_toy, survival_outcome


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="write a summary here")
    args = ap.parse_args()
    cfg = quick_config(seed=args.seed) if args.quick else ToyConfig(seed=args.seed)
    run = run_toy(cfg)

    summary = {"stage1_seconds": run.stage1_s, "stage2_seconds": run.stage2_s}
    if run.snapshot:
        s = run.snapshot
        summary["snapshot"] = {"step": s.step, "l_rec_initial": s.l_rec_initial, "l_rec_recent": s.l_rec_recent,
                               "perplexity": s.perplexity, "seconds": s.elapsed_s}
    summary["stage2_initial_loss"] = run.stage2.initial_loss
    summary["stage2_best_loss"] = run.stage2.result.best_loss

    rhos = extrapolation_rhos(run)
    for sid, lv, rho in rhos:
        print(f"{sid} lesion volumes {lv} rho {rho:.3f}")
    summary["extrapolation_mean_rho"] = float(np.mean([0.0 if math.isnan(r) else r for _, _, r in rhos]))

    out = survival_outcome(run)
    summary["c_index"] = out.report.c_indices()
    summary["selected_codes"] = out.report.ranking.selected_codes
    summary["correlated_codes"] = out.correlated_codes
    print(json.dumps(summary, indent=2))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(summary, fh, indent=2)


if __name__ == "__main__":
    main()
