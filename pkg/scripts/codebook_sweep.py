"""Codebook hyperparameter sweep: stage-1 runs over codebook size, compression rate and learning rate.

    python3 scripts/codebook_sweep.py --steps 100 --out sweep.csv

Each row reports the mean reconstruction loss over the final pass through the
training volumes, the codebook perplexity on those volumes and the number of
unused codes.
"""
import argparse
import itertools
import time

import numpy as np

from vqode4d.config import Stage1Config
from vqode4d.io import write_csv
from vqode4d.phantom import PhantomConfig, generate_cohort
from vqode4d.pipeline import quantize_volume, train_stage1, training_volumes
from vqode4d.vq import codebook_usage


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--codes", type=int, nargs="+", default=[16, 64, 256])
    ap.add_argument("--rates", type=int, nargs="+", default=[4])
    ap.add_argument("--lrs", type=float, nargs="+", default=[1e-3, 2e-3])
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="codebook_sweep.csv")
    args = ap.parse_args()

    cohort = generate_cohort(PhantomConfig(n_subjects=10, volume_dim=args.dim, seed=args.seed))
    rows = []
    for m, r, lr in itertools.product(args.codes, args.rates, args.lrs):
        cfg = Stage1Config(M=m, r=r, lr=lr, steps=args.steps, input_dim=args.dim, seed=args.seed)
        vols = training_volumes(cohort, cfg.max_volumes)
        start = time.perf_counter()
        run = train_stage1(vols, cfg)
        usage = codebook_usage([quantize_volume(v, run.model).indices for v in vols], m)
        final = float(np.mean([row["l_rec"] for row in run.log[-len(vols):]]))
        rows.append([m, r, lr, final, usage.perplexity, len(usage.dead_codes), time.perf_counter() - start])
        print(f"M={m} r={r} lr={lr:g}: l_rec {final:.4f}, perplexity {usage.perplexity:.1f}, "
              f"dead {len(usage.dead_codes)}", flush=True)
    write_csv(args.out, ["M", "r", "lr", "l_rec_final", "perplexity", "dead_codes", "seconds"], rows)


if __name__ == "__main__":
    main()
