"""Temporal-model ablations on a phantom cohort.

    python3 scripts/ablations.py --out ablations.csv

One stage-1 model is trained (or loaded with --stage1) and frozen. Each stage-2
variant is then trained on the same training sequences. Test subjects are
rolled forward from their first two scans and scored on their later scans, so
every score here is an extrapolation score.
"""
import argparse
import dataclasses

import numpy as np

from vqode4d.config import Stage1Config, Stage2Config
from vqode4d.io import load_tensors, save_tensors, write_csv
from vqode4d.metrics import score_sequence
from vqode4d.phantom import PhantomConfig, generate_cohort
from vqode4d.pipeline import (LatentCache, generate, split_train_test, subject_sequence, train_stage1,
                              train_stage2, training_volumes)
from vqode4d.vqgan import VQGAN3D

VARIANTS = {
    "full": {},
    "no_skip": {"skip_connections": False},
    "ode_convgru": {"encoder": "ode_convgru"},
    "masked_inputs": {"input_mask_ratio": 0.5},
    "uniform_time_weights": {"time_weighting": "uniform"},
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--subjects", type=int, default=30)
    ap.add_argument("--sequences", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--dim", type=int, default=32, help="phantom volume size")
    ap.add_argument("--steps", type=int, default=Stage1Config().steps, help="stage-1 training steps")
    ap.add_argument("--stage1", help="stage-1 state (FFT1) to load instead of training")
    ap.add_argument("--save-stage1", help="where to save the trained stage-1 state")
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="ablations.csv")
    args = ap.parse_args()

    s1cfg = Stage1Config(input_dim=args.dim, steps=args.steps, seed=args.seed)
    cohort = generate_cohort(PhantomConfig(n_subjects=args.subjects, volume_dim=s1cfg.input_dim, seed=args.seed))
    train, test = split_train_test(cohort, seed=args.seed)
    if args.stage1:
        stage1 = VQGAN3D(s1cfg.model_config())
        stage1.load_state_dict(load_tensors(args.stage1))
    else:
        stage1 = train_stage1(training_volumes(train, s1cfg.max_volumes), s1cfg).model
        if args.save_stage1:
            save_tensors(args.save_stage1, stage1.state_dict())
    cache = LatentCache(stage1)
    sequences = [subject_sequence(s, cache) for s in train[: args.sequences]]

    rows = []
    for name in args.variants:
        cfg = dataclasses.replace(Stage2Config(epochs=args.epochs, seed=args.seed), **VARIANTS[name])
        run = train_stage2(sequences, cfg, s1cfg.embed_dim)
        scores = []
        for s in test:
            later = [sc.time for sc in s.scans[2:]]
            preds = generate(stage1, run.model, s.scans[:2], later, cache=cache, subject_id=s.subject_id)
            truth = {sc.time: sc.volume for sc in s.scans[2:]}
            _, splits = score_sequence(preds, truth, [s.scans[0].time, s.scans[1].time], s.scans[0].mask)
            m = splits["extrapolation"].mean
            scores.append([m.mse, m.psnr, m.ssim])
        mse, psnr, ssim = np.mean(scores, axis=0)
        rows.append([name, run.result.best_loss, mse, psnr, ssim])
        print(f"{name}: stage-2 loss {run.result.best_loss:.4f}, extrapolation MSE {mse:.5f} "
              f"PSNR {psnr:.2f} SSIM {ssim:.3f}", flush=True)
    write_csv(args.out, ["variant", "stage2_loss", "mse", "psnr", "ssim"], rows)


if __name__ == "__main__":
    main()
