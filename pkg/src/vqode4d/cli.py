"""``vqode4d`` command line: phantom data, two-stage training, generation,
evaluation, survival analysis and codebook visualisation.

Every subcommand accepts ``--config``, ``--seed``, ``--out`` and ``--threads``.
Failures exit nonzero with one ``vqode4d: error: <Kind>: <message>`` line on
stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, RunConfig, load_config
from .metrics import score_sequence
from .nn import CheckpointError
from .phantom import generate_cohort
from .pipeline import (LOG_COLUMNS, LatentCache, SubjectData, decode_latent, generate, output_times,
                       split_train_test, subject_sequence, subjects_from_manifest, survival_subjects,
                       train_stage1, train_stage2, training_volumes)
from .survival import TOP_K, run_pipeline
from .temporal import TemporalModel
from .toyrun import COVARIATES
from .vq import export_codebook_csv, single_code_latent
from .vqgan import VQGAN3D

STAGE1_PREFIX = "stage1."
STAGE2_PREFIX = "temporal."


class UsageError(ValueError):
    pass


# ------------------------------------------------------------ checkpoints

def save_checkpoint(path, stage1: VQGAN3D, temporal: TemporalModel | None = None) -> None:
    tensors = {STAGE1_PREFIX + k: v for k, v in stage1.state_dict().items()}
    if temporal is not None:
        tensors.update({STAGE2_PREFIX + k: v for k, v in temporal.state_dict().items()})
    io.save_tensors(path, tensors)


def _check_names(tensors, allowed):
    for name in tensors:
        if not name.startswith(allowed):
            raise CheckpointError(f"unknown tensor {name}")


def load_stage1(path, cfg: RunConfig) -> VQGAN3D:
    tensors = io.load_tensors(path)
    _check_names(tensors, (STAGE1_PREFIX, STAGE2_PREFIX))
    model = VQGAN3D(cfg.stage1.model_config(), seed=cfg.stage1.seed)
    model.load_state_dict(tensors, prefix=STAGE1_PREFIX)
    return model


def load_models(path, cfg: RunConfig) -> tuple[VQGAN3D, TemporalModel]:
    stage1 = load_stage1(path, cfg)
    tensors = io.load_tensors(path)
    if not any(k.startswith(STAGE2_PREFIX) for k in tensors):
        raise CheckpointError(f"{path} holds no {STAGE2_PREFIX}* tensors; pass a stage-2 checkpoint")
    temporal = TemporalModel(cfg.stage2.model_config(cfg.stage1.embed_dim), seed=cfg.stage2.seed)
    temporal.load_state_dict(tensors, prefix=STAGE2_PREFIX)
    return stage1, temporal


# --------------------------------------------------------------- commands

def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _subjects(args) -> list[SubjectData]:
    return subjects_from_manifest(io.read_manifest(args.manifest))


def cmd_phantom(args, cfg: RunConfig) -> Path:
    out = _out(args)
    cohort = generate_cohort(cfg.phantom.build(cfg.stage1.r), threads=args.threads)
    entries, rows = [], []
    for s in cohort:
        sub = out / "volumes" / s.subject_id
        sub.mkdir(parents=True, exist_ok=True)
        roi_rel = f"volumes/{s.subject_id}/roi.vol"
        io.write_volume(out / roi_rel, s.scans[0].mask.astype(np.float32))
        scans = []
        for sc in s.scans:
            rel = f"volumes/{s.subject_id}/t{sc.time:.2f}.vol"
            io.write_volume(out / rel, sc.volume)
            scans.append(io.ScanEntry(sc.time, rel, roi_rel))
        entries.append(io.SubjectEntry(s.subject_id, scans, {"duration_years": s.duration, "event": s.event},
                                       dict(s.covariates)))
        rows.append([s.subject_id, s.duration, int(s.event)] + [s.covariates[c] for c in COVARIATES])
    path = out / "manifest.json"
    io.write_manifest(path, io.Manifest(entries, out))
    io.write_csv(out / "cohort.csv", ["subject_id", "duration", "event", *COVARIATES], rows)
    (out / "config.json").write_text(cfg.to_json())
    return path


def cmd_train_stage1(args, cfg: RunConfig) -> Path:
    subjects = _subjects(args)
    out = _out(args)
    vols = training_volumes(subjects, cfg.stage1.max_volumes)
    run = train_stage1(vols, cfg.stage1)
    io.write_csv(out / "stage1_log.csv", list(LOG_COLUMNS), [[r[c] for c in LOG_COLUMNS] for r in run.log])
    path = out / "stage1.fft"
    save_checkpoint(path, run.model)
    return path


def cmd_train_stage2(args, cfg: RunConfig) -> Path:
    subjects = _subjects(args)
    out = _out(args)
    stage1 = load_stage1(args.checkpoint, cfg)
    cache = LatentCache(stage1)
    sequences = [subject_sequence(s, cache) for s in subjects if len(s.scans) >= 2]
    if not sequences:
        raise ValueError("no subject has two or more scans")
    run = train_stage2(sequences, cfg.stage2, cfg.stage1.embed_dim)
    io.write_csv(out / "stage2_log.csv", ["epoch", "loss"], list(enumerate(run.result.epoch_losses)))
    summary = {"initial_loss": run.initial_loss, "best_loss": run.result.best_loss,
               "sequences": len(sequences), "scans_encoded": cache.encode_calls}
    (out / "stage2_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    path = out / "stage2.fft"
    save_checkpoint(path, stage1, run.model)
    return path


def _scan_at(subject, t: float):
    for sc in subject.scans:
        if f"{sc.time:.2f}" == f"{t:.2f}":
            return sc
    raise UsageError(f"subject {subject.subject_id} has no scan at t={t:.2f}; "
                     f"available: {', '.join(f'{sc.time:.2f}' for sc in subject.scans)}")


def cmd_generate(args, cfg: RunConfig) -> Path:
    manifest = io.read_manifest(args.manifest)
    subject = next((s for s in subjects_from_manifest(manifest) if s.subject_id == args.subject), None)
    if subject is None:
        raise UsageError(f"subject {args.subject!r} not in manifest")
    inputs = [_scan_at(subject, t) for t in args.times]
    if inputs[1].time <= inputs[0].time:
        raise UsageError("input times must be increasing")
    interval = args.interval if args.interval is not None else cfg.inference.interval_years
    duration = args.duration if args.duration is not None else cfg.inference.total_duration_years
    times = output_times(inputs[0].time, inputs[1].time, interval, duration)
    extra = [sc.time for sc in subject.scans if sc.time > inputs[0].time] if args.at_scan_times else []
    stage1, temporal = load_models(args.checkpoint, cfg)
    out = _out(args)
    volumes = generate(stage1, temporal, inputs, times, extra, subject_id=subject.subject_id)
    for t, vol in volumes.items():
        io.write_volume(out / f"pred_t{t:.2f}.vol", vol)
    meta = {"subject_id": subject.subject_id, "input_times": [sc.time for sc in inputs],
            "grid": [round(t, 2) for t in times], "outputs": [f"pred_t{t:.2f}.vol" for t in volumes]}
    (out / "generation.json").write_text(json.dumps(meta, indent=2) + "\n")
    return out


def _read_generated(gdir: Path):
    meta = json.loads((gdir / "generation.json").read_text())
    preds = {}
    for name in meta["outputs"]:
        vol, _ = io.read_volume(gdir / name)
        preds[float(name[len("pred_t"):-len(".vol")])] = vol
    return meta, preds


def cmd_evaluate(args, cfg: RunConfig) -> Path:
    manifest = io.read_manifest(args.manifest)
    subjects = {s.subject_id: s for s in subjects_from_manifest(manifest)}
    out = _out(args)
    rows, split_rows = [], {}
    for gdir in args.generated:
        meta, preds = _read_generated(Path(gdir))
        s = subjects.get(meta["subject_id"])
        if s is None:
            raise UsageError(f"{gdir}: subject {meta['subject_id']} not in manifest")
        truth = {sc.time: sc.volume for sc in s.scans}
        try:
            per_time, _ = score_sequence(preds, truth, meta["input_times"], s.scans[0].mask)
        except ValueError as exc:
            raise ValueError(f"{gdir}: {exc}") from None
        for t, split, m in per_time:
            rows.append([s.subject_id, f"{t:.2f}", split, m.mse, m.psnr, m.ssim])
            split_rows.setdefault(split, []).append((m.mse, m.psnr, m.ssim))
    io.write_csv(out / "metrics.csv", ["subject_id", "time", "split", "mse", "psnr", "ssim"], rows)
    summary = [[k, len(v), *np.mean(v, axis=0).tolist()] for k, v in sorted(split_rows.items())]
    io.write_csv(out / "metrics_summary.csv", ["split", "count", "mse", "psnr", "ssim"], summary)
    return out / "metrics.csv"


def cmd_survival(args, cfg: RunConfig) -> Path:
    subjects = [s for s in _subjects(args) if len(s.scans) >= 3]
    if len(subjects) < 4:
        raise ValueError(f"need at least 4 subjects with 3 or more scans, found {len(subjects)}")
    missing = [s.subject_id for s in subjects if s.duration is None or s.event is None]
    if missing:
        raise ValueError(f"subject {missing[0]} has no survival label")
    if not any(s.event for s in subjects):
        raise ValueError("cohort has no observed events")
    stage1, temporal = load_models(args.checkpoint, cfg)
    train, test = split_train_test(subjects, seed=cfg.stage2.seed)
    cache = LatentCache(stage1)
    report = run_pipeline(survival_subjects(train, stage1, None, cache), survival_subjects(test, stage1, temporal, cache),
                          COVARIATES, cfg.stage1.M)
    out = _out(args)
    io.write_csv(out / "survival_cindex.csv", ["metric", "value"], list(report.c_indices().items()))
    ranking = [[i + 1, c.code_index, c.p_value, c.beta] for i, c in enumerate(report.ranking.selected[:TOP_K])]
    io.write_csv(out / "survival_ranking.csv", ["rank", "code_index", "p_value", "beta"], ranking)
    return out / "survival_cindex.csv"


def contact_sheet(stage1: VQGAN3D, columns: int = 8) -> np.ndarray:
    """Mid-axial slice of the decoded single-code latent for every code, tiled row-major."""
    cfg = stage1.config
    tiles = []
    for k in range(cfg.num_codes):
        vol = decode_latent(single_code_latent(k, cfg.latent_shape, stage1.codebook).embeddings, stage1)
        tiles.append(vol[vol.shape[0] // 2])
    h, w = tiles[0].shape
    rows = -(-len(tiles) // columns)
    sheet = np.zeros((rows * (h + 1) - 1, columns * (w + 1) - 1), dtype=np.float32)
    for k, tile in enumerate(tiles):
        r, c = divmod(k, columns)
        sheet[r * (h + 1): r * (h + 1) + h, c * (w + 1): c * (w + 1) + w] = tile
    return sheet


def cmd_visualize_codes(args, cfg: RunConfig) -> Path:
    stage1 = load_stage1(args.checkpoint, cfg)
    out = _out(args)
    path = out / "codes.pgm"
    io.write_pgm(path, contact_sheet(stage1))
    export_codebook_csv(stage1.codebook, out / "codebook.csv")
    return path


COMMANDS = {
    "phantom": cmd_phantom,
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "survival": cmd_survival,
    "visualize-codes": cmd_visualize_codes,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run config JSON (defaults are desk-scale)")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads for per-subject work")

    parser = _Parser(prog="vqode4d", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("phantom", parents=[common], help="write a synthetic cohort and its manifest")
    p = sub.add_parser("train-stage1", parents=[common], help="train the VQ autoencoder")
    p.add_argument("--manifest", required=True)
    p = sub.add_parser("train-stage2", parents=[common], help="train the latent ODE on frozen stage-1 latents")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True, help="stage-1 checkpoint")
    p = sub.add_parser("generate", parents=[common], help="extrapolate a subject from two scans")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True, help="stage-2 checkpoint")
    p.add_argument("--subject", required=True)
    p.add_argument("--times", type=float, nargs=2, required=True, metavar=("T0", "T1"))
    p.add_argument("--interval", type=float)
    p.add_argument("--duration", type=float)
    p.add_argument("--at-scan-times", action="store_true", help="also output at the subject's later scan times")
    p = sub.add_parser("evaluate", parents=[common], help="score generated volumes against the manifest scans")
    p.add_argument("--manifest", required=True)
    p.add_argument("--generated", required=True, nargs="+", help="one or more generate output directories")
    p = sub.add_parser("survival", parents=[common], help="biomarker selection and C-indices")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True, help="stage-2 checkpoint")
    p = sub.add_parser("visualize-codes", parents=[common], help="contact sheet of single-code decodes")
    p.add_argument("--checkpoint", required=True)
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.threads < 1:
        raise ConfigError("--threads", "must be >= 1")
    return cfg


def _error_line(exc: BaseException) -> str:
    msg = " ".join(str(exc).split()) or exc.__class__.__name__
    return f"vqode4d: error: {exc.__class__.__name__}: {msg}"


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _config(args)
        result = COMMANDS[args.command](args, cfg)
    except KeyboardInterrupt:
        print("vqode4d: error: Interrupted: interrupted", file=sys.stderr)
        return 130
    except UsageError as exc:
        print(_error_line(exc), file=sys.stderr)
        return 2
    except Exception as exc:  # one parseable line, no traceback
        print(_error_line(exc), file=sys.stderr)
        return 1
    print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
