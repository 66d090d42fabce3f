"""The desk-scale end-to-end run on a phantom cohort.

One stage-1 run, with a snapshot of its metrics partway through, feeds one
stage-2 run on a handful of training sequences and the survival pipeline on
the whole cohort. The acceptance suite and ``scripts/toy_pipeline.py`` both
drive this module.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import spearmanr

from .config import Stage1Config, Stage2Config
from .phantom import PhantomConfig, PhantomSubject, generate_cohort, lesion_volume
from .pipeline import (LatentCache, Stage1Run, Stage2Run, generate, quantize_volume, subject_sequence,
                       survival_subjects, split_train_test, train_stage1, train_stage2, training_volumes)
from .survival import PipelineSubject, SurvivalReport, run_pipeline
from .vq import codebook_usage

COVARIATES = ("age", "sex", "smoking")


@dataclass
class ToyConfig:
    n_subjects: int = 100
    seed: int = 0
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    snapshot_step: int = 200
    n_sequences: int = 10
    future_offsets: tuple[float, ...] = (1.0, 2.0)
    growth_mode: str = "linear"

    def phantom(self) -> PhantomConfig:
        return PhantomConfig(n_subjects=self.n_subjects, volume_dim=self.stage1.input_dim, seed=self.seed,
                             growth_mode=self.growth_mode, compression_rate=self.stage1.r)


@dataclass
class Snapshot:
    """Stage-1 state after ``step`` updates."""
    step: int
    l_rec_initial: float
    l_rec_recent: float  # mean over the last pass through the training volumes
    perplexity: float
    elapsed_s: float


@dataclass
class ToyRun:
    config: ToyConfig
    cohort: list[PhantomSubject]
    train: list[PhantomSubject]
    test: list[PhantomSubject]
    stage1: Stage1Run
    snapshot: Snapshot | None
    stage1_s: float
    sequence_subjects: list[PhantomSubject]
    stage2: Stage2Run
    stage2_s: float
    cache: LatentCache


def _log_default(msg: str) -> None:
    print(msg, flush=True)


def run_toy(cfg: ToyConfig | None = None, log: Callable[[str], None] = _log_default) -> ToyRun:
    cfg = cfg or ToyConfig()
    cohort = generate_cohort(cfg.phantom())
    train, test = split_train_test(cohort, seed=cfg.seed)
    volumes = training_volumes(train, cfg.stage1.max_volumes)
    snap: list[Snapshot] = []
    t_start = time.perf_counter()

    rec: list[float] = []

    def on_step(row, model):
        rec.append(row["l_rec"])
        step = row["step"] + 1
        if step % 50 == 0:
            log(f"stage1 step {step} l_rec {row['l_rec']:.4f}")
        if step == cfg.snapshot_step:
            elapsed = time.perf_counter() - t_start
            codes = [quantize_volume(v, model).indices for v in volumes]
            snap.append(Snapshot(step, rec[0], float(np.mean(rec[-len(volumes):])),
                                 codebook_usage(codes, model.config.num_codes).perplexity, elapsed))

    s1 = train_stage1(volumes, cfg.stage1, on_step=on_step)
    stage1_s = time.perf_counter() - t_start
    log(f"stage1 done in {stage1_s:.0f}s")

    cache = LatentCache(s1.model)
    seq_subjects = train[: cfg.n_sequences]
    sequences = [subject_sequence(s, cache) for s in seq_subjects]
    t2 = time.perf_counter()
    s2 = train_stage2(sequences, cfg.stage2, cfg.stage1.embed_dim,
                      on_epoch=lambda e, loss: log(f"stage2 epoch {e} loss {loss:.4f}") if e % 10 == 0 else None)
    stage2_s = time.perf_counter() - t2
    log(f"stage2 done in {stage2_s:.0f}s")
    return ToyRun(cfg, cohort, train, test, s1, snap[0] if snap else None, stage1_s, seq_subjects, s2, stage2_s,
                  cache)


def extrapolation_rhos(run: ToyRun) -> list[tuple[str, list[int], float]]:
    """Per sequence subject: lesion volumes at the last input time and each future
    offset, and their Spearman correlation with time (nan when constant)."""
    out = []
    for s in run.sequence_subjects:
        last = s.scans[-1].time
        times = [last] + [last + dt for dt in run.config.future_offsets]
        vols = generate(run.stage1.model, run.stage2.model, s.scans, times, cache=run.cache, subject_id=s.subject_id)
        lv = [lesion_volume(v, s.scans[0].mask) for v in vols.values()]
        rho = float("nan") if len(set(lv)) == 1 else float(spearmanr(list(vols), lv).statistic)
        out.append((s.subject_id, lv, rho))
    return out


@dataclass
class SurvivalOutcome:
    report: SurvivalReport
    correlated_codes: list[int]  # |Spearman| > 0.3 between frequency and lesion volume
    code_correlations: np.ndarray


def survival_outcome(run: ToyRun, threshold: float = 0.3) -> SurvivalOutcome:
    model = run.stage1.model
    train = survival_subjects(run.train, model, cache=run.cache)
    test = survival_subjects(run.test, model, run.stage2.model, cache=run.cache)
    report = run_pipeline(train, test, COVARIATES, model.config.num_codes)
    rho = code_lesion_correlations(run.train + run.test, train + test)
    return SurvivalOutcome(report, [int(k) for k in np.flatnonzero(np.abs(np.nan_to_num(rho)) > threshold)], rho)


def code_lesion_correlations(subjects, pipeline_subjects: list[PipelineSubject]) -> np.ndarray:
    """Spearman correlation of each code's frequency with the lesion volume of the same (third) scan."""
    by_id = {p.subject_id: p for p in pipeline_subjects}
    freqs = np.array([by_id[s.subject_id].freq_real for s in subjects])
    lesion = [lesion_volume(s.scans[2].volume, s.scans[2].mask) for s in subjects]
    rho = np.full(freqs.shape[1], np.nan)
    for k in range(freqs.shape[1]):
        if np.ptp(freqs[:, k]) > 0:
            rho[k] = spearmanr(freqs[:, k], lesion).statistic
    return rho


def quick_config(**overrides) -> ToyConfig:
    """A few-minute variant for smoke runs: 16 cubed, short schedules."""
    cfg = ToyConfig(n_subjects=20, stage1=Stage1Config(input_dim=16, base_channels=8, M=32, steps=60),
                    stage2=Stage2Config(epochs=5, hidden_channels=8), snapshot_step=30, n_sequences=4)
    return dataclasses.replace(cfg, **overrides)


__all__ = ["ToyConfig", "ToyRun", "Snapshot", "run_toy", "extrapolation_rhos", "survival_outcome",
           "SurvivalOutcome", "code_lesion_correlations", "quick_config"]
