"""Workflow glue: stage-1 training, latent caching, stage-2 training, generation
and survival-subject assembly.

Subjects are duck-typed: anything with ``subject_id``, ``scans`` (objects with
``time``, ``volume``, ``mask``), ``duration``, ``event`` and ``covariates``
works, so phantom subjects and manifest-loaded subjects are interchangeable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import no_grad
from .config import Stage1Config, Stage2Config
from .io import Manifest
from .optim import adam, adamw
from .phantom import Scan, latent_mask
from .survival import PipelineSubject
from .temporal import (Stage2Result, TemporalModel, TimedLatentSequence, TimeGrid, evaluate_sequence_loss,
                       rollout, stage2_train)
from .vq import QuantizedLatent, code_frequencies, quantize
from .vqgan import Discriminators, StageOneTrainer, VQGAN3D, decode, encode, total_from_terms

LOG_COLUMNS = ("step", "l_rec", "l_codebook", "l_commit", "l_perc", "l_gan_g", "l_gan_d2", "l_gan_d3")


@dataclass
class SubjectData:
    subject_id: str
    scans: list[Scan]
    duration: float | None = None
    event: bool | None = None
    covariates: dict = field(default_factory=dict)


def subjects_from_manifest(manifest: Manifest) -> list[SubjectData]:
    out = []
    for s in manifest.subjects:
        scans = []
        for sc in s.scans:
            vol, mask = manifest.load_scan(sc)
            scans.append(Scan(sc.time_years, vol, mask))
        surv = s.survival or {}
        event = surv.get("event")
        out.append(SubjectData(s.id, scans, surv.get("duration_years"),
                               None if event is None else bool(event), dict(s.covariates)))
    return out


def as_batch(volume) -> np.ndarray:
    v = np.asarray(volume, dtype=np.float32)
    return v.reshape((1, 1, *v.shape))


# ---------------------------------------------------------------- stage 1

def training_volumes(subjects, limit: int) -> list[np.ndarray]:
    """``limit`` scans spread evenly over the cohort's flattened scan list."""
    flat = [sc.volume for s in subjects for sc in s.scans]
    if not flat:
        raise ValueError("no scans to train on")
    idx = np.unique(np.linspace(0, len(flat) - 1, min(limit, len(flat))).round().astype(int))
    return [flat[i] for i in idx]


@dataclass
class Stage1Run:
    model: VQGAN3D
    trainer: StageOneTrainer
    log: list[dict]
    best_total: float
    best_state: dict


def train_stage1(volumes: Sequence[np.ndarray], cfg: Stage1Config,
                 on_step: Callable[[dict, VQGAN3D], None] | None = None) -> Stage1Run:
    """Cycle over ``volumes`` in a seeded order, one pass per epoch.

    The returned model holds the weights at the end of the pass with the lowest
    mean total loss (a trailing partial pass counts too); with zero steps that
    is the initialisation.
    """
    model = VQGAN3D(cfg.model_config(), seed=cfg.seed)
    trainer = StageOneTrainer(model, Discriminators(seed=cfg.seed + 1), cfg.loss_weights(),
                              adam(cfg.lr), adam(cfg.lr), seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    order: list[int] = []
    log = []
    window: list[float] = []
    best, best_state = math.inf, model.state_dict()
    for step in range(cfg.steps):
        batch = []
        for _ in range(cfg.batch_size):
            if not order:
                order = list(rng.permutation(len(volumes)))
            batch.append(as_batch(volumes[order.pop()]))
        terms = trainer.train_step(batch)
        row = {"step": step, **terms}
        log.append(row)
        window.append(total_from_terms(terms, trainer.weights))
        if not order or step == cfg.steps - 1:
            if np.mean(window) < best:
                best, best_state = float(np.mean(window)), model.state_dict()
            window = []
        if on_step:
            on_step(row, model)
    model.load_state_dict(best_state)
    return Stage1Run(model, trainer, log, best, best_state)


# ----------------------------------------------------------- latent cache

class LatentCache:
    """Encodes each (subject, time) once; ``encode_calls`` counts real encoder passes."""

    def __init__(self, model: VQGAN3D):
        self.model = model
        self.encode_calls = 0
        self._store: dict[tuple[str, str], QuantizedLatent] = {}

    def get(self, subject_id: str, scan) -> QuantizedLatent:
        key = (subject_id, f"{scan.time:.2f}")
        if key not in self._store:
            self._store[key] = quantize_volume(scan.volume, self.model)
            self.encode_calls += 1
        return self._store[key]

    def __len__(self):
        return len(self._store)


def quantize_volume(volume, model: VQGAN3D) -> QuantizedLatent:
    with no_grad():
        q, _ = quantize(encode(as_batch(volume), model), model.codebook)
    return q


def decode_latent(z, model: VQGAN3D) -> np.ndarray:
    with no_grad():
        return decode(z, model).data[0, 0]


def subject_sequence(subject, cache: LatentCache, scans=None) -> TimedLatentSequence:
    scans = subject.scans if scans is None else scans
    r = cache.model.config.compression_rate
    return TimedLatentSequence([sc.time for sc in scans],
                               [cache.get(subject.subject_id, sc).embeddings for sc in scans],
                               latent_mask(scans[0].mask, r))


# ---------------------------------------------------------------- stage 2

@dataclass
class Stage2Run:
    model: TemporalModel
    result: Stage2Result
    initial_loss: float


def train_stage2(sequences: Sequence[TimedLatentSequence], cfg: Stage2Config, embed_dim: int,
                 on_epoch: Callable[[int, float], None] | None = None) -> Stage2Run:
    model = TemporalModel(cfg.model_config(embed_dim), seed=cfg.seed)
    initial = evaluate_sequence_loss(sequences, model)
    result = stage2_train(sequences, model, adamw(cfg.lr), epochs=cfg.epochs, seed=cfg.seed, on_epoch=on_epoch)
    return Stage2Run(model, result, initial)


# ------------------------------------------------------------- generation

def output_times(t0: float, t1: float, interval: float, total_duration: float) -> list[float]:
    """Baseline time plus every grid step after it, up to ``t0 + total_duration``."""
    if total_duration < t1 - t0:
        raise ValueError(f"duration {total_duration} ends before the later input scan ({t1 - t0} after baseline)")
    grid = TimeGrid(interval, total_duration, start=t0)
    return [t0] + [round(t, 10) for t in grid.targets]


def generate(stage1: VQGAN3D, temporal: TemporalModel, inputs: Sequence, times: Sequence[float],
             extra_times: Sequence[float] = (), cache: LatentCache | None = None,
             subject_id: str = "subject") -> dict[float, np.ndarray]:
    """Roll the two-or-more input scans forward and decode every requested time.

    ``times`` are the output times; entries equal to the first input time are
    the decoded baseline reconstruction.
    """
    cache = cache or LatentCache(stage1)
    r = stage1.config.compression_rate
    seq = TimedLatentSequence([sc.time for sc in inputs], [cache.get(subject_id, sc).embeddings for sc in inputs],
                              latent_mask(inputs[0].mask, r))
    t0 = seq.times[0]
    wanted = sorted({round(float(t), 10) for t in list(times) + list(extra_times)})
    if any(t < t0 for t in wanted):
        raise ValueError("cannot generate before the first input scan")
    out = {}
    later = [t for t in wanted if t > t0]
    with no_grad():
        if later:
            ro = rollout(seq, later, temporal)
            for t, z in zip(ro.times, ro.latents):
                out[t] = decode_latent(z, stage1)
        if t0 in wanted:
            out[t0] = decode_latent(seq.latents[0], stage1)
    return dict(sorted(out.items()))


# --------------------------------------------------------------- survival

def masked_frequencies(volume, mask, model: VQGAN3D) -> np.ndarray:
    q = quantize_volume(volume, model)
    return code_frequencies(q.indices, model.config.num_codes, latent_mask(mask, model.config.compression_rate))


def survival_subjects(subjects, stage1: VQGAN3D, temporal: TemporalModel | None = None,
                      cache: LatentCache | None = None) -> list[PipelineSubject]:
    """Biomarkers from the 2nd and 3rd scans; with a temporal model, the 3rd scan
    is also generated from the first two and re-encoded."""
    cache = cache or LatentCache(stage1)
    out = []
    for s in subjects:
        if len(s.scans) < 3:
            raise ValueError(f"subject {s.subject_id} has {len(s.scans)} scans; 3 are needed")
        if s.duration is None or s.event is None:
            raise ValueError(f"subject {s.subject_id} has no survival label")
        prev, real = s.scans[1], s.scans[2]
        m = stage1.config.num_codes
        lm = latent_mask(real.mask, stage1.config.compression_rate)
        f_prev = code_frequencies(cache.get(s.subject_id, prev).indices, m, lm)
        f_real = code_frequencies(cache.get(s.subject_id, real).indices, m, lm)
        f_gen = None
        if temporal is not None:
            vol = generate(stage1, temporal, s.scans[:2], [real.time], cache=cache, subject_id=s.subject_id)
            f_gen = masked_frequencies(vol[round(real.time, 10)], real.mask, stage1)
        out.append(PipelineSubject(s.subject_id, float(s.duration), bool(s.event), dict(s.covariates),
                                   f_prev, prev.time, f_real, real.time, f_gen))
    return out


def split_train_test(subjects: Sequence, seed: int = 0, test_fraction: float = 0.5):
    """Seeded split; both halves are guaranteed at least one subject."""
    n = len(subjects)
    if n < 2:
        raise ValueError("need at least two subjects to split")
    perm = np.random.default_rng([seed, 2]).permutation(n)
    n_test = min(n - 1, max(1, int(round(n * test_fraction))))
    test_idx = set(perm[:n_test].tolist())
    train = [s for i, s in enumerate(subjects) if i not in test_idx]
    test = [s for i, s in enumerate(subjects) if i in test_idx]
    return train, test
