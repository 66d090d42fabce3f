"""Synthetic 4-D "phantom lung" cohort with growing lesions and survival labels.

Each subject has a fixed two-lobe ellipsoidal ROI, a fixed low-intensity
parenchyma texture and one lesion whose radius grows at the subject's growth
rate. Bright reticular texture fills the lesion. Survival times are
exponential with log-hazard linear in the growth rate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

LUNG_LEVEL = 0.22
BODY_LEVEL = 0.45
LESION_LEVEL = 0.78
LESION_THRESHOLD = 0.55


@dataclass
class PhantomConfig:
    n_subjects: int = 20
    volume_dim: int = 32
    times_per_subject: tuple[int, int] = (3, 4)
    time_jitter: float = 0.15
    growth_rate_range: tuple[float, float] = (0.4, 2.4)  # lesion radius, voxels per year
    noise_sigma: float = 0.02
    seed: int = 0
    growth_mode: str = "linear"  # or "saturating"
    hazard_coef: float = 2.0  # log-hazard per unit growth rate
    base_hazard: float = 0.03
    censor_horizon: float = 6.0
    compression_rate: int = 4

    def __post_init__(self):
        self.times_per_subject = tuple(int(v) for v in self.times_per_subject)
        self.growth_rate_range = tuple(float(v) for v in self.growth_rate_range)
        lo, hi = self.growth_rate_range
        errors = []
        if self.n_subjects < 1:
            errors.append("n_subjects must be >= 1")
        if self.volume_dim % self.compression_rate or self.volume_dim < 8:
            errors.append(f"volume_dim {self.volume_dim} must be >= 8 and divisible by {self.compression_rate}")
        if not 2 <= self.times_per_subject[0] <= self.times_per_subject[1]:
            errors.append("times_per_subject must be a range starting at >= 2")
        if not 0 <= lo <= hi:
            errors.append("growth_rate_range must be non-negative and ordered")
        if not 0 <= self.time_jitter < 0.5:
            errors.append("time_jitter must be in [0, 0.5)")
        if self.noise_sigma < 0:
            errors.append("noise_sigma must be >= 0")
        if self.growth_mode not in ("linear", "saturating"):
            errors.append(f"unknown growth_mode {self.growth_mode!r}")
        if errors:
            raise ValueError("; ".join(errors))


@dataclass
class Scan:
    time: float
    volume: np.ndarray  # float32 [D, H, W] in [0, 1]
    mask: np.ndarray  # bool [D, H, W]


@dataclass
class PhantomSubject:
    subject_id: str
    growth_rate: float
    scans: list[Scan]
    duration: float
    event: bool
    covariates: dict = field(default_factory=dict)
    lesion_radius0: float = 0.0


def value_noise(shape, rng, octaves=3, base_cells=4) -> np.ndarray:
    """Sum of upsampled random lattices, rescaled to [0, 1]."""
    out = np.zeros(shape)
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = base_cells * 2 ** o
        lattice = rng.random((cells + 1,) * 3)
        zoom = [s / (cells + 1) for s in shape]
        out += amp * ndimage.zoom(lattice, zoom, order=1, mode="nearest")[: shape[0], : shape[1], : shape[2]]
        total += amp
        amp *= 0.5
    out /= total
    return (out - out.min()) / max(out.max() - out.min(), 1e-12)


def _grid(n):
    c = (np.arange(n) + 0.5) / n * 2 - 1  # [-1, 1]
    return np.meshgrid(c, c, c, indexing="ij")


def lung_mask(n: int, rng) -> np.ndarray:
    z, y, x = _grid(n)
    jit = rng.uniform(-0.05, 0.05, size=4)
    az, ay, ax = 0.78 + jit[0], 0.62 + jit[1], 0.36 + jit[2]
    cx = 0.42 + jit[3]
    left = (z / az) ** 2 + (y / ay) ** 2 + ((x + cx) / ax) ** 2 <= 1
    right = (z / az) ** 2 + (y / ay) ** 2 + ((x - cx) / ax) ** 2 <= 1
    return left | right


def lesion_radius(r0: float, growth_rate: float, t: float, mode: str, r_max: float) -> float:
    if mode == "linear":
        return r0 + growth_rate * t
    # logistic radius that starts at r0 with initial slope growth_rate and saturates at r_max
    k = growth_rate * r_max / (r0 * (r_max - r0))
    return r_max / (1 + (r_max / r0 - 1) * np.exp(-k * t))


def _subject(i: int, cfg: PhantomConfig) -> PhantomSubject:
    rng = np.random.default_rng([cfg.seed, i])
    n = cfg.volume_dim
    roi = lung_mask(n, rng)
    paren = LUNG_LEVEL + 0.08 * (value_noise((n,) * 3, rng) - 0.5)
    body = BODY_LEVEL + 0.05 * (value_noise((n,) * 3, rng, octaves=2) - 0.5)
    retic = value_noise((n,) * 3, rng, octaves=2, base_cells=n // 4)
    lesion_tex = LESION_LEVEL + 0.16 * (retic - 0.5)
    base = np.where(roi, paren, body)

    # lesion centre: a random ROI voxel away from the border, preferring lower lobes
    zc, yc, xc = _grid(n)
    eroded = ndimage.binary_erosion(roi, iterations=max(1, n // 8))
    cand = np.argwhere(eroded & (zc > -0.2))
    if len(cand) == 0:
        cand = np.argwhere(roi)
    centre = cand[rng.integers(len(cand))]
    idx = np.indices((n,) * 3)
    dist = np.sqrt(sum((idx[k] - centre[k]) ** 2 for k in range(3)))

    lo, hi = cfg.growth_rate_range
    g = float(rng.uniform(lo, hi))
    r0 = float(rng.uniform(1.5, 3.0))
    n_times = int(rng.integers(cfg.times_per_subject[0], cfg.times_per_subject[1] + 1))
    times = [0.0] + [float(round(k + rng.uniform(-cfg.time_jitter, cfg.time_jitter), 2)) for k in range(1, n_times)]
    scans = []
    for t in times:
        r = lesion_radius(r0, g, t, cfg.growth_mode, r_max=n / 3)
        vol = np.where(roi & (dist <= r), lesion_tex, base)
        vol = vol + cfg.noise_sigma * rng.standard_normal(vol.shape)
        scans.append(Scan(t, np.clip(vol, 0, 1).astype(np.float32), roi.copy()))

    hazard = cfg.base_hazard * np.exp(cfg.hazard_coef * g)
    t_event = float(rng.exponential(1.0 / hazard))
    event = t_event <= cfg.censor_horizon
    duration = round(min(t_event, cfg.censor_horizon), 4)
    duration = max(duration, 1e-3)
    covariates = {
        "age": float(round(rng.normal(70, 7), 1)),
        "sex": float(rng.integers(0, 2)),
        "smoking": float(rng.integers(0, 2)),
    }
    return PhantomSubject(f"S{i:04d}", g, scans, duration, bool(event), covariates, r0)


def generate_cohort(cfg: PhantomConfig, threads: int = 1) -> list[PhantomSubject]:
    """Deterministic in ``cfg.seed``; every subject draws from its own derived stream."""
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda i: _subject(i, cfg), range(cfg.n_subjects)))
    return [_subject(i, cfg) for i in range(cfg.n_subjects)]


def lesion_volume(volume, roi_mask, threshold: float = LESION_THRESHOLD) -> int:
    v = np.asarray(volume).reshape(np.shape(roi_mask))
    return int(np.count_nonzero((v > threshold) & np.asarray(roi_mask, dtype=bool)))


def latent_mask(roi_mask, r: int) -> np.ndarray:
    """Max-pool a volume ROI by the compression rate."""
    m = np.asarray(roi_mask, dtype=bool)
    d, h, w = (s // r for s in m.shape)
    return m[: d * r, : h * r, : w * r].reshape(d, r, h, r, w, r).any(axis=(1, 3, 5))
