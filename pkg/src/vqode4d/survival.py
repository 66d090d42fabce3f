"""Cox proportional hazards (Breslow ties, Newton-Raphson), Wald tests,
Harrell's C-index and the codebook-frequency biomarker pipeline."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SEPARATION_LIMIT = 10.0  # |beta| per standard deviation; beyond this the fit is treated as separated
TOP_K = 5


class SingularInformationError(np.linalg.LinAlgError):
    pass


@dataclass
class SurvivalRecord:
    subject_id: str
    duration: float
    event: bool
    covariates: dict = field(default_factory=dict)
    biomarkers: np.ndarray | None = None

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f"{self.subject_id}: duration must be positive")

    def feature(self, name: str) -> float:
        if name.startswith("code_") and self.biomarkers is not None:
            return float(self.biomarkers[int(name[5:])])
        return float(self.covariates[name])


@dataclass
class CoxModel:
    feature_names: list[str]
    coefficients: np.ndarray  # per unit of the raw feature
    standard_errors: np.ndarray
    log_partial_likelihood: float
    converged: bool
    means: np.ndarray
    scales: np.ndarray
    iterations: int = 0

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.feature_names.index(name)])

    def risk(self, X) -> np.ndarray:
        """Linear predictor for raw feature rows."""
        return np.asarray(X, dtype=np.float64) @ self.coefficients


def _design(records: Sequence[SurvivalRecord], names: Sequence[str]):
    X = np.array([[r.feature(n) for n in names] for r in records], dtype=np.float64).reshape(len(records), len(names))
    T = np.array([r.duration for r in records], dtype=np.float64)
    E = np.array([bool(r.event) for r in records])
    return X, T, E


def _risk_set_sums(T_sorted, w):
    """For rows sorted by descending time, cumulative sums over {j: T_j >= T_i} with ties grouped."""
    cs = np.cumsum(w, axis=0)
    # last index of each tie group in descending order
    last = np.searchsorted(-T_sorted, -T_sorted, side="right") - 1
    return cs[last]


def partial_log_likelihood(beta, X, T, E) -> float:
    """Breslow log partial likelihood."""
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    order = np.argsort(-T, kind="stable")
    Xs, Ts, Es = X[order], T[order], E[order]
    eta = Xs @ beta
    shift = eta.max()
    denom = _risk_set_sums(Ts, np.exp(eta - shift))
    return float((eta[Es] - shift - np.log(denom[Es])).sum())


def _derivatives(beta, Xs, Ts, Es):
    eta = Xs @ beta
    shift = eta.max()
    w = np.exp(eta - shift)
    s0 = _risk_set_sums(Ts, w)
    s1 = _risk_set_sums(Ts, w[:, None] * Xs)
    s2 = _risk_set_sums(Ts, w[:, None, None] * Xs[:, :, None] * Xs[:, None, :])
    mean_x = s1[Es] / s0[Es, None]
    ll = float((eta[Es] - shift - np.log(s0[Es])).sum())
    grad = (Xs[Es] - mean_x).sum(axis=0)
    info = (s2[Es] / s0[Es, None, None] - mean_x[:, :, None] * mean_x[:, None, :]).sum(axis=0)
    return ll, grad, info


def _collinear_names(Z, names):
    bad = []
    kept = np.zeros((Z.shape[0], 0))
    for j, n in enumerate(names):
        trial = np.column_stack([kept, Z[:, j]])
        if np.linalg.matrix_rank(trial, tol=1e-8 * max(1.0, np.abs(trial).max())) < trial.shape[1]:
            bad.append(n)
        else:
            kept = trial
    return bad


def fit_cox_arrays(X, T, E, names: Sequence[str], max_iter: int = 100, tol: float = 1e-8) -> CoxModel:
    X = np.asarray(X, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    E = np.asarray(E, dtype=bool)
    names = list(names)
    if E.sum() == 0:
        raise ValueError("Cox fit needs at least one event, got zero")
    if E.sum() < 2:
        raise ValueError("Cox fit needs at least two events")
    means = X.mean(axis=0)
    scales = X.std(axis=0)
    const = [n for n, s in zip(names, scales) if s <= 1e-12 * max(1.0, abs(means[names.index(n)]))]
    if const:
        raise SingularInformationError(f"constant feature(s): {', '.join(const)}")
    Z = (X - means) / scales
    collinear = _collinear_names(Z, names)
    if collinear:
        raise SingularInformationError(f"collinear feature(s): {', '.join(collinear)}")

    order = np.argsort(-T, kind="stable")
    Zs, Ts, Es = Z[order], T[order], E[order]
    beta = np.zeros(Z.shape[1])
    ll, grad, info = _derivatives(beta, Zs, Ts, Es)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.linalg.norm(grad) < tol:
            converged = True
            break
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            raise SingularInformationError(
                f"singular information matrix; collinear among {', '.join(names)}") from None
        # step halving keeps the likelihood monotone
        scale = 1.0
        while True:
            cand = beta + scale * step
            ll_new, g_new, i_new = _derivatives(cand, Zs, Ts, Es)
            if ll_new >= ll - 1e-12 or scale < 1e-10:
                break
            scale *= 0.5
        beta, ll, grad, info = cand, ll_new, g_new, i_new
        if np.abs(beta).max() > SEPARATION_LIMIT:
            break
    else:
        converged = np.linalg.norm(grad) < tol
    if np.abs(beta).max() > SEPARATION_LIMIT:
        converged = False
    try:
        cov = np.linalg.inv(info)
        se = np.sqrt(np.clip(np.diag(cov), 0, None))
    except np.linalg.LinAlgError:
        se = np.full_like(beta, np.inf)
        converged = False
    if converged and not (se > 0).all():
        converged = False
    return CoxModel(names, beta / scales, se / scales, ll, bool(converged), means, scales, it)


def fit_cox(records: Sequence[SurvivalRecord], feature_names: Sequence[str], **kw) -> CoxModel:
    X, T, E = _design(records, feature_names)
    return fit_cox_arrays(X, T, E, feature_names, **kw)


def normal_sf_two_sided(z: float) -> float:
    return math.erfc(abs(z) / math.sqrt(2.0))


def wald_z(model: CoxModel, feature: str) -> float:
    j = model.feature_names.index(feature)
    return float(model.coefficients[j] / model.standard_errors[j])


def wald_p_value(model: CoxModel, feature: str) -> float:
    if not model.converged:
        raise ValueError("Wald p-value needs a converged model")
    return normal_sf_two_sided(wald_z(model, feature))


def c_index(durations, events, risks) -> float:
    """Harrell's C: over pairs with T_i < T_j and an event at T_i, the share where
    risk_i > risk_j, counting risk ties as one half."""
    T = np.asarray(durations, dtype=np.float64)
    E = np.asarray(events, dtype=bool)
    R = np.asarray(risks, dtype=np.float64)
    perm = E[:, None] & (T[:, None] < T[None, :])
    n = perm.sum()
    if n == 0:
        raise ValueError("no permissible pairs for the C-index")
    conc = (R[:, None] > R[None, :]) & perm
    ties = (R[:, None] == R[None, :]) & perm
    return float((conc.sum() + 0.5 * ties.sum()) / n)


@dataclass
class RankedCandidate:
    code_index: int
    p_value: float
    beta: float
    converged: bool


@dataclass
class BiomarkerRanking:
    ranking: list[RankedCandidate]

    @property
    def selected(self) -> list[RankedCandidate]:
        return self.ranking[:TOP_K]

    @property
    def selected_codes(self) -> list[int]:
        return [c.code_index for c in self.selected]


def select_biomarkers(records: Sequence[SurvivalRecord], covariate_names: Sequence[str],
                      candidate_count: int) -> BiomarkerRanking:
    """One Cox fit per candidate code (plus covariates); rank by the code's Wald p-value."""
    usable, unusable = [], []
    for k in range(candidate_count):
        name = f"code_{k}"
        try:
            m = fit_cox(records, [name, *covariate_names])
        except (SingularInformationError, np.linalg.LinAlgError):
            unusable.append(RankedCandidate(k, float("nan"), float("nan"), False))
            continue
        if m.converged:
            usable.append(RankedCandidate(k, wald_p_value(m, name), m.coef(name), True))
        else:
            unusable.append(RankedCandidate(k, normal_sf_two_sided(wald_z(m, name)), m.coef(name), False))
    if not usable and not unusable:
        raise ValueError("no candidate biomarkers")
    if not usable:
        raise ValueError("no usable candidate biomarker (all constant, collinear or separated)")
    usable.sort(key=lambda c: (c.p_value, c.code_index))
    return BiomarkerRanking(usable + unusable)


def longitudinal_biomarkers(freq_t0, t0: float, freq_t1, t1: float, codes: Sequence[int]) -> np.ndarray:
    """Per-year change of the selected code frequencies."""
    if not t1 > t0:
        raise ValueError(f"second time {t1} must follow first time {t0}")
    f0 = np.asarray(freq_t0, dtype=np.float64)
    f1 = np.asarray(freq_t1, dtype=np.float64)
    return (f1[list(codes)] - f0[list(codes)]) / (t1 - t0)


@dataclass
class PipelineSubject:
    """Biomarkers for one subject: previous scan, real later scan and, for test
    subjects, the generated counterpart of the later scan."""
    subject_id: str
    duration: float
    event: bool
    covariates: dict
    freq_prev: np.ndarray
    t_prev: float
    freq_real: np.ndarray
    t_real: float
    freq_generated: np.ndarray | None = None


@dataclass
class SurvivalReport:
    c_index_real: float
    c_index_generated: float
    c_index_longitudinal_real: float
    c_index_longitudinal_generated: float
    ranking: BiomarkerRanking
    cross_model: CoxModel
    longitudinal_model: CoxModel

    def c_indices(self) -> dict[str, float]:
        return {
            "c_index_real": self.c_index_real,
            "c_index_generated": self.c_index_generated,
            "c_index_longitudinal_real": self.c_index_longitudinal_real,
            "c_index_longitudinal_generated": self.c_index_longitudinal_generated,
        }


def _records(subjects, freqs):
    return [SurvivalRecord(s.subject_id, s.duration, s.event, s.covariates, f) for s, f in zip(subjects, freqs)]


def _fit_usable(records, names: Sequence[str]) -> CoxModel:
    """Fit on ``names`` minus any feature that is constant or collinear on these records."""
    X, T, E = _design(records, names)
    keep = [n for n, s in zip(names, X.std(axis=0)) if s > 1e-12]
    if keep:
        cols = [list(names).index(n) for n in keep]
        Z = (X[:, cols] - X[:, cols].mean(axis=0)) / X[:, cols].std(axis=0)
        dropped = set(_collinear_names(Z, keep))
        keep = [n for n in keep if n not in dropped]
    if not keep:
        raise SingularInformationError(f"no usable feature among {', '.join(names)}")
    return fit_cox(records, keep)


def _risks(model: CoxModel, records):
    X, _, _ = _design(records, model.feature_names)
    return model.risk(X)


def run_pipeline(train: Sequence[PipelineSubject], test: Sequence[PipelineSubject],
                 covariate_names: Sequence[str], num_codes: int) -> SurvivalReport:
    """Select the top codes on training subjects, then score real and generated
    test scans with cross-sectional and one-year-change Cox models."""
    if not any(s.event for s in train):
        raise ValueError("training cohort has no events")
    if any(s.freq_generated is None for s in test):
        raise ValueError("every test subject needs a generated scan")
    train_cross = _records(train, [s.freq_real for s in train])
    ranking = select_biomarkers(train_cross, covariate_names, num_codes)
    codes = ranking.selected_codes
    names = [f"code_{k}" for k in codes] + list(covariate_names)
    cross = _fit_usable(train_cross, names)

    dur = [s.duration for s in test]
    ev = [s.event for s in test]
    ci_real = c_index(dur, ev, _risks(cross, _records(test, [s.freq_real for s in test])))
    ci_gen = c_index(dur, ev, _risks(cross, _records(test, [s.freq_generated for s in test])))

    def slopes(subjects, which):
        out = []
        for s in subjects:
            later = s.freq_real if which == "real" else s.freq_generated
            full = np.zeros(num_codes)
            full[codes] = longitudinal_biomarkers(s.freq_prev, s.t_prev, later, s.t_real, codes)
            out.append(full)
        return out

    train_long = _records(train, slopes(train, "real"))
    long_model = _fit_usable(train_long, names)
    ci_long_real = c_index(dur, ev, _risks(long_model, _records(test, slopes(test, "real"))))
    ci_long_gen = c_index(dur, ev, _risks(long_model, _records(test, slopes(test, "generated"))))
    return SurvivalReport(ci_real, ci_gen, ci_long_real, ci_long_gen, ranking, cross, long_model)


def simulate_cohort(n: int = 200, beta: float = 1.0, censor_fraction: float = 0.2, seed: int = 7):
    """Binary covariate, exponential event times with hazard exp(beta * x); a random
    ``censor_fraction`` of subjects is censored at a uniform time before their event."""
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 2, n).astype(np.float64)
    t_event = rng.exponential(1.0 / np.exp(beta * x))
    censored = rng.random(n) < censor_fraction
    t_obs = np.where(censored, rng.uniform(0.0, 1.0, n) * t_event, t_event)
    return x, np.maximum(t_obs, 1e-9), ~censored
