"""Synthetic shift-worker cohort with a planted next-day wellbeing signal.

The generator writes the same raw tables the feature pipeline ingests
(minute heart rate and steps, sleep episodes, daily surveys) and then
derives next-day labels from the features the pipeline itself computes:

1. Daily targets (heart-rate mean, step totals, sleep, overwork, shift)
   are drawn per role. Heart-rate means and step totals are affinely
   matched to the role targets over the survey days.
2. Minute streams are synthesised around those targets.
3. Features are computed with :func:`features.build_feature_table`.
4. A latent wellbeing score ``z`` is a per-role linear combination of
   standardized features plus a participant offset and noise.
5. Each label is a Gaussian copula of ``z`` with a Beta marginal whose
   mean and SD match the role's target, so values never leave [0, 100].

``zero_noise`` removes offsets and noise so every label is a fixed
monotone function of the current day's features.
"""

from __future__ import annotations

import copy
import dataclasses
import datetime as dt
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy import stats as sps
from scipy.signal import lfilter

from .cohort_stats import compare_groups, label_correlation_matrix
from .errors import CalibrationFailure, ConfigError, InfeasibleSpec
from .features import build_feature_table
from .io import write_csv
from .schema import LABELS, ROLES, SHIFTS, TTFA_BINS, WAKE_TYPES
from .timeseries import MINUTES_PER_DAY

PLANTED_FEATURES = ("sleep_regularity", "sleep_efficiency", "work_shift1",
                    "steps_total", "entropy_active")

# usual start of the main sleep episode (minute of the record date) after
# each shift: day shift sleeps late evening, evening shift after midnight,
# night shift sleeps in the morning before going on duty
SLEEP_START = {"shift1": 1380, "shift2": 1530, "shift3": 600}
SLEEP_START_SD = 35.0


def _zero_inflated_exponential(mean: float, sd: float) -> tuple[float, float]:
    """(probability of a nonzero value, mean of the nonzero part) that
    reproduce ``mean`` and ``sd``."""
    if mean <= 0:
        return 0.0, 0.0
    second = sd * sd + mean * mean
    mu = second / (2.0 * mean)
    q = mean / mu
    if not 0 < q <= 1:
        raise InfeasibleSpec(f"overwork mean {mean} / SD {sd} cannot be a zero-inflated exponential")
    return q, mu


@dataclass
class RoleTargets:
    """Per-role calibration targets; mixes are probabilities over levels."""

    n_participants: int
    n_days: int
    hr_mean: float
    hr_mean_sd: float
    sleep_duration: tuple[float, float]
    sleep_efficiency: tuple[float, float]
    steps: tuple[float, float]
    overwork: tuple[float, float]
    work_hours: tuple[float, float]
    shift_mix: tuple[float, float, float]
    wake_mix: tuple[float, float, float]
    ttfa_mix: tuple[float, ...]
    nap_count: float
    caffeine: float
    label_means: dict[str, float]
    label_sds: dict[str, float]
    coefficients: dict[str, float]


def _default_roles() -> dict[str, RoleTargets]:
    return {
        "nurse": RoleTargets(
            n_participants=10, n_days=164, hr_mean=78.5, hr_mean_sd=7.1,
            sleep_duration=(374.3, 134.0), sleep_efficiency=(93.1, 4.9),
            steps=(8931.2, 4030.3), overwork=(11.0, 41.8), work_hours=(8.0, 0.0),
            shift_mix=(53.8, 30.4, 15.7), wake_mix=(35.5, 60.9, 3.6),
            ttfa_mix=(34.0, 31.4, 17.3, 6.6, 3.6, 7.1), nap_count=0.55, caffeine=0.47,
            label_means={"alertness": 38.5, "happiness": 57.2, "energy": 54.0,
                         "health": 63.3, "stress": 63.5},
            label_sds={"alertness": 22.9, "happiness": 20.9, "energy": 22.9,
                       "health": 22.1, "stress": 23.4},
            coefficients={"sleep_regularity": 0.55, "sleep_efficiency": 0.5, "work_shift1": 0.45,
                          "steps_total": -0.35, "entropy_active": -0.3}),
        "doctor": RoleTargets(
            n_participants=4, n_days=77, hr_mean=70.6, hr_mean_sd=6.8,
            sleep_duration=(363.1, 106.3), sleep_efficiency=(95.5, 2.9),
            steps=(8139.9, 3350.8), overwork=(202.6, 320.1), work_hours=(8.4, 1.7),
            shift_mix=(64.3, 19.8, 15.8), wake_mix=(35.6, 46.5, 17.8),
            ttfa_mix=(40.6, 41.6, 11.9, 3.0, 3.0, 0.0), nap_count=0.37, caffeine=0.45,
            label_means={"alertness": 52.8, "happiness": 59.2, "energy": 60.5,
                         "health": 63.9, "stress": 65.6},
            label_sds={"alertness": 23.5, "happiness": 17.1, "energy": 22.4,
                       "health": 22.4, "stress": 17.5},
            coefficients={"sleep_regularity": 0.45, "sleep_efficiency": 0.55, "work_shift1": 0.5,
                          "steps_total": -0.3, "entropy_active": -0.35}),
    }


@dataclass
class CohortSpec:
    """Everything the generator needs. Load overrides with :func:`load_spec`.

    ``loadings`` tie each label to the latent score; with no explicit
    ``label_correlation`` the latent label correlations are
    ``loadings_i * loadings_j``. ``signal_share`` is the share of latent
    variance carried by the features, ``participant_offset_sd`` the SD of a
    per-participant shift of the latent score.
    """

    roles: dict[str, RoleTargets] = field(default_factory=_default_roles)
    loadings: dict[str, float] = field(default_factory=lambda: {
        "alertness": 0.52, "happiness": 0.92, "energy": 0.9, "health": 0.89, "stress": 0.92})
    label_correlation: Optional[list[list[float]]] = None
    signal_share: float = 0.85
    participant_offset_sd: float = 0.2
    zero_noise: bool = False
    warmup_days: int = 2
    start_date: str = "2024-01-08"
    happy_stress_r2: float = 0.70
    alert_r2_band: tuple[float, float] = (0.19, 0.28)

    def validate(self) -> None:
        if set(self.roles) != set(ROLES):
            raise InfeasibleSpec(f"targets are needed for exactly the roles {ROLES}")
        for role, t in self.roles.items():
            if t.n_participants < 1 or t.n_days < t.n_participants:
                raise InfeasibleSpec(f"{role}: need at least one participant and one day each")
            for name, mix, size in (("shift_mix", t.shift_mix, len(SHIFTS)),
                                    ("wake_mix", t.wake_mix, len(WAKE_TYPES)),
                                    ("ttfa_mix", t.ttfa_mix, TTFA_BINS)):
                p = np.asarray(mix, dtype=float)
                if p.shape != (size,) or np.any(p < 0) or p.sum() <= 0:
                    raise InfeasibleSpec(f"{role}.{name} must be {size} non-negative weights")
            for name in ("hr_mean_sd",):
                if getattr(t, name) <= 0:
                    raise InfeasibleSpec(f"{role}.{name} must be positive")
            for name in ("sleep_duration", "sleep_efficiency", "steps", "overwork"):
                if getattr(t, name)[1] < 0:
                    raise InfeasibleSpec(f"{role}.{name} SD must be non-negative")
            _zero_inflated_exponential(*t.overwork)
            for label in LABELS:
                m, s = t.label_means[label] / 100.0, t.label_sds[label] / 100.0
                if not 0 < m < 1 or s <= 0 or s * s >= m * (1 - m):
                    raise InfeasibleSpec(f"{role}.{label}: mean {m * 100} / SD {s * 100} "
                                         "is not attainable on [0, 100]")
            unknown = set(t.coefficients) - set(PLANTED_FEATURES)
            if unknown:
                raise InfeasibleSpec(f"{role}: coefficients for unsupported features {sorted(unknown)}")
        if not 0 < self.signal_share <= 1:
            raise InfeasibleSpec("signal_share must lie in (0, 1]")
        if self.signal_share + self.participant_offset_sd ** 2 > 1:
            raise InfeasibleSpec("signal share plus offset variance exceeds the latent variance")
        if self.warmup_days < 0:
            raise InfeasibleSpec("warmup_days must be non-negative")
        self.residual_covariance()

    def loading_vector(self) -> np.ndarray:
        return np.array([self.loadings[label] for label in LABELS], dtype=float)

    def residual_covariance(self) -> np.ndarray:
        """Covariance of the label-specific noise given the latent score.

        Raises InfeasibleSpec if the target correlation matrix is not
        positive semidefinite or the loadings cannot fit inside it.
        """
        lam = self.loading_vector()
        if np.any(np.abs(lam) > 1):
            raise InfeasibleSpec("loadings must lie in [-1, 1]")
        if self.label_correlation is None:
            return np.diag(1.0 - lam ** 2)
        c = np.asarray(self.label_correlation, dtype=float)
        if c.shape != (len(LABELS), len(LABELS)) or not np.allclose(c, c.T) \
                or not np.allclose(np.diag(c), 1.0):
            raise InfeasibleSpec("label_correlation must be a symmetric 5x5 matrix with unit diagonal")
        if np.linalg.eigvalsh(c).min() < -1e-10:
            raise InfeasibleSpec("label correlation target is not positive semidefinite")
        resid = c - np.outer(lam, lam)
        if np.linalg.eigvalsh(resid).min() < -1e-10:
            raise InfeasibleSpec("loadings are too large for the label correlation target")
        return resid

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSpec":
        """Defaults overridden by ``d``; nested role targets may be partial."""
        spec = cls()
        known = {f.name for f in dataclasses.fields(cls)}
        for key, value in d.items():
            if key not in known:
                raise ConfigError(f"unknown cohort spec key {key!r}")
            if key == "roles":
                for role, overrides in value.items():
                    if role not in spec.roles:
                        raise ConfigError(f"unknown role {role!r} in cohort spec")
                    fields = {f.name for f in dataclasses.fields(RoleTargets)}
                    bad = set(overrides) - fields
                    if bad:
                        raise ConfigError(f"unknown target keys for {role}: {sorted(bad)}")
                    current = spec.roles[role]
                    for k, v in overrides.items():
                        if isinstance(v, dict):
                            v = {**getattr(current, k), **v}
                        elif isinstance(v, list):
                            v = tuple(v)
                        setattr(current, k, v)
            elif key == "loadings":
                spec.loadings = {**spec.loadings, **value}
            elif key == "alert_r2_band":
                spec.alert_r2_band = tuple(value)
            else:
                setattr(spec, key, value)
        spec.validate()
        return spec


def load_spec(path) -> CohortSpec:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read cohort spec ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: cohort spec must be a JSON object")
    return CohortSpec.from_dict(raw)


@dataclass
class PlantedModel:
    """The ground truth linking day-t features to day-(t+1) labels."""

    coefficients: dict[str, dict[str, float]]
    loadings: dict[str, float]
    feature_mean: dict[str, dict[str, float]]
    feature_sd: dict[str, dict[str, float]]
    participant_offsets: dict[str, float]
    signal_share: float
    zero_noise: bool

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for role, coefs in self.coefficients.items():
            for name, value in coefs.items():
                rows.append(("coefficient", role, name, value))
        for label, value in self.loadings.items():
            rows.append(("loading", "all", label, value))
        for pid, value in self.participant_offsets.items():
            rows.append(("participant_offset", pid, "latent", value))
        rows.append(("setting", "all", "signal_share", self.signal_share))
        rows.append(("setting", "all", "zero_noise", float(self.zero_noise)))
        return pd.DataFrame(rows, columns=["kind", "role", "name", "value"])


@dataclass
class CohortBundle:
    spec: CohortSpec
    seed: int
    hr: pd.DataFrame
    steps: pd.DataFrame
    sleep: pd.DataFrame
    survey: pd.DataFrame
    participants: pd.DataFrame
    labels: pd.DataFrame
    features: pd.DataFrame
    planted: Optional[PlantedModel] = None
    latent: Optional[np.ndarray] = None
    clipped_fraction: float = 0.0

    RAW = ("hr", "steps", "sleep", "survey", "participants")

    def frames(self) -> dict[str, pd.DataFrame]:
        return {name: getattr(self, name) for name in self.RAW}


# --- raw stream synthesis ---------------------------------------------------------

def _mix(weights) -> np.ndarray:
    p = np.asarray(weights, dtype=float)
    return p / p.sum()


def _affine_match(values: np.ndarray, ref: np.ndarray, mean: float, sd: float) -> np.ndarray:
    """Map ``values`` affinely so that the ``ref`` subset has exactly the
    given mean and SD (ddof=1)."""
    m, s = ref.mean(), ref.std(ddof=1) if len(ref) > 1 else 0.0
    if s == 0:
        return values - m + mean
    return (values - m) / s * sd + mean


def _split(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i >= parts - extra else 0) for i in range(parts)]


def _geometric_runs(rng: np.random.Generator, n: int, mean_off: float, mean_on: float) -> np.ndarray:
    """Boolean mask of alternating off/on runs with geometric lengths."""
    mask = np.zeros(n, dtype=bool)
    pos = int(rng.integers(0, int(mean_off) + 1))
    while pos < n:
        on = int(rng.geometric(1.0 / mean_on))
        mask[pos:pos + on] = True
        pos += on + int(rng.geometric(1.0 / mean_off))
    return mask


def _participant_days(rng: np.random.Generator, pid: str, t: RoleTargets, n_days: int,
                      warmup: int, start: dt.date) -> dict:
    """Daily plan (shift, sleep, overwork, survey answers) for one person."""
    total = warmup + n_days
    shifts = rng.choice(len(SHIFTS), size=total, p=_mix(t.shift_mix))
    q, mu = _zero_inflated_exponential(*t.overwork)
    over = np.where(rng.random(total) < q, np.round(rng.exponential(mu, total) if mu > 0 else 0.0), 0.0)
    dur_mean, dur_sd = t.sleep_duration
    duration = np.clip(np.round(rng.normal(dur_mean, dur_sd, total)), 90, 900)
    eff_mean, eff_sd = t.sleep_efficiency
    # efficiency is 100 minus a gamma-distributed loss, which keeps it <= 100
    loss_mean = max(100.0 - eff_mean, 1e-3)
    shape = (loss_mean / eff_sd) ** 2 if eff_sd > 0 else 1e6
    efficiency = np.clip(np.round(100.0 - rng.gamma(shape, loss_mean / shape, total)), 50, 100)
    start_min = np.array([SLEEP_START[SHIFTS[s]] for s in shifts], dtype=float)
    start_min = np.clip(np.round(start_min + rng.normal(0, SLEEP_START_SD, total)), 0, 2 * MINUTES_PER_DAY - 1)
    in_bed = np.minimum(np.round(duration / (efficiency / 100.0)), MINUTES_PER_DAY)
    wh_mean, wh_sd = t.work_hours
    work = np.round(np.clip(rng.normal(wh_mean, wh_sd, total), 4.0, 16.0), 1) if wh_sd > 0 \
        else np.full(total, wh_mean)
    return {
        "dates": [start + dt.timedelta(days=i) for i in range(total)],
        "survey_from": warmup,
        "shift": shifts,
        "overwork": over,
        "duration": duration,
        "efficiency": efficiency,
        "start": start_min.astype(int),
        "end": (start_min + in_bed).astype(int),
        "work_hours": work,
        "ttfa": rng.choice(TTFA_BINS, size=total, p=_mix(t.ttfa_mix)),
        "wake": rng.choice(len(WAKE_TYPES), size=total, p=_mix(t.wake_mix)),
        "naps": rng.poisson(t.nap_count, total),
        "nap_min": rng.gamma(2.0, 28.0, total),
        "caffeine": rng.poisson(t.caffeine, total),
        "alc": (rng.random(total) < 0.05).astype(int),
    }


def _sleep_mask(plan: dict, i: int) -> np.ndarray:
    """Minutes of day ``i`` covered by any sleep episode of days i-2..i."""
    mask = np.zeros(MINUTES_PER_DAY, dtype=bool)
    for j in range(max(i - 2, 0), i + 1):
        offset = (j - i) * MINUTES_PER_DAY
        a = max(plan["start"][j] + offset, 0)
        b = min(plan["end"][j] + offset, MINUTES_PER_DAY)
        if a < b:
            mask[a:b] = True
    return mask


def _minute_streams(rng: np.random.Generator, plan: dict, i: int, hr_target: float,
                    steps_target: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(worn minutes, bpm, steps) for one day."""
    n = MINUTES_PER_DAY
    worn = np.ones(n, dtype=bool)
    for _ in range(int(rng.integers(0, 3))):
        a = int(rng.integers(0, n))
        worn[a:a + int(rng.integers(30, 240))] = False
    asleep = _sleep_mask(plan, i)
    awake = worn & ~asleep
    active = _geometric_runs(rng, n, 28.0, 7.0) & awake
    if not active.any() and awake.any():
        active[np.flatnonzero(awake)[0]] = True
    steps = np.zeros(n, dtype=np.int64)
    if active.any():
        w = rng.gamma(2.0, 1.0, int(active.sum()))
        steps[active] = rng.multinomial(steps_target, w / w.sum())

    minute = np.arange(n)
    # AR(1) noise, started from its stationary distribution
    e = rng.normal(0.0, 2.5, n)
    e[0] /= math.sqrt(1 - 0.9 ** 2)
    noise = lfilter([1.0], [1.0, -0.9], e)
    bpm = (4.0 * np.sin(2 * math.pi * (minute - 600) / n) + noise
           - 9.0 * asleep + np.minimum(steps * 0.25, 30.0))
    bpm = bpm[worn]
    bpm = np.round(bpm - bpm.mean() + hr_target)
    idx = np.flatnonzero(worn)
    return idx, bpm, steps[worn]


def _raw_tables(spec: CohortSpec, seed: int) -> tuple[dict[str, pd.DataFrame], dict[str, list[dt.date]]]:
    start = dt.date.fromisoformat(spec.start_date)
    hr_parts, step_parts, sleep_rows, survey_rows, people = [], [], [], [], []
    survey_days: dict[str, list[dt.date]] = {}
    for r_index, role in enumerate(ROLES):
        t = spec.roles[role]
        counts = _split(t.n_days, t.n_participants)
        pids = [f"{role[0].upper()}{k + 1:02d}" for k in range(t.n_participants)]
        plans = []
        for k, (pid, n_days) in enumerate(zip(pids, counts)):
            rng = np.random.default_rng([seed, 0, r_index, k])
            plans.append((pid, rng, _participant_days(rng, pid, t, n_days, spec.warmup_days, start)))
        # daily heart-rate means and step totals, matched on the survey days
        role_rng = np.random.default_rng([seed, 1, r_index])
        hr_raw, steps_raw, on_survey = [], [], []
        for pid, _, plan in plans:
            total = len(plan["dates"])
            person = role_rng.normal(0.0, 0.5)
            hr_raw.append(person + role_rng.normal(0.0, math.sqrt(0.75), total))
            shape = (t.steps[0] / t.steps[1]) ** 2 if t.steps[1] > 0 else 1e6
            steps_raw.append(role_rng.gamma(shape, t.steps[0] / shape, total))
            on_survey.append(np.arange(total) >= plan["survey_from"])
        flat_hr, flat_steps, flat_on = map(np.concatenate, (hr_raw, steps_raw, on_survey))
        hr_all = _affine_match(flat_hr, flat_hr[flat_on], t.hr_mean, t.hr_mean_sd)
        steps_all = np.maximum(np.round(_affine_match(flat_steps, flat_steps[flat_on], *t.steps)), 200)
        pos = 0
        for pid, rng, plan in plans:
            people.append((pid, role))
            days = plan["dates"]
            survey_days[pid] = days[plan["survey_from"]:]
            for i, day in enumerate(days):
                iso = day.isoformat()
                minutes, bpm, steps = _minute_streams(rng, plan, i, hr_all[pos + i],
                                                      int(steps_all[pos + i]))
                hr_parts.append(pd.DataFrame({"participant_id": pid, "date": iso,
                                              "minute": minutes, "bpm": bpm.astype(np.int64)}))
                step_parts.append(pd.DataFrame({"participant_id": pid, "date": iso,
                                                "minute": minutes, "steps": steps}))
                sleep_rows.append((pid, iso, int(plan["start"][i]), int(plan["end"][i]),
                                   int(plan["duration"][i]), int(plan["efficiency"][i])))
                if i >= plan["survey_from"]:
                    survey_rows.append((
                        pid, iso, int(plan["ttfa"][i]), WAKE_TYPES[plan["wake"][i]],
                        int(plan["naps"][i]),
                        float(np.round(plan["nap_min"][i] * plan["naps"][i])),
                        SHIFTS[plan["shift"][i]], float(plan["work_hours"][i]),
                        float(plan["overwork"][i]), int(plan["caffeine"][i]), int(plan["alc"][i])))
            pos += len(days)
    frames = {
        "hr": pd.concat(hr_parts, ignore_index=True),
        "steps": pd.concat(step_parts, ignore_index=True),
        "sleep": pd.DataFrame(sleep_rows, columns=["participant_id", "date", "start_min", "end_min",
                                                   "duration_min", "efficiency"]),
        "survey": pd.DataFrame(survey_rows, columns=["participant_id", "date", "ttfa_bin", "wake_type",
                                                     "nap_count", "nap_min", "shift", "work_hr",
                                                     "overwork_min", "caffeine", "alc_drug"]),
        "participants": pd.DataFrame(people, columns=["participant_id", "role"]),
    }
    return frames, survey_days


# --- labels ---------------------------------------------------------------------------

def beta_parameters(mean: float, sd: float) -> tuple[float, float]:
    """Beta(a, b) on [0, 1] with the given mean and SD."""
    common = mean * (1 - mean) / (sd * sd) - 1
    return mean * common, (1 - mean) * common


def _planted_labels(spec: CohortSpec, seed: int, features: pd.DataFrame,
                    roles: np.ndarray) -> tuple[np.ndarray, np.ndarray, PlantedModel]:
    rng = np.random.default_rng([seed, 2])
    n = len(features)
    z = np.zeros(n)
    fmean: dict[str, dict[str, float]] = {}
    fsd: dict[str, dict[str, float]] = {}
    offsets: dict[str, float] = {}
    pids = features["participant_id"].to_numpy()
    for role in ROLES:
        rows = np.flatnonzero(roles == role)
        coefs = spec.roles[role].coefficients
        fmean[role], fsd[role] = {}, {}
        signal = np.zeros(len(rows))
        for name, beta in coefs.items():
            x = features[name].to_numpy(dtype=float)[rows]
            m = float(np.nanmean(x)) if np.isfinite(x).any() else 0.0
            s = float(np.nanstd(x)) if np.isfinite(x).any() else 0.0
            fmean[role][name], fsd[role][name] = m, s
            std = np.where(np.isfinite(x), (x - m) / s if s > 0 else 0.0, 0.0)
            signal += beta * std
        signal = _standardize(signal)
        if spec.zero_noise:
            latent = signal
        else:
            people = sorted(set(pids[rows]))
            for pid in people:
                offsets[pid] = float(rng.normal(0.0, spec.participant_offset_sd))
            offset = np.array([offsets[p] for p in pids[rows]])
            noise_var = 1.0 - spec.signal_share - spec.participant_offset_sd ** 2
            latent = (math.sqrt(spec.signal_share) * signal + offset
                      + math.sqrt(max(noise_var, 0.0)) * rng.normal(size=len(rows)))
            latent = _standardize(latent)
        z[rows] = latent

    lam = spec.loading_vector()
    if spec.zero_noise:
        u = np.outer(z, np.sign(lam))
    else:
        resid = spec.residual_covariance()
        e = rng.multivariate_normal(np.zeros(len(LABELS)), resid, size=n, method="eigh")
        u = np.outer(z, lam) + e
    p = sps.norm.cdf(u)
    labels = np.empty((n, len(LABELS)))
    for role in ROLES:
        rows = roles == role
        t = spec.roles[role]
        for j, label in enumerate(LABELS):
            a, b = beta_parameters(t.label_means[label] / 100.0, t.label_sds[label] / 100.0)
            labels[rows, j] = 100.0 * sps.beta.ppf(p[rows, j], a, b)
    labels = np.round(labels)
    planted = PlantedModel(
        coefficients={r: dict(spec.roles[r].coefficients) for r in ROLES},
        loadings=dict(spec.loadings), feature_mean=fmean, feature_sd=fsd,
        participant_offsets=offsets, signal_share=1.0 if spec.zero_noise else spec.signal_share,
        zero_noise=spec.zero_noise)
    return labels, z, planted


def _standardize(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else x - x.mean()


def generate(spec: Optional[CohortSpec] = None, seed: int = 0) -> CohortBundle:
    """Generate a cohort. A pure function of ``(spec, seed)``."""
    spec = copy.deepcopy(spec) if spec is not None else CohortSpec()
    spec.validate()
    frames, survey_days = _raw_tables(spec, seed)
    features = build_feature_table(frames)
    role_of = dict(zip(frames["participants"]["participant_id"], frames["participants"]["role"]))
    roles = features["participant_id"].map(role_of).to_numpy()
    values, z, planted = _planted_labels(spec, seed, features, roles)
    clipped = np.clip(values, 0.0, 100.0)
    clipped_fraction = float(np.mean(clipped != values))
    next_day = [(dt.date.fromisoformat(d) + dt.timedelta(days=1)).isoformat() for d in features["date"]]
    labels = pd.DataFrame({"participant_id": features["participant_id"].to_numpy(), "date": next_day})
    for j, label in enumerate(LABELS):
        labels[label] = clipped[:, j].astype(np.int64)
    return CohortBundle(spec=spec, seed=seed, features=features, labels=labels, planted=planted,
                        latent=z, clipped_fraction=clipped_fraction, **frames)


def write_bundle(bundle: CohortBundle, out_dir) -> dict[str, Path]:
    """Write the raw tables, ``labels.csv`` and ``ground_truth.csv``."""
    out = Path(out_dir)
    paths = {}
    tables = dict(bundle.frames())
    tables["labels"] = bundle.labels
    if bundle.planted is not None:
        tables["ground_truth"] = bundle.planted.to_frame()
    for name, df in tables.items():
        paths[name] = out / f"{name}.csv"
        write_csv(df, paths[name])
    return paths


# --- calibration -------------------------------------------------------------------

@dataclass
class CalibrationCheck:
    name: str
    role: str
    target: float
    observed: float
    tolerance: float
    passed: bool


def _check(name, role, target, observed, tol) -> CalibrationCheck:
    ok = bool(np.isfinite(observed) and abs(observed - target) <= tol)
    return CalibrationCheck(name, role, float(target), float(observed), float(tol), ok)


def self_check(bundle: CohortBundle, spec: Optional[CohortSpec] = None,
               raise_on_failure: bool = True) -> list[CalibrationCheck]:
    """Compare the bundle's empirical statistics with the cohort targets.

    Tolerances: heart-rate mean 1 bpm; happy-stress r^2 0.10; alertness
    r^2 band widened by 0.10 on each side; label means and SDs 5 points;
    shift shares 0.15; step and sleep-duration means 10 %; overwork mean
    50 %; under 2 % of labels clipped. Heart-rate mean must also be
    significantly higher for nurses and overwork for doctors.
    """
    spec = spec or bundle.spec
    if bundle.features is None or len(bundle.features) == 0 or len(bundle.labels) == 0:
        raise CalibrationFailure("empty bundle: no feature or label rows to check")
    role_of = dict(zip(bundle.participants["participant_id"], bundle.participants["role"]))
    feats = bundle.features.assign(role=bundle.features["participant_id"].map(role_of))
    if set(feats["role"].dropna()) != set(ROLES):
        raise CalibrationFailure("bundle does not contain both roles")
    labels = bundle.labels.assign(role=bundle.labels["participant_id"].map(role_of))
    survey = bundle.survey.assign(role=bundle.survey["participant_id"].map(role_of))
    checks = []
    for role in ROLES:
        t = spec.roles[role]
        f = feats[feats["role"] == role]
        checks.append(_check("hr_mean", role, t.hr_mean, f["hr_mean"].mean(), 1.0))
        checks.append(_check("steps_total", role, t.steps[0], f["steps_total"].mean(), 0.1 * t.steps[0]))
        checks.append(_check("sleep_duration", role, t.sleep_duration[0], f["sleep_duration"].mean(),
                             0.1 * t.sleep_duration[0]))
        checks.append(_check("overwork", role, t.overwork[0], f["overwork"].mean(),
                             max(0.5 * t.overwork[0], 5.0)))
        s = survey[survey["role"] == role]["shift"]
        for level, p in zip(SHIFTS, _mix(t.shift_mix)):
            checks.append(_check(f"share_{level}", role, p, float((s == level).mean()), 0.15))
        lab = labels[labels["role"] == role]
        for label in LABELS:
            checks.append(_check(f"{label}_mean", role, t.label_means[label], lab[label].mean(), 5.0))
            checks.append(_check(f"{label}_sd", role, t.label_sds[label], lab[label].std(ddof=1), 5.0))
    corr = label_correlation_matrix(bundle.labels[list(LABELS)])
    r2 = corr.r2
    hs = r2[LABELS.index("happiness"), LABELS.index("stress")]
    checks.append(_check("happy_stress_r2", "all", spec.happy_stress_r2, hs, 0.10))
    lo, hi = spec.alert_r2_band
    a = LABELS.index("alertness")
    for j, label in enumerate(LABELS):
        if j == a:
            continue
        mid, half = (lo + hi) / 2, (hi - lo) / 2 + 0.10
        checks.append(_check(f"alertness_{label}_r2", "all", mid, r2[a, j], half))
    checks.append(CalibrationCheck("clipped_fraction", "all", 0.0, bundle.clipped_fraction, 0.02,
                                   bundle.clipped_fraction < 0.02))

    report = compare_groups(feats.drop(columns=[c for c in feats.columns if c.endswith("_missing")]))
    for name, higher in (("hr_mean", "nurse"), ("overwork", "doctor")):
        row = report[report["feature"] == name].iloc[0]
        n_mean = feats.loc[feats["role"] == "nurse", name].mean()
        d_mean = feats.loc[feats["role"] == "doctor", name].mean()
        direction = n_mean > d_mean if higher == "nurse" else d_mean > n_mean
        passed = bool(row["p_value"] < 0.05 and direction)
        checks.append(CalibrationCheck(f"{name}_difference", higher, 0.05, float(row["p_value"]),
                                       0.0, passed))
    failed = [c for c in checks if not c.passed]
    if failed and raise_on_failure:
        detail = "; ".join(f"{c.name}[{c.role}] observed {c.observed:.4g} vs target {c.target:.4g}"
                           f" (tol {c.tolerance:.3g})" for c in failed)
        raise CalibrationFailure(f"{len(failed)} calibration check(s) failed: {detail}")
    return checks


def checks_frame(checks: list[CalibrationCheck]) -> pd.DataFrame:
    return pd.DataFrame([dataclasses.asdict(c) for c in checks])
