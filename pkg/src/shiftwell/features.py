"""Assemble schema-ordered daily feature vectors from raw participant data."""

from __future__ import annotations

import datetime as dt
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .errors import (DataError, EmptyHistogram, InsufficientCoverage, MissingSurvey,
                     NoHistory, TooSparse, UnknownParticipant)
from .io import read_input, read_table
from .schema import (ROLES, ROLLING_WINDOWS, SCHEMA, SHIFT_NONE, SHIFTS, TTFA_BINS,
                     WAKE_TYPES, FeatureSchema)
from .timeseries import (MINUTES_PER_DAY, MISSING, SLEEP, WAKE, MinuteStream,
                         SleepMinuteGrid, extract_segments, heart_rate_day_features,
                         information_entropy, rolling_stats, sleep_regularity)

log = logging.getLogger(__name__)

ONE_DAY = dt.timedelta(days=1)


def parse_date(value) -> dt.date:
    if isinstance(value, dt.date):
        return value
    try:
        return dt.date.fromisoformat(str(value))
    except ValueError as exc:
        raise DataError(f"bad date {value!r}, expected YYYY-MM-DD") from exc


@dataclass
class SleepRecord:
    """One sleep episode. ``start_min``/``end_min`` are minute offsets from
    midnight of ``date``; an episode may run past midnight (end > 1440)."""

    participant_id: str
    date: dt.date
    start_min: int
    end_min: int
    duration_min: float
    efficiency: float

    def __post_init__(self):
        if self.duration_min < 0:
            raise DataError(f"negative sleep duration for {self.participant_id} {self.date}")
        if not 0 <= self.efficiency <= 100:
            raise DataError(f"sleep efficiency {self.efficiency} outside 0-100")
        if not (0 <= self.start_min < 2 * MINUTES_PER_DAY
                and self.start_min < self.end_min <= self.start_min + MINUTES_PER_DAY):
            raise DataError(f"bad sleep interval {self.start_min}-{self.end_min} "
                            f"for {self.participant_id} {self.date}")

    def absolute_interval(self, origin: dt.date) -> tuple[int, int]:
        offset = (self.date - origin).days * MINUTES_PER_DAY
        return offset + self.start_min, offset + self.end_min


@dataclass
class SurveyDay:
    """Daily questionnaire answers; ``None`` marks an unanswered field."""

    participant_id: str
    date: dt.date
    time_to_fall_asleep_bin: Optional[int] = None
    wake_type: Optional[str] = None
    nap_count: Optional[float] = None
    nap_duration_min: Optional[float] = None
    work_shift: Optional[str] = None
    work_duration_hr: Optional[float] = None
    overwork_min: Optional[float] = None
    caffeine_cups: Optional[float] = None
    alcohol_or_drug: Optional[int] = None

    def __post_init__(self):
        if self.time_to_fall_asleep_bin is not None and not 0 <= self.time_to_fall_asleep_bin < TTFA_BINS:
            raise DataError(f"ttfa_bin {self.time_to_fall_asleep_bin} outside 0-5")
        if self.wake_type is not None and self.wake_type not in WAKE_TYPES:
            raise DataError(f"unknown wake_type {self.wake_type!r}")
        if self.work_shift is not None and self.work_shift not in SHIFTS + (SHIFT_NONE,):
            raise DataError(f"unknown shift {self.work_shift!r}")
        if self.alcohol_or_drug is not None and self.alcohol_or_drug not in (0, 1):
            raise DataError(f"alc_drug must be 0 or 1, got {self.alcohol_or_drug}")
        for name in ("nap_count", "nap_duration_min", "work_duration_hr",
                     "overwork_min", "caffeine_cups"):
            v = getattr(self, name)
            if v is not None and (not math.isfinite(v) or v < 0):
                raise DataError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class DailyFeatureVector:
    participant_id: str
    date: dt.date
    role: str
    values: np.ndarray
    missing: np.ndarray
    schema: FeatureSchema = SCHEMA

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.schema.names, self.values))


@dataclass
class ParticipantHistory:
    """Everything recorded for one participant, indexed by date."""

    participant_id: str
    role: str
    hr: dict[dt.date, MinuteStream] = field(default_factory=dict)
    steps: dict[dt.date, MinuteStream] = field(default_factory=dict)
    sleep: list[SleepRecord] = field(default_factory=list)
    survey: dict[dt.date, SurveyDay] = field(default_factory=dict)

    def days(self) -> list[dt.date]:
        return sorted(self.survey)

    def sleep_on(self, day: dt.date) -> list[SleepRecord]:
        return [s for s in self.sleep if s.date == day]

    def day_states(self, day: dt.date) -> np.ndarray:
        """Sleep/wake/missing state of every minute of ``day``.

        A minute is observed if heart rate was recorded (device worn) or it
        falls inside a sleep episode.
        """
        states = np.full(MINUTES_PER_DAY, MISSING, dtype=np.int8)
        hr = self.hr.get(day)
        if hr is not None:
            states[hr.minutes] = WAKE
        for rec in self.sleep:
            lag = (day - rec.date).days
            if not 0 <= lag <= 2:
                continue
            start, end = rec.absolute_interval(day)
            start, end = max(start, 0), min(end, MINUTES_PER_DAY)
            if start < end:
                states[start:end] = SLEEP
        return states

    def sleep_grid(self, day: dt.date) -> SleepMinuteGrid:
        return SleepMinuteGrid(np.stack([self.day_states(day - k * ONE_DAY)
                                         for k in range(6, -1, -1)]))

    def daily_sleep(self) -> tuple[dict[dt.date, float], dict[dt.date, float]]:
        dur: dict[dt.date, float] = {}
        eff_weighted: dict[dt.date, float] = {}
        for rec in self.sleep:
            dur[rec.date] = dur.get(rec.date, 0.0) + rec.duration_min
            eff_weighted[rec.date] = eff_weighted.get(rec.date, 0.0) + rec.efficiency * rec.duration_min
        eff = {}
        for d, total in dur.items():
            if total > 0:
                eff[d] = eff_weighted[d] / total
            else:
                eff[d] = float(np.mean([r.efficiency for r in self.sleep_on(d)]))
        return dur, eff

    def daily_steps(self) -> dict[dt.date, float]:
        return {d: float(s.values.sum()) for d, s in self.steps.items() if len(s)}


def _opt(v, cast=float):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return None
    return cast(v)


def build_daily_vector(history: ParticipantHistory, day: dt.date,
                       schema: FeatureSchema = SCHEMA) -> DailyFeatureVector:
    """Compute the feature vector of ``day``. Entries that cannot be computed
    are NaN with their missing flag set."""
    if history.role not in ROLES:
        raise UnknownParticipant(f"{history.participant_id} has no known role")
    survey = history.survey.get(day)
    if survey is None:
        raise MissingSurvey(f"no survey for {history.participant_id} on {day}")
    f: dict[str, float] = {}

    hr = history.hr.get(day)
    if hr is not None:
        try:
            f["hr_mean"], f["hr_sd"], f["hr_sampen"] = heart_rate_day_features(hr)
        except TooSparse:
            pass

    dur, eff = history.daily_sleep()
    if day in dur:
        f["sleep_duration"] = dur[day]
        f["sleep_efficiency"] = eff[day]
    try:
        f["sleep_regularity"] = sleep_regularity(history.sleep_grid(day))
    except InsufficientCoverage:
        pass
    for w in ROLLING_WINDOWS:
        for key, series in (("sleep_dur", dur), ("sleep_eff", eff)):
            try:
                f[f"{key}_mean_{w}d"], f[f"{key}_sd_{w}d"], _ = rolling_stats(series, day, w)
            except NoHistory:
                pass

    if survey.time_to_fall_asleep_bin is not None:
        f["time_to_fall_asleep_bin"] = float(survey.time_to_fall_asleep_bin)
    if survey.wake_type is not None:
        for w in WAKE_TYPES:
            f[f"wake_{w}"] = float(survey.wake_type == w)
    if survey.nap_count is not None:
        f["nap_count"] = survey.nap_count
    if survey.nap_duration_min is not None:
        f["nap_duration"] = survey.nap_duration_min

    steps = history.steps.get(day)
    if steps is not None and len(steps):
        f["steps_total"] = float(steps.values.sum())
        stationary, active = extract_segments(steps, history.day_states(day) == SLEEP)
        for name, h in (("entropy_stationary", stationary), ("entropy_active", active)):
            try:
                f[name] = information_entropy(h)
            except EmptyHistogram:
                pass
    totals = history.daily_steps()
    for w in ROLLING_WINDOWS:
        try:
            f[f"steps_mean_{w}d"], f[f"steps_sd_{w}d"], _ = rolling_stats(totals, day, w)
        except NoHistory:
            pass

    if survey.work_shift is not None:
        # a day off is observed with every shift indicator at zero
        for s in SHIFTS:
            f[f"work_{s}"] = float(survey.work_shift == s)
    if survey.work_duration_hr is not None:
        f["work_duration"] = survey.work_duration_hr
    if survey.overwork_min is not None:
        f["overwork"] = survey.overwork_min
    if survey.caffeine_cups is not None:
        f["caffeine_cups"] = survey.caffeine_cups
    if survey.alcohol_or_drug is not None:
        f["alcohol_or_drug"] = float(survey.alcohol_or_drug)

    values = np.array([f.get(n, math.nan) for n in schema.names], dtype=np.float64)
    missing = np.isnan(values)
    return DailyFeatureVector(history.participant_id, day, history.role, values, missing, schema)


def _streams(df: pd.DataFrame, value_col: str, kind: str) -> dict[str, dict[dt.date, MinuteStream]]:
    out: dict[str, dict[dt.date, MinuteStream]] = {}
    if df.empty:
        return out
    df = df.sort_values(["participant_id", "date", "minute"], kind="stable")
    for (pid, day), g in df.groupby(["participant_id", "date"], sort=False):
        d = parse_date(day)
        try:
            out.setdefault(pid, {})[d] = MinuteStream(pid, d, g["minute"].to_numpy(),
                                                      g[value_col].to_numpy(dtype=np.float64), kind)
        except ValueError as exc:
            raise DataError(f"{kind} stream {pid} {day}: {exc}") from exc
    return out


def histories_from_frames(frames: dict[str, pd.DataFrame]) -> dict[str, ParticipantHistory]:
    """Group raw input tables into per-participant histories."""
    roles = {}
    for pid, role in zip(frames["participants"]["participant_id"], frames["participants"]["role"]):
        if role not in ROLES:
            raise DataError(f"participants.csv: unknown role {role!r} for {pid}")
        roles[pid] = role
    hist = {pid: ParticipantHistory(pid, role) for pid, role in roles.items()}

    def owner(pid, source):
        if pid not in hist:
            raise UnknownParticipant(f"{source}: participant {pid!r} not in participants.csv")
        return hist[pid]

    for pid, days in _streams(frames["hr"], "bpm", "heart_rate").items():
        owner(pid, "hr.csv").hr = days
    for pid, days in _streams(frames["steps"], "steps", "steps").items():
        owner(pid, "steps.csv").steps = days
    for row in frames["sleep"].itertuples(index=False):
        owner(row.participant_id, "sleep.csv").sleep.append(SleepRecord(
            row.participant_id, parse_date(row.date), int(row.start_min), int(row.end_min),
            float(row.duration_min), float(row.efficiency)))
    for row in frames["survey"].itertuples(index=False):
        owner(row.participant_id, "survey.csv").survey[parse_date(row.date)] = SurveyDay(
            row.participant_id, parse_date(row.date),
            time_to_fall_asleep_bin=_opt(row.ttfa_bin, int),
            wake_type=_opt(row.wake_type, str),
            nap_count=_opt(row.nap_count),
            nap_duration_min=_opt(row.nap_min),
            work_shift=_opt(row.shift, str),
            work_duration_hr=_opt(row.work_hr),
            overwork_min=_opt(row.overwork_min),
            caffeine_cups=_opt(row.caffeine),
            alcohol_or_drug=_opt(row.alc_drug, int),
        )
    return hist


def feature_columns(schema: FeatureSchema = SCHEMA) -> list[str]:
    return ["participant_id", "date", *schema.names, *(f"{n}_missing" for n in schema.names)]


def vectors_to_frame(vectors: list[DailyFeatureVector], schema: FeatureSchema = SCHEMA) -> pd.DataFrame:
    data = {
        "participant_id": [v.participant_id for v in vectors],
        "date": [v.date.isoformat() for v in vectors],
    }
    values = np.array([v.values for v in vectors]).reshape(len(vectors), len(schema))
    missing = np.array([v.missing for v in vectors]).reshape(len(vectors), len(schema))
    for j, name in enumerate(schema.names):
        data[name] = values[:, j]
    for j, name in enumerate(schema.names):
        data[f"{name}_missing"] = missing[:, j].astype(np.int64)
    return pd.DataFrame(data, columns=feature_columns(schema))


def build_feature_table(frames: dict[str, pd.DataFrame], schema: FeatureSchema = SCHEMA) -> pd.DataFrame:
    """Feature rows for every participant-day that has a survey."""
    vectors = []
    for pid, history in histories_from_frames(frames).items():
        for day in history.days():
            vectors.append(build_daily_vector(history, day, schema))
    return vectors_to_frame(vectors, schema)


def load_raw_frames(directory) -> dict[str, pd.DataFrame]:
    return {name: read_input(directory, name)
            for name in ("hr", "steps", "sleep", "survey", "participants")}


def read_feature_table(path, schema: FeatureSchema = SCHEMA) -> pd.DataFrame:
    df = read_table(path, feature_columns(schema), exact=True)
    for name in schema.names:
        if not pd.api.types.is_numeric_dtype(df[name]):
            raise DataError(f"{path}: column {name!r} is not numeric")
        flagged = df[f"{name}_missing"].astype(bool)
        df.loc[flagged, name] = np.nan
    return df
