"""Per-day signal features: sample entropy, activity-segment entropy,
sleep regularity and trailing-window statistics."""

from __future__ import annotations

import datetime as dt
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (DegenerateSeries, EmptyHistogram, InsufficientCoverage,
                     InsufficientData, NoHistory, TooSparse)

MINUTES_PER_DAY = 1440
MIN_HR_MINUTES = 60
MAX_INTERP_GAP = 5
MIN_GRID_COVERAGE = 720

SLEEP, WAKE, MISSING = 1, 0, -1


@dataclass(frozen=True)
class SampleEntropyParams:
    m: int = 2
    r_factor: float = 0.2

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("embedding dimension m must be >= 1")
        if not self.r_factor > 0:
            raise ValueError("r_factor must be positive")


@dataclass
class MinuteStream:
    """Minute-resolution samples for one participant-day."""

    participant_id: str
    date: dt.date
    minutes: np.ndarray
    values: np.ndarray
    kind: str = "heart_rate"

    def __post_init__(self):
        self.minutes = np.asarray(self.minutes, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.kind not in ("heart_rate", "steps"):
            raise ValueError(f"unknown stream kind {self.kind!r}")
        if self.minutes.shape != self.values.shape or self.minutes.ndim != 1:
            raise ValueError("minutes and values must be 1-D and aligned")
        if len(self.minutes) > MINUTES_PER_DAY:
            raise ValueError("more than 1440 samples in one day")
        if len(self.minutes):
            if self.minutes[0] < 0 or self.minutes[-1] >= MINUTES_PER_DAY:
                raise ValueError("minute_of_day outside 0..1439")
            if np.any(np.diff(self.minutes) <= 0):
                raise ValueError("minute_of_day must be strictly increasing")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("stream values must be finite and non-negative")

    def __len__(self):
        return len(self.minutes)


@dataclass
class SegmentHistogram:
    """Counts of segment durations, one bin per distinct duration in minutes."""

    kind: str
    counts: dict[int, int] = field(default_factory=dict)

    @classmethod
    def from_durations(cls, kind: str, durations: Sequence[int]) -> "SegmentHistogram":
        return cls(kind, dict(sorted(Counter(int(d) for d in durations).items())))

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def probabilities(self) -> np.ndarray:
        c = np.array(list(self.counts.values()), dtype=np.float64)
        return c / c.sum()


@dataclass
class SleepMinuteGrid:
    """Seven consecutive days x 1440 minutes of SLEEP / WAKE / MISSING."""

    states: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int8)
        if self.states.shape != (7, MINUTES_PER_DAY):
            raise ValueError(f"grid must be 7 x 1440, got {self.states.shape}")
        if not np.isin(self.states, (SLEEP, WAKE, MISSING)).all():
            raise ValueError("grid states must be SLEEP, WAKE or MISSING")

    @property
    def missing(self) -> np.ndarray:
        return self.states == MISSING


def sample_entropy(x, params: SampleEntropyParams = SampleEntropyParams(),
                   block: int = 512) -> float:
    """Sample entropy with Chebyshev template distance and strict ``< r``.

    ``r`` is ``params.r_factor`` times the sample SD of ``x``. Templates
    of length m and m+1 are both taken from the first ``N - m`` positions
    and self-matches are excluded. When no (m+1)-templates match the
    result is capped at ``log((N-m)(N-m-1))``.
    """
    x = np.asarray(x, dtype=np.float64)
    m = params.m
    n = len(x)
    if n < m + 2:
        raise InsufficientData(f"sample entropy needs at least {m + 2} points, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    sd = float(np.std(x, ddof=1))
    if sd == 0.0:
        raise DegenerateSeries("series has zero variance")
    r = params.r_factor * sd

    nt = n - m
    matches_m = 0
    matches_m1 = 0
    for start in range(0, nt, block):
        rows = np.arange(start, min(start + block, nt))
        close = np.ones((len(rows), nt), dtype=bool)
        for k in range(m):
            close &= np.abs(x[rows + k, None] - x[None, k:k + nt]) < r
        close[np.arange(len(rows)), rows] = False
        matches_m += int(np.count_nonzero(close))
        close &= np.abs(x[rows + m, None] - x[None, m:m + nt]) < r
        matches_m1 += int(np.count_nonzero(close))
    return _sampen_from_counts(matches_m1, matches_m, nt)


def _sampen_from_counts(matches_m1: int, matches_m: int, n_templates: int) -> float:
    if matches_m1 == 0:
        return math.log(n_templates * (n_templates - 1))
    return -math.log(matches_m1 / matches_m)


def interpolate_short_gaps(minutes: np.ndarray, values: np.ndarray,
                           max_gap: int = MAX_INTERP_GAP) -> np.ndarray:
    """Fill gaps of at most ``max_gap`` missing minutes linearly; longer gaps
    are dropped so the surrounding runs are simply concatenated."""
    if len(minutes) < 2:
        return values.astype(np.float64)
    out = [values[:1].astype(np.float64)]
    for i in range(1, len(minutes)):
        gap = minutes[i] - minutes[i - 1] - 1
        if 0 < gap <= max_gap:
            t = np.arange(1, gap + 1) / (gap + 1)
            out.append(values[i - 1] + t * (values[i] - values[i - 1]))
        out.append(values[i:i + 1].astype(np.float64))
    return np.concatenate(out)


def heart_rate_day_features(hr: MinuteStream,
                            params: SampleEntropyParams = SampleEntropyParams()
                            ) -> tuple[float, float, float]:
    """Daily (mean, SD, sample entropy) of heart rate.

    Mean and SD use the present minutes only. Sample entropy runs on the
    gap-interpolated series and is NaN when that series is constant.
    """
    if hr.kind != "heart_rate":
        raise ValueError("expected a heart_rate stream")
    if len(hr) < MIN_HR_MINUTES:
        raise TooSparse(f"{len(hr)} heart-rate minutes present, need {MIN_HR_MINUTES}")
    mean = float(np.mean(hr.values))
    sd = float(np.std(hr.values, ddof=1))
    series = interpolate_short_gaps(hr.minutes, hr.values)
    try:
        sampen = sample_entropy(series, params)
    except DegenerateSeries:
        sampen = math.nan
    return mean, sd, sampen


def _run_lengths(flags: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (values, lengths) of maximal runs in a 1-D array."""
    if len(flags) == 0:
        return flags[:0], np.zeros(0, dtype=np.int64)
    change = np.flatnonzero(flags[1:] != flags[:-1]) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [len(flags)]))
    return flags[starts], ends - starts


def extract_segments(steps: MinuteStream, sleep_mask
                     ) -> tuple[SegmentHistogram, SegmentHistogram]:
    """Histogram stationary (zero-step) and active (positive-step) runs.

    Only awake minutes present in the stream count. Sleep minutes and
    minutes absent from the stream end the current run.
    """
    if steps.kind != "steps":
        raise ValueError("expected a steps stream")
    sleep_mask = np.asarray(sleep_mask, dtype=bool)
    if sleep_mask.shape != (MINUTES_PER_DAY,):
        raise ValueError("sleep mask must have 1440 entries")
    # 0 = excluded, 1 = stationary, 2 = active
    state = np.zeros(MINUTES_PER_DAY, dtype=np.int8)
    state[steps.minutes] = np.where(steps.values > 0, 2, 1)
    state[sleep_mask] = 0
    vals, lengths = _run_lengths(state)
    return (SegmentHistogram.from_durations("stationary", lengths[vals == 1]),
            SegmentHistogram.from_durations("active", lengths[vals == 2]))


def information_entropy(h: SegmentHistogram) -> float:
    """Shannon entropy (natural log) of the histogram's bin probabilities."""
    if h.total == 0:
        raise EmptyHistogram(f"{h.kind} histogram is empty")
    p = h.probabilities()
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def sleep_regularity(grid: SleepMinuteGrid) -> float:
    """Fraction of minutes whose sleep/wake state matches 24 h later.

    Only pairs where both minutes are observed count.
    """
    states = grid.states
    covered = np.count_nonzero(states != MISSING, axis=1) >= MIN_GRID_COVERAGE
    if covered.sum() < 2:
        raise InsufficientCoverage("need two days with at least 720 observed minutes")
    a, b = states[:-1], states[1:]
    both = (a != MISSING) & (b != MISSING)
    n_pairs = int(np.count_nonzero(both))
    if n_pairs == 0:
        raise InsufficientCoverage("no observed minute pairs 24 h apart")
    return int(np.count_nonzero(both & (a == b))) / n_pairs


def rolling_stats(daily_values: Mapping[dt.date, float], target: dt.date,
                  window: int) -> tuple[float, float, int]:
    """Mean and sample SD over the ``window`` calendar days before ``target``.

    Days without a value are skipped; SD is NaN when fewer than two days
    are available.
    """
    if window not in (3, 5, 7):
        raise ValueError(f"window must be 3, 5 or 7, got {window}")
    vals = []
    for lag in range(window, 0, -1):
        v = daily_values.get(target - dt.timedelta(days=lag))
        if v is not None and not math.isnan(v):
            vals.append(v)
    if not vals:
        raise NoHistory(f"no values in the {window} days before {target}")
    arr = np.array(vals, dtype=np.float64)
    sd = float(np.std(arr, ddof=1)) if len(arr) >= 2 else math.nan
    return float(np.mean(arr)), sd, len(arr)
