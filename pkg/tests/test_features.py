import datetime as dt

import numpy as np
import pandas as pd
import pytest

from shiftwell.errors import DataError, MissingSurvey, UnknownParticipant
from shiftwell.features import (ParticipantHistory, SleepRecord, SurveyDay, build_daily_vector,
                                build_feature_table, feature_columns, histories_from_frames,
                                read_feature_table)
from shiftwell.io import write_csv
from shiftwell.schema import SCHEMA
from shiftwell.timeseries import MinuteStream

DAY = dt.date(2024, 3, 8)


def _history(role="doctor", with_steps=True, overwork=200.0, shift="shift1"):
    rng = np.random.default_rng(0)
    h = ParticipantHistory("D01", role)
    for k in range(8):
        d = DAY - dt.timedelta(days=7 - k)
        awake = np.arange(420, 1380)
        h.hr[d] = MinuteStream("D01", d, awake, 70 + rng.normal(0, 5, len(awake)))
        if with_steps or d != DAY:
            vals = np.where(rng.uniform(size=len(awake)) < 0.3, rng.integers(1, 40, len(awake)), 0)
            h.steps[d] = MinuteStream("D01", d, awake, vals.astype(float), "steps")
        # asleep from 23:00 on d to 07:00 on d + 1
        h.sleep.append(SleepRecord("D01", d, 1380, 1860, 450.0, 94.0))
        h.survey[d] = SurveyDay("D01", d, time_to_fall_asleep_bin=1, wake_type="alarm",
                                nap_count=0, nap_duration_min=0, work_shift=shift,
                                work_duration_hr=8, overwork_min=overwork, caffeine_cups=1,
                                alcohol_or_drug=0)
    return h


def test_full_day_has_no_missing_entries():
    v = build_daily_vector(_history(), DAY)
    assert len(v.values) == 40 == len(SCHEMA)
    assert not v.missing.any()
    f = v.as_dict()
    assert f["overwork"] == 200.0
    assert f["work_shift1"] == 1.0 and f["work_shift2"] == 0.0
    assert f["wake_alarm"] == 1.0
    assert f["sleep_regularity"] == 1.0


def test_day_without_steps_flags_step_features_only():
    v = build_daily_vector(_history(with_steps=False), DAY)
    flagged = {n for n, m in zip(SCHEMA.names, v.missing) if m}
    assert flagged == {"steps_total", "entropy_stationary", "entropy_active"}


def test_day_off_encodes_all_zero_shift_group():
    v = build_daily_vector(_history(shift="none"), DAY).as_dict()
    assert [v["work_shift1"], v["work_shift2"], v["work_shift3"]] == [0.0, 0.0, 0.0]


def test_vector_is_deterministic():
    a = build_daily_vector(_history(), DAY)
    b = build_daily_vector(_history(), DAY)
    assert a.values.tobytes() == b.values.tobytes()


def test_errors():
    with pytest.raises(MissingSurvey):
        build_daily_vector(_history(), DAY + dt.timedelta(days=1))
    with pytest.raises(UnknownParticipant):
        build_daily_vector(_history(role="janitor"), DAY)


def test_bad_survey_values_rejected():
    with pytest.raises(DataError):
        SurveyDay("p", DAY, wake_type="snooze")
    with pytest.raises(DataError):
        SurveyDay("p", DAY, time_to_fall_asleep_bin=6)
    with pytest.raises(DataError):
        SleepRecord("p", DAY, 100, 50, 10.0, 90.0)


def test_bundle_feature_table_shape(bundle):
    table = bundle.features
    assert list(table.columns) == feature_columns()
    assert len(table) == 241
    onehot = table[["work_shift1", "work_shift2", "work_shift3"]].dropna()
    assert set(onehot.sum(axis=1)) <= {0.0, 1.0}


def test_doctor_overwork_reaches_feature(bundle):
    survey = bundle.survey
    row = survey[survey["participant_id"].str.startswith("D")].iloc[0]
    feats = bundle.features
    got = feats[(feats["participant_id"] == row["participant_id"]) & (feats["date"] == row["date"])]
    assert got["overwork"].iloc[0] == row["overwork_min"]


def test_feature_csv_round_trip(bundle, tmp_path):
    path = tmp_path / "features.csv"
    write_csv(bundle.features, path)
    back = read_feature_table(path)
    for name in SCHEMA.names:
        a = bundle.features[name].to_numpy()
        b = back[name].to_numpy()
        assert np.array_equal(a, b, equal_nan=True)


def test_feature_csv_wrong_columns_names_the_column(bundle, tmp_path):
    path = tmp_path / "features.csv"
    write_csv(bundle.features.drop(columns=["hr_sd"]), path)
    with pytest.raises(DataError, match="hr_sd"):
        read_feature_table(path)


def test_unknown_participant_in_raw_tables(bundle):
    frames = dict(bundle.frames())
    frames["participants"] = frames["participants"].iloc[1:]
    with pytest.raises(UnknownParticipant):
        histories_from_frames(frames)


def test_raw_tables_rebuild_identical_features(bundle):
    table = build_feature_table(dict(bundle.frames()))
    pd.testing.assert_frame_equal(table, bundle.features)
