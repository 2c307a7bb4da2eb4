import json

import numpy as np
import pandas as pd
import pytest

import oracles
from shiftwell.errors import ConfigError, DataError, OutOfRange, ShapeMismatch, TooSmall
from shiftwell.harness import (BASELINE, Preprocessor, discretize, f1_score, fit_model,
                               grid_search, load_grid, load_trained, mae, make_split_plan,
                               run_experiment, save_trained, train_final, validate_grid)
from shiftwell.model import ModelConfig, predict
from shiftwell.schema import SCHEMA

FAST = ModelConfig(epochs=5, patience=3)
SMALL_GRID = [{"learning_rate": 0.005}, {"learning_rate": 0.01}]


# --- label views ----------------------------------------------------------------

def test_discretize_boundaries():
    assert discretize([50, 51, 0, 100], "binary").tolist() == [0, 1, 0, 1]
    assert discretize([33, 34, 66, 67, 0, 100], "three_class").tolist() == [0, 1, 1, 2, 0, 2]
    assert discretize([33.5], "three").tolist() == [1]


def test_discretize_total_on_range_and_errors():
    scores = np.linspace(0, 100, 2001)
    for view, k in (("binary", 2), ("three_class", 3)):
        c = discretize(scores, view)
        assert c.min() == 0 and c.max() == k - 1
        assert np.all(np.diff(c) >= 0)
    with pytest.raises(OutOfRange):
        discretize([101.0], "binary")
    with pytest.raises(OutOfRange):
        discretize([np.nan], "binary")
    with pytest.raises(ConfigError):
        discretize([10.0], "regression")


# --- splits ---------------------------------------------------------------------

def test_split_plan_sizes_and_reproducibility():
    plan = make_split_plan(100, seed=3)
    assert plan.repetitions == 10
    assert all(len(t) == 20 for t in plan.test)
    again = make_split_plan(100, seed=3)
    assert all(np.array_equal(a, b) for a, b in zip(plan.test, again.test))
    other = make_split_plan(100, seed=4)
    assert any(not np.array_equal(a, b) for a, b in zip(plan.test, other.test))


@pytest.mark.parametrize("seed", range(10))
def test_split_plan_partitions(seed):
    plan = make_split_plan(137, seed=seed, n_folds=10)
    for tr, te, folds in zip(plan.train, plan.test, plan.folds):
        assert not set(tr) & set(te)
        assert sorted(set(tr) | set(te)) == list(range(137))
        fold_rows = np.concatenate(folds)
        assert len(folds) == 10
        assert sorted(fold_rows.tolist()) == sorted(tr.tolist())


def test_split_plan_participant_level(dataset):
    plan = make_split_plan(dataset, seed=0, repetitions=3, level="participant")
    for tr, te in zip(plan.train, plan.test):
        assert not set(dataset.participant_id[tr]) & set(dataset.participant_id[te])


def test_split_plan_errors():
    with pytest.raises(TooSmall):
        make_split_plan(19, seed=0)
    with pytest.raises(ConfigError):
        make_split_plan(50, seed=0, level="site")


# --- grid -----------------------------------------------------------------------

def test_grid_validation_and_loading(tmp_path):
    with pytest.raises(ConfigError):
        validate_grid([])
    with pytest.raises(ConfigError):
        validate_grid([{"dropout": 0.5}])
    with pytest.raises(ConfigError):
        validate_grid([{"learning_rate": float("nan")}])
    path = tmp_path / "grid.json"
    path.write_text(json.dumps({"learning_rate": [0.005, 0.01], "focal_gamma": [0, 2]}))
    assert len(load_grid(path)) == 4
    path.write_text("not json")
    with pytest.raises(ConfigError):
        load_grid(path)


def _planted(n=160, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 40))
    roles = np.where(np.arange(n) % 2 == 0, "nurse", "doctor")
    y = np.clip(0.5 + 0.1 * x[:, :1] - 0.08 * x[:, 1:2], 0, 1)
    return x, roles, y


def test_grid_search_single_assignment():
    x, roles, y = _planted(60)
    cfg = FAST.replace(variant="nn", labels=("stress",))
    res = grid_search(x, roles, y, [{"learning_rate": 0.01}], cfg)
    assert res.best_index == 0 and res.assignment == {"learning_rate": 0.01}


def test_grid_search_never_picks_zero_learning_rate():
    x, roles, y = _planted()
    cfg = ModelConfig(variant="nn", labels=("stress",), epochs=30, patience=10)
    folds = [np.arange(k, 160, 4) for k in range(4)]
    res = grid_search(x, roles, y, [{"learning_rate": 0.0}, {"learning_rate": 0.01}], cfg, folds)
    assert res.best_index == 1
    assert res.mean_loss[1] < res.mean_loss[0]


def test_grid_search_tie_goes_to_first_then_smaller(monkeypatch):
    x, roles, y = _planted(60)
    cfg = FAST.replace(variant="nn", labels=("stress",))
    res = grid_search(x, roles, y, [{"learning_rate": 0.01}, {"learning_rate": 0.01}], cfg)
    assert res.mean_loss[0] == res.mean_loss[1] and res.best_index == 0

    from shiftwell import harness
    from shiftwell.model import TrainResult

    def constant_fit(config, *args, **kwargs):
        return None, None, TrainResult(val_loss=[1.0], best_epoch=1)

    monkeypatch.setattr(harness, "fit_model", constant_fit)
    grid = [{"branch_width": 16}, {"branch_width": 8}, {"branch_width": 8}]
    res = grid_search(x, roles, y, grid, cfg)
    assert res.n_parameters[1] < res.n_parameters[0]
    assert res.best_index == 1


# --- metrics --------------------------------------------------------------------

def test_f1_examples():
    macro, prec, rec = f1_score([0, 1, 1, 0], [0, 1, 1, 0], 2)
    assert macro == 1.0 and prec.tolist() == [1.0, 1.0] and rec.tolist() == [1.0, 1.0]
    assert f1_score([1, 1, 1], [1, 1, 1], 2)[0] == 1.0
    # all-low predictions on half-high truth: class 0 has precision 1/2 and
    # recall 1, so its f1 is 2/3; class 1 scores 0, and the macro mean is 1/3
    macro, prec, rec = f1_score([0, 0, 1, 1], [0, 0, 0, 0], 2)
    assert prec[1] == 0.0 and rec[1] == 0.0
    assert macro == pytest.approx(1 / 3, abs=1e-15)


def test_f1_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(30):
        k = int(rng.integers(2, 4))
        t = rng.integers(0, k, 25)
        p = rng.integers(0, k, 25)
        assert f1_score(t, p, k)[0] == pytest.approx(oracles.macro_f1(t, p, k), abs=1e-15)


def test_f1_random_predictor_near_half():
    rng = np.random.default_rng(1)
    t = rng.integers(0, 2, 10_000)
    p = rng.integers(0, 2, 10_000)
    assert abs(f1_score(t, p, 2)[0] - 0.5) <= 0.05


def test_f1_errors():
    with pytest.raises(OutOfRange):
        f1_score([0, 2], [0, 1], 2)
    with pytest.raises(ShapeMismatch):
        f1_score([0, 1], [0], 2)


def test_mae_examples():
    a = np.array([10.0, 20.0, 30.0])
    assert mae(a, a) == 0.0
    assert mae(a, a + 5) == 5.0
    rng = np.random.default_rng(2)
    t, p = rng.uniform(0, 100, 17), rng.uniform(0, 100, 17)
    assert mae(t, p) == pytest.approx(sum(abs(u - v) for u, v in zip(t, p)) / 17, abs=1e-12)
    with pytest.raises(ShapeMismatch):
        mae([1.0], [1.0, 2.0])


# --- preprocessing and leakage --------------------------------------------------

def test_preprocessor_uses_training_rows_only():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(30, 40))
    x[rng.uniform(size=x.shape) < 0.1] = np.nan
    prep = Preprocessor.fit(x[:20])
    polluted = x.copy()
    polluted[20:] = 1e6
    again = Preprocessor.fit(polluted[:20])
    for a, b in zip((prep.fill, prep.center, prep.scale), (again.fill, again.center, again.scale)):
        assert a.tobytes() == b.tobytes()
    z = prep.transform(x[:20])
    cont = [j for j in range(40) if j not in
            [SCHEMA.index(m) for g in SCHEMA.onehot_groups.values() for m in g]]
    np.testing.assert_allclose(z[:, cont].mean(axis=0), 0.0, atol=1e-12)


def test_missing_onehot_group_imputes_to_zero():
    x = np.random.default_rng(4).normal(size=(10, 40))
    members = [SCHEMA.index(m) for m in next(iter(SCHEMA.onehot_groups.values()))]
    x[0, members] = np.nan
    prep = Preprocessor.fit(x)
    assert np.all(prep.fill[members] == 0.0)


def test_test_rows_never_influence_model_choice(dataset):
    plan = make_split_plan(dataset, seed=0, repetitions=1, n_folds=2)
    test = plan.test[0]
    tampered = dataset.subset(np.arange(len(dataset)))
    tampered.x = dataset.x.copy()
    tampered.y = dataset.y.copy()
    rng = np.random.default_rng(9)
    tampered.x[test] = rng.normal(0, 1000, size=tampered.x[test].shape)
    tampered.y[test] = rng.uniform(0, 100, size=tampered.y[test].shape)
    kw = dict(variants=["ml"], tasks=["regression"], grid=SMALL_GRID, base_config=FAST,
              plan=plan)
    a = run_experiment(dataset, **kw).repetitions
    b = run_experiment(tampered, **kw).repetitions
    assert a["choice"].tolist() == b["choice"].tolist()
    assert not np.array_equal(a["value"].to_numpy(), b["value"].to_numpy())


# --- experiment -----------------------------------------------------------------

@pytest.fixture(scope="module")
def small_experiment(dataset):
    return run_experiment(dataset, variants=["mtml", "ml", BASELINE],
                          tasks=["regression", "binary"], grid=SMALL_GRID, seed=1,
                          repetitions=2, n_folds=2, base_config=FAST)


def test_report_shape(small_experiment):
    m = small_experiment.metrics
    assert len(m) == 3 * 2 * 5
    assert (m["sd"] >= 0).all() and (m["n_reps"] == 2).all()
    f1 = m[m["metric"] == "f1"]["mean"]
    assert f1.between(0, 1).all()
    assert (m[m["metric"] == "mae"]["mean"] >= 0).all()
    assert set(small_experiment.significance["variant_a"]) <= {"mtml", "ml", BASELINE}


def test_experiment_is_reproducible(dataset, small_experiment, tmp_path):
    again = run_experiment(dataset, variants=["mtml", "ml", BASELINE],
                           tasks=["regression", "binary"], grid=SMALL_GRID, seed=1,
                           repetitions=2, n_folds=2, base_config=FAST)
    pd.testing.assert_frame_equal(small_experiment.repetitions, again.repetitions)
    paths = small_experiment.write(tmp_path)
    assert {p.name for p in paths.values()} == {"metrics.csv", "significance.csv",
                                                "repetitions.csv"}


def test_majority_baseline_f1(dataset, small_experiment):
    reps = small_experiment.repetitions
    base = reps[(reps["variant"] == BASELINE) & (reps["task"] == "binary")]
    plan = small_experiment.plan
    j = 0
    for r in range(2):
        y_tr = discretize(dataset.y[plan.train[r], j], "binary")
        y_te = discretize(dataset.y[plan.test[r], j], "binary")
        major = int(np.bincount(y_tr, minlength=2).argmax())
        want = f1_score(y_te, np.full(len(y_te), major), 2)[0]
        got = base[(base["repetition"] == r) & (base["label"] == "alertness")]["value"].iloc[0]
        assert got == want


def test_experiment_errors(dataset):
    with pytest.raises(ConfigError):
        run_experiment(dataset, variants=["svm"], repetitions=1)
    nurses = dataset.subset(np.flatnonzero(dataset.roles == "nurse"))
    with pytest.raises(DataError):
        run_experiment(nurses, variants=["mtml"], repetitions=1)


# --- final training and model files ---------------------------------------------

def test_train_final_save_load(dataset, tmp_path):
    cfg = ModelConfig(epochs=5)
    net, prep, res = train_final(dataset, cfg, "binary", seed=2)
    assert net.trained and len(res.val_loss) >= 1
    path = tmp_path / "model.bin"
    save_trained(path, net, prep, {"note": "x"})
    back, back_prep, header = load_trained(path)
    assert header["note"] == "x"
    x = prep.transform(dataset.x[:8])
    a = predict(net, x, dataset.roles[:8])
    b = predict(back, back_prep.transform(dataset.x[:8]), dataset.roles[:8])
    assert np.array_equal(a.values, b.values)
    with pytest.raises(ConfigError):
        train_final(dataset, cfg, validation_fraction=1.0)


def test_load_trained_requires_preprocessing(tmp_path):
    net, _, _ = fit_model(FAST, np.random.default_rng(0).normal(size=(10, 40)),
                          np.array(["nurse", "doctor"] * 5), np.full((10, 5), 0.5))
    net.save(tmp_path / "bare.bin")
    with pytest.raises(DataError):
        load_trained(tmp_path / "bare.bin")
