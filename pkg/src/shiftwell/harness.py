"""Evaluation protocol: discretized label views, repeated 80/20 splits,
inner k-fold grid search, test metrics and cross-variant significance.

All randomness derives from one master seed. Each repetition, fold and
model unit gets its own generator from ``(seed, repetition, ...)``, so
results do not depend on execution order or on how many worker
processes run the repetitions.
"""

from __future__ import annotations

import datetime as dt
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .cohort_stats import anova_tukey
from .errors import (ConfigError, DataError, DegenerateGroups, OutOfRange, ShapeMismatch,
                     TooSmall)
from .io import write_csv
from .model import (LABEL_SCALE, N_CLASSES, Batch, ModelConfig, make_variant, predict, train)
from .nn import LossSpec
from .schema import LABELS, ROLES, SCHEMA, FeatureSchema

log = logging.getLogger(__name__)

CLASS_NAMES = {"binary": ("low", "high"), "three_class": ("low", "mid", "high")}
TASK_ALIASES = {"three": "three_class", "3class": "three_class", "reg": "regression"}
EXPERIMENT_VARIANTS = ("mtml", "mt", "ml", "ml_n", "ml_d", "nn")
BASELINE = "baseline"
GRID_KEYS = {"conv_channels", "init_scale", "shared_widths", "branch_width", "learning_rate", "focal_gamma",
             "epochs", "batch_size", "patience", "beta1", "beta2", "eps"}

DEFAULT_REGRESSION_GRID = [
    {"learning_rate": 0.005},
    {"learning_rate": 0.01},
    {"learning_rate": 0.005, "shared_widths": [32, 16]},
    {"learning_rate": 0.01, "shared_widths": [32, 16]},
]
DEFAULT_CLASSIFICATION_GRID = [
    {"learning_rate": lr, "focal_gamma": g} for lr in (0.005, 0.01) for g in (0.0, 1.0, 2.0)
]


# --- label views ------------------------------------------------------------------------

def normalize_task(task: str) -> str:
    task = TASK_ALIASES.get(task, task)
    if task not in N_CLASSES:
        raise ConfigError(f"unknown task {task!r}; choose from regression, binary, three_class")
    return task


def discretize(labels, view: str) -> np.ndarray:
    """Class index per score: binary low 0-50 / high 51-100; three-class
    low 0-33 / mid 34-66 / high 67-100."""
    view = normalize_task(view)
    if view == "regression":
        raise ConfigError("regression labels are not discretized")
    y = np.asarray(labels, dtype=np.float64)
    if not np.all(np.isfinite(y)) or np.any(y < 0) or np.any(y > 100):
        raise OutOfRange("wellbeing scores must lie in [0, 100]")
    if view == "binary":
        return (y > 50).astype(np.int64)
    return (y > 33).astype(np.int64) + (y > 66).astype(np.int64)


# --- dataset and preprocessing -------------------------------------------------------------

@dataclass
class Dataset:
    """Feature rows of day t paired with labels of day t + 1."""

    participant_id: np.ndarray
    date: np.ndarray
    roles: np.ndarray
    x: np.ndarray          # raw features, NaN where missing
    y: np.ndarray          # scores on the 0-100 scale, LABELS order
    schema: FeatureSchema = SCHEMA

    def __len__(self) -> int:
        return len(self.x)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.participant_id[idx], self.date[idx], self.roles[idx],
                       self.x[idx], self.y[idx], self.schema)


def build_dataset(features: pd.DataFrame, labels: pd.DataFrame, participants: pd.DataFrame,
                  schema: FeatureSchema = SCHEMA) -> Dataset:
    """Join features (date t) with labels (date t + 1) and roles.

    Rows without a next-day label are dropped; rows are ordered by
    participant and date.
    """
    role_of = dict(zip(participants["participant_id"].astype(str), participants["role"]))
    feats = features.copy()
    feats["participant_id"] = feats["participant_id"].astype(str)
    unknown = sorted(set(feats["participant_id"]) - set(role_of))
    if unknown:
        raise DataError(f"participants without a role: {unknown[:5]}")
    bad_roles = sorted(set(role_of.values()) - set(ROLES))
    if bad_roles:
        raise DataError(f"unknown roles {bad_roles}")
    feats["label_date"] = [(dt.date.fromisoformat(str(d)) + dt.timedelta(days=1)).isoformat()
                           for d in feats["date"]]
    lab = labels.rename(columns={"date": "label_date"}).copy()
    lab["participant_id"] = lab["participant_id"].astype(str)
    lab["label_date"] = lab["label_date"].astype(str)
    merged = feats.merge(lab[["participant_id", "label_date", *LABELS]],
                         on=["participant_id", "label_date"], how="inner")
    merged = merged.dropna(subset=list(LABELS))
    merged = merged.sort_values(["participant_id", "date"], kind="stable").reset_index(drop=True)
    if merged.empty:
        raise DataError("no feature row has a next-day label")
    y = merged[list(LABELS)].to_numpy(dtype=np.float64)
    if np.any(y < 0) or np.any(y > 100):
        raise OutOfRange("wellbeing scores must lie in [0, 100]")
    return Dataset(merged["participant_id"].to_numpy(), merged["date"].astype(str).to_numpy(),
                   merged["participant_id"].map(role_of).to_numpy(),
                   merged[list(schema.names)].to_numpy(dtype=np.float64), y, schema)


@dataclass
class Preprocessor:
    """Imputation and z-scoring fitted on training rows only.

    Missing numeric entries take the training mean; a missing one-hot
    group becomes all zeros. Columns are then centred and scaled by the
    training statistics of the imputed values (SD 0 maps to scale 1).
    """

    fill: np.ndarray
    center: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, schema: FeatureSchema = SCHEMA) -> "Preprocessor":
        x = np.asarray(x, dtype=np.float64)
        onehot = np.zeros(x.shape[1], dtype=bool)
        for members in schema.onehot_groups.values():
            onehot[[schema.index(m) for m in members]] = True
        fill = np.zeros(x.shape[1])
        for j in range(x.shape[1]):
            col = x[:, j]
            present = col[np.isfinite(col)]
            if not onehot[j] and len(present):
                fill[j] = present.mean()
        filled = np.where(np.isfinite(x), x, fill)
        center = filled.mean(axis=0)
        scale = filled.std(axis=0)
        scale[scale == 0] = 1.0
        return cls(fill, center, scale)

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != len(self.fill):
            raise ShapeMismatch(f"expected {len(self.fill)} feature columns, got shape {x.shape}")
        return (np.where(np.isfinite(x), x, self.fill) - self.center) / self.scale


# --- splits -------------------------------------------------------------------------

@dataclass
class SplitPlan:
    seed: int
    n_rows: int
    level: str
    train: list[np.ndarray]
    test: list[np.ndarray]
    folds: list[list[np.ndarray]]

    @property
    def repetitions(self) -> int:
        return len(self.test)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r, (tr, te, folds) in enumerate(zip(self.train, self.test, self.folds)):
            fold_of = {int(i): k for k, f in enumerate(folds) for i in f}
            for i in te:
                rows.append((r, int(i), "test", -1))
            for i in tr:
                rows.append((r, int(i), "train", fold_of[int(i)]))
        df = pd.DataFrame(rows, columns=["repetition", "row", "part", "fold"])
        return df.sort_values(["repetition", "row"], kind="stable").reset_index(drop=True)


def make_split_plan(dataset: Dataset | int, seed: int, repetitions: int = 10,
                    test_fraction: float = 0.2, n_folds: int = 10,
                    level: str = "row") -> SplitPlan:
    """Seeded 80/20 splits with k inner folds per training set.

    ``level="participant"`` keeps each participant's rows together.
    """
    n = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    if n < 20:
        raise TooSmall(f"need at least 20 rows to split, got {n}")
    if level not in ("row", "participant"):
        raise ConfigError(f"unknown split level {level!r}")
    if repetitions < 1 or n_folds < 2:
        raise ConfigError("need at least one repetition and two folds")
    groups = np.arange(n) if level == "row" else _group_codes(dataset)
    n_groups = int(groups.max()) + 1
    if level == "participant" and n_groups < 3:
        raise TooSmall("participant-level splitting needs at least 3 participants")
    trains, tests, folds = [], [], []
    for r in range(repetitions):
        order = np.random.default_rng([seed, r]).permutation(n_groups)
        n_test = max(1, int(round(test_fraction * n_groups)))
        test_groups = np.isin(groups, order[:n_test])
        test = np.flatnonzero(test_groups)
        train = np.flatnonzero(~test_groups)
        train_groups = np.unique(groups[train])
        k = min(n_folds, len(train_groups))
        fold_order = np.random.default_rng([seed, r, 1]).permutation(train_groups)
        fold_sets = []
        for part in np.array_split(fold_order, k):
            fold_sets.append(np.flatnonzero(np.isin(groups, part) & ~test_groups))
        trains.append(train)
        tests.append(test)
        folds.append(fold_sets)
    return SplitPlan(seed, n, level, trains, tests, folds)


def _group_codes(dataset) -> np.ndarray:
    if isinstance(dataset, (int, np.integer)):
        raise ConfigError("participant-level splits need a dataset, not a row count")
    _, codes = np.unique(dataset.participant_id, return_inverse=True)
    return codes


# --- grid --------------------------------------------------------------------------

def validate_grid(grid: Sequence[Mapping]) -> list[dict]:
    if not grid:
        raise ConfigError("grid must contain at least one assignment")
    out = []
    for i, point in enumerate(grid):
        if not isinstance(point, Mapping):
            raise ConfigError(f"grid entry {i} is not an object")
        unknown = set(point) - GRID_KEYS
        if unknown:
            raise ConfigError(f"grid entry {i}: unsupported keys {sorted(unknown)}")
        for key, value in point.items():
            vals = value if isinstance(value, (list, tuple)) else [value]
            if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in vals):
                raise ConfigError(f"grid entry {i}: {key} must be finite numbers")
        out.append(dict(point))
    return out


def load_grid(path) -> list[dict]:
    """Read a grid: a JSON list of assignments, or an object mapping keys
    to value lists (expanded as a product in key order)."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read grid ({exc})") from exc
    if isinstance(raw, dict) and "grid" in raw:
        raw = raw["grid"]
    if isinstance(raw, dict):
        keys = list(raw)
        values = [raw[k] if isinstance(raw[k], list) else [raw[k]] for k in keys]
        raw = [dict(zip(keys, combo)) for combo in itertools.product(*values)]
    if not isinstance(raw, list):
        raise ConfigError(f"{path}: grid must be a list or an object")
    return validate_grid(raw)


def default_grid(task: str) -> list[dict]:
    return list(DEFAULT_REGRESSION_GRID if normalize_task(task) == "regression"
                else DEFAULT_CLASSIFICATION_GRID)


# --- training units -----------------------------------------------------------------

def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def focal_alpha(targets: np.ndarray, n_classes: int) -> np.ndarray:
    """Inverse class frequency normalized to mean 1 (absent classes count once)."""
    counts = np.bincount(np.asarray(targets, dtype=np.int64), minlength=n_classes).astype(float)
    inv = 1.0 / np.maximum(counts, 1.0)
    return inv / inv.mean()


def _loss_specs(config: ModelConfig, targets: np.ndarray) -> Optional[list[LossSpec]]:
    if config.task_mode == "regression":
        return None
    k = N_CLASSES[config.task_mode]
    return [LossSpec("classification", config.focal_gamma, focal_alpha(targets[:, j], k))
            for j in range(targets.shape[1])]


def _model_targets(y_raw: np.ndarray, task: str) -> np.ndarray:
    if task == "regression":
        return y_raw / LABEL_SCALE
    return discretize(y_raw, task).astype(np.float64)


def fit_model(config: ModelConfig, x_raw: np.ndarray, roles: np.ndarray, targets: np.ndarray,
              schema: FeatureSchema = SCHEMA, validation: Optional[tuple] = None,
              epochs: Optional[int] = None):
    """Fit preprocessing and a network on the given rows.

    ``targets`` are already on the model scale. Returns
    ``(net, preprocessor, train_result)``.
    """
    prep = Preprocessor.fit(x_raw, schema)
    net = make_variant(config, _loss_specs(config, targets))
    data = Batch(prep.transform(x_raw), roles, targets)
    val = None
    if validation is not None:
        vx, vroles, vy = validation
        val = Batch(prep.transform(vx), vroles, vy)
    result = train(net, data, validation=val, epochs=epochs)
    return net, prep, result


PREPROCESSOR_BLOCKS = ("fill", "center", "scale")


def save_trained(path, net, prep: Preprocessor, extra_header: Optional[dict] = None) -> None:
    """Write a network together with the preprocessing it was trained behind."""
    blocks = {f"prep.{k}": getattr(prep, k) for k in PREPROCESSOR_BLOCKS}
    net.save(path, extra_blocks=blocks, extra_header=extra_header)


def load_trained(path):
    """Inverse of :func:`save_trained`; returns ``(net, preprocessor, header)``."""
    from .model import MTMLNetwork

    net, header, extras = MTMLNetwork.load(path)
    missing = [k for k in PREPROCESSOR_BLOCKS if f"prep.{k}" not in extras]
    if missing:
        raise DataError(f"{path}: model file lacks preprocessing blocks {missing}")
    prep = Preprocessor(*(np.asarray(extras[f"prep.{k}"], dtype=np.float64)
                          for k in PREPROCESSOR_BLOCKS))
    if len(prep.fill) != net.config.n_features:
        raise DataError(f"{path}: preprocessing width does not match the network")
    return net, prep, header


def train_final(dataset: Dataset, config: ModelConfig, task: str = "regression",
                seed: int = 0, validation_fraction: float = 0.2):
    """Train one network on a whole dataset.

    A seeded ``validation_fraction`` of the rows drives early stopping;
    0 trains for ``config.epochs`` on every row. The network's role
    subset, labels and variant come from ``config``.
    """
    task = normalize_task(task)
    if not 0 <= validation_fraction < 1:
        raise ConfigError("validation_fraction must lie in [0, 1)")
    cols = [LABELS.index(label) for label in config.labels]
    config = config.replace(task_mode=task, seed=_seed(seed, 7))
    n = len(dataset)
    order = np.random.default_rng([seed, 7]).permutation(n)
    n_val = int(round(validation_fraction * n))
    if n - n_val < 2:
        raise TooSmall("too few rows to train")
    va, tr = np.sort(order[:n_val]), np.sort(order[n_val:])
    targets = _model_targets(dataset.y[tr][:, cols], task)
    validation = None
    if n_val:
        validation = (dataset.x[va], dataset.roles[va], _model_targets(dataset.y[va][:, cols], task))
    return fit_model(config, dataset.x[tr], dataset.roles[tr], targets, dataset.schema,
                     validation=validation)


@dataclass
class GridResult:
    best_index: int
    assignment: dict
    mean_loss: list[float]
    best_epochs: list[float]
    n_parameters: list[int]


def grid_search(x_raw: np.ndarray, roles: np.ndarray, targets: np.ndarray,
                grid: Sequence[Mapping], config: ModelConfig,
                folds: Optional[Sequence[np.ndarray]] = None, seed: int = 0,
                schema: FeatureSchema = SCHEMA) -> GridResult:
    """Pick the assignment with the lowest mean inner-fold validation loss.

    Ties go to the assignment with fewer parameters, then to the earlier
    one. Every assignment sees the same folds and model seeds.
    """
    grid = validate_grid(grid)
    n = len(x_raw)
    if folds is None:
        order = np.random.default_rng([seed, 2]).permutation(n)
        folds = [np.sort(f) for f in np.array_split(order, min(10, n))]
    losses, epochs, sizes = [], [], []
    for point in grid:
        cfg = config.replace(**_as_config_values(point))
        fold_losses, fold_epochs = [], []
        for k, val_idx in enumerate(folds):
            tr = np.setdiff1d(np.arange(n), val_idx)
            if len(tr) == 0 or len(val_idx) == 0:
                continue
            fold_cfg = cfg.replace(seed=_seed(seed, k))
            _, _, res = fit_model(fold_cfg, x_raw[tr], roles[tr], targets[tr], schema,
                                  validation=(x_raw[val_idx], roles[val_idx], targets[val_idx]))
            fold_losses.append(min(res.val_loss))
            fold_epochs.append(res.best_epoch)
        losses.append(float(np.mean(fold_losses)))
        epochs.append(float(np.mean(fold_epochs)))
        sizes.append(make_variant(cfg).n_parameters)
    best = min(range(len(grid)), key=lambda i: (losses[i], sizes[i], i))
    return GridResult(best, grid[best], losses, epochs, sizes)


def _as_config_values(point: Mapping) -> dict:
    out = dict(point)
    if "shared_widths" in out:
        out["shared_widths"] = tuple(int(w) for w in out["shared_widths"])
    for key in ("conv_channels", "branch_width", "epochs", "batch_size", "patience"):
        if key in out:
            out[key] = int(out[key])
    return out


# --- metrics -----------------------------------------------------------------------

def f1_score(y_true, y_pred, n_classes: int) -> tuple[float, np.ndarray, np.ndarray]:
    """Macro f1 with per-class precision and recall.

    Empty denominators count as 0. The macro average runs over classes
    that occur in the truth or the predictions.
    """
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if t.shape != p.shape:
        raise ShapeMismatch(f"y_true {t.shape} vs y_pred {p.shape}")
    for arr in (t, p):
        if np.any(arr < 0) or np.any(arr >= n_classes):
            raise OutOfRange(f"class indices must lie in [0, {n_classes})")
    precision = np.zeros(n_classes)
    recall = np.zeros(n_classes)
    f1 = np.zeros(n_classes)
    seen = np.zeros(n_classes, dtype=bool)
    for c in range(n_classes):
        tp = int(np.sum((t == c) & (p == c)))
        n_pred = int(np.sum(p == c))
        n_true = int(np.sum(t == c))
        seen[c] = n_pred > 0 or n_true > 0
        precision[c] = tp / n_pred if n_pred else 0.0
        recall[c] = tp / n_true if n_true else 0.0
        denom = precision[c] + recall[c]
        f1[c] = 2 * precision[c] * recall[c] / denom if denom else 0.0
    macro = float(f1[seen].mean()) if seen.any() else 0.0
    return macro, precision, recall


def mae(y_true, y_pred) -> float:
    t = np.asarray(y_true, dtype=np.float64)
    p = np.asarray(y_pred, dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeMismatch(f"y_true {t.shape} vs y_pred {p.shape}")
    if t.size == 0:
        raise ShapeMismatch("mae of empty arrays")
    return float(np.mean(np.abs(t - p)))


# --- experiment ----------------------------------------------------------------------

def variant_units(variant: str, labels: Sequence[str] = LABELS) -> list[tuple[str, tuple, Optional[str]]]:
    """(model variant, labels, role subset) for each network a variant trains."""
    if variant == "mtml":
        return [("mtml", tuple(labels), None)]
    if variant == "ml":
        return [("ml", tuple(labels), None)]
    if variant == "ml_n":
        return [("ml", tuple(labels), "nurse")]
    if variant == "ml_d":
        return [("ml", tuple(labels), "doctor")]
    if variant in ("mt", "nn"):
        return [(variant, (label,), None) for label in labels]
    raise ConfigError(f"unknown experiment variant {variant!r}; choose from "
                      f"{EXPERIMENT_VARIANTS + (BASELINE,)}")


@dataclass
class RepetitionRecord:
    repetition: int
    variant: str
    task: str
    label: str
    metric: str
    value: float
    precision: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)
    n_test: int = 0
    choice: str = ""


@dataclass
class ExperimentResult:
    metrics: pd.DataFrame
    repetitions: pd.DataFrame
    significance: pd.DataFrame
    plan: SplitPlan

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        paths = {"metrics": out / "metrics.csv", "significance": out / "significance.csv",
                 "repetitions": out / "repetitions.csv"}
        write_csv(self.metrics, paths["metrics"])
        write_csv(self.significance, paths["significance"])
        write_csv(self.repetitions, paths["repetitions"])
        return paths

    def mean(self, variant: str, task: str = "regression") -> float:
        """Mean over labels of the per-label headline metric."""
        m = self.metrics
        sel = m[(m["variant"] == variant) & (m["task"] == task)]
        return float(sel["mean"].mean())


def _evaluate(task: str, y_raw: np.ndarray, pred: np.ndarray) -> tuple[str, float, list, list]:
    if task == "regression":
        return "mae", mae(y_raw, pred), [], []
    truth = discretize(y_raw, task)
    macro, prec, rec = f1_score(truth, pred.astype(np.int64), N_CLASSES[task])
    return "f1", macro, list(prec), list(rec)


def _run_repetition(args) -> list[RepetitionRecord]:
    (dataset, plan, r, variants, tasks, grids, seed, base_config) = args
    train_idx, test_idx, folds = plan.train[r], plan.test[r], plan.folds[r]
    records = []
    position = {int(i): k for k, i in enumerate(train_idx)}
    for t_index, task in enumerate(tasks):
        grid = grids[task]
        for v_index, variant in enumerate(variants):
            if variant == BASELINE:
                records.extend(_baseline(dataset, train_idx, test_idx, task, r))
                continue
            for u_index, (kind, labels, role) in enumerate(variant_units(variant)):
                records.extend(_run_unit(dataset, train_idx, test_idx, folds, position, task, grid,
                                         variant, kind, labels, role, base_config,
                                         _seed(seed, r, t_index, v_index, u_index), r))
    return records


def _run_unit(dataset, train_idx, test_idx, folds, position, task, grid, variant, kind, labels,
              role, base_config, unit_seed, r) -> list[RepetitionRecord]:
    cols = [LABELS.index(label) for label in labels]
    tr = train_idx if role is None else train_idx[dataset.roles[train_idx] == role]
    te = test_idx if role is None else test_idx[dataset.roles[test_idx] == role]
    if len(tr) < 2 or len(te) == 0:
        raise DataError(f"{variant}: too few {role or 'all'} rows in repetition {r}")
    keep = set(int(i) for i in tr)
    local = {int(i): k for k, i in enumerate(tr)}
    unit_folds = [np.array([local[int(i)] for i in f if int(i) in keep], dtype=np.int64)
                  for f in folds]
    unit_folds = [f for f in unit_folds if len(f)]
    targets = _model_targets(dataset.y[tr][:, cols], task)
    config = base_config.replace(variant=kind, labels=tuple(labels), task_mode=task)
    gs = grid_search(dataset.x[tr], dataset.roles[tr], targets, grid, config, unit_folds,
                     seed=unit_seed, schema=dataset.schema)
    final_cfg = config.replace(**_as_config_values(gs.assignment), seed=_seed(unit_seed, 99))
    epochs = max(1, int(round(gs.best_epochs[gs.best_index])))
    net, prep, _ = fit_model(final_cfg, dataset.x[tr], dataset.roles[tr], targets,
                             dataset.schema, epochs=epochs)
    pred = predict(net, prep.transform(dataset.x[te]), dataset.roles[te]).values
    choice = json.dumps({"grid_index": gs.best_index, **gs.assignment, "epochs": epochs},
                        sort_keys=True)
    records = []
    for j, label in enumerate(labels):
        metric, value, prec, rec = _evaluate(task, dataset.y[te][:, cols[j]], pred[:, j])
        records.append(RepetitionRecord(r, variant, task, label, metric, value, prec, rec,
                                        len(te), choice))
    return records


def _baseline(dataset, train_idx, test_idx, task, r) -> list[RepetitionRecord]:
    records = []
    for j, label in enumerate(LABELS):
        y_tr, y_te = dataset.y[train_idx, j], dataset.y[test_idx, j]
        if task == "regression":
            pred = np.full(len(y_te), y_tr.mean())
            choice = json.dumps({"predict": "training mean"})
        else:
            k = N_CLASSES[task]
            counts = np.bincount(discretize(y_tr, task), minlength=k)
            pred = np.full(len(y_te), int(np.argmax(counts)))
            choice = json.dumps({"predict": "majority class"})
        metric, value, prec, rec = _evaluate(task, y_te, pred)
        records.append(RepetitionRecord(r, BASELINE, task, label, metric, value, prec, rec,
                                        len(y_te), choice))
    return records


def run_experiment(dataset: Dataset, variants: Iterable[str] = ("mtml", "mt", "ml", "nn", BASELINE),
                   tasks: Iterable[str] = ("regression", "binary", "three_class"),
                   grid: Optional[Sequence[Mapping] | Mapping[str, Sequence[Mapping]]] = None,
                   seed: int = 0, repetitions: int = 10, n_folds: int = 10,
                   level: str = "row", base_config: Optional[ModelConfig] = None,
                   jobs: int = 1, plan: Optional[SplitPlan] = None) -> ExperimentResult:
    """Grid search, retrain and test every variant on every repetition.

    ``grid`` is one list of assignments for all tasks or a mapping from
    task to its own list; ``None`` uses the default grids. The retrained
    model runs for the mean best epoch of the chosen assignment's folds.
    """
    variants = list(dict.fromkeys(variants))
    tasks = [normalize_task(t) for t in tasks]
    for v in variants:
        if v != BASELINE:
            variant_units(v)
    if any(v in ("mtml", "mt") for v in variants) and len(set(dataset.roles)) < 2:
        raise DataError("role-branched variants need both nurses and doctors in the data")
    if grid is None:
        grids = {t: default_grid(t) for t in tasks}
    elif isinstance(grid, Mapping):
        grids = {t: validate_grid(grid[t]) for t in tasks}
    else:
        grids = {t: validate_grid(grid) for t in tasks}
    base_config = base_config or ModelConfig()
    plan = plan or make_split_plan(dataset, seed, repetitions, n_folds=n_folds, level=level)
    work = [(dataset, plan, r, variants, tasks, grids, seed, base_config)
            for r in range(plan.repetitions)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_rep = list(pool.map(_run_repetition, work))
    else:
        per_rep = [_run_repetition(w) for w in work]
    records = [rec for recs in per_rep for rec in recs]
    reps = _records_frame(records)
    metrics = _aggregate(reps, variants, tasks)
    significance = _significance(reps, variants, tasks)
    return ExperimentResult(metrics, reps, significance, plan)


def _records_frame(records: list[RepetitionRecord]) -> pd.DataFrame:
    rows = []
    for rec in records:
        row = {"repetition": rec.repetition, "variant": rec.variant, "task": rec.task,
               "label": rec.label, "metric": rec.metric, "value": rec.value,
               "n_test": rec.n_test}
        names = CLASS_NAMES.get(rec.task, ())
        for c, name in enumerate(names):
            row[f"precision_{name}"] = rec.precision[c]
            row[f"recall_{name}"] = rec.recall[c]
        row["choice"] = rec.choice
        rows.append(row)
    cols = ["repetition", "variant", "task", "label", "metric", "value", "n_test"]
    for name in ("low", "mid", "high"):
        cols += [f"precision_{name}", f"recall_{name}"]
    cols.append("choice")
    return pd.DataFrame(rows, columns=cols)


def _aggregate(reps: pd.DataFrame, variants, tasks) -> pd.DataFrame:
    rows = []
    for task in tasks:
        for variant in variants:
            for label in LABELS:
                sel = reps[(reps["variant"] == variant) & (reps["task"] == task)
                           & (reps["label"] == label)]
                if sel.empty:
                    continue
                vals = sel["value"].to_numpy(dtype=float)
                row = {"variant": variant, "task": task, "label": label,
                       "metric": sel["metric"].iloc[0], "mean": vals.mean(),
                       "sd": vals.std(ddof=1) if len(vals) > 1 else 0.0, "n_reps": len(vals)}
                for name in ("low", "mid", "high"):
                    for kind in ("precision", "recall"):
                        col = sel[f"{kind}_{name}"].to_numpy(dtype=float)
                        row[f"{kind}_{name}"] = col.mean() if np.isfinite(col).all() else np.nan
                rows.append(row)
    cols = ["variant", "task", "label", "metric", "mean", "sd", "n_reps"]
    cols += [f"{k}_{n}" for n in ("low", "mid", "high") for k in ("precision", "recall")]
    return pd.DataFrame(rows, columns=cols)


def _significance(reps: pd.DataFrame, variants, tasks) -> pd.DataFrame:
    rows = []
    for task in tasks:
        for label in LABELS:
            groups = {}
            for v in variants:
                vals = reps[(reps["variant"] == v) & (reps["task"] == task)
                            & (reps["label"] == label)]["value"].to_numpy(dtype=float)
                if len(vals) >= 2:
                    groups[v] = vals
            if len(groups) < 2:
                continue
            try:
                res = anova_tukey(groups)
            except DegenerateGroups:
                continue
            names = list(res.labels)
            for i, j in itertools.combinations(range(len(names)), 2):
                rows.append({"task": task, "label": label, "variant_a": names[i],
                             "variant_b": names[j], "mean_a": res.means[i], "mean_b": res.means[j],
                             "mean_diff": res.means[i] - res.means[j],
                             "tukey_p": res.tukey_p[i, j], "anova_f": res.f,
                             "anova_p": res.p_value})
    return pd.DataFrame(rows, columns=["task", "label", "variant_a", "variant_b", "mean_a",
                                       "mean_b", "mean_diff", "tukey_p", "anova_f", "anova_p"])
