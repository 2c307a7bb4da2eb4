"""Job-role multitask / multilabel network and its ablations.

Architecture: row-wise conv (32 channels, ReLU) -> shared dense layers
(ReLU) -> one dense layer per branch (ReLU) -> one linear head per label.
Variants differ only in branching and head count:

=========  ================  =============
variant    branches          heads/branch
=========  ================  =============
``mtml``   nurse, doctor     5 labels
``mt``     nurse, doctor     1 label
``ml``     single (all)      5 labels
``nn``     single (all)      1 label
=========  ================  =============

Each row is routed only through the branch of its role, and the batch
loss is the nurse-row sum plus the doctor-row sum of per-label losses, so
a branch never receives gradient from the other role's rows.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (ConfigError, DataError, DivergenceDetected, EmptyBatch, InvalidVariant,
                     ShapeMismatch, UnknownRole, UntrainedModel)
from .nn import (AdamState, Conv1DLayer, LossSpec, adam_step, focal_terms, gradient_check,
                 he_uniform, read_container, relu, softmax, squared_error_terms, write_container,
                 xavier_uniform)
from .schema import LABELS, ROLES, SCHEMA

log = logging.getLogger(__name__)

VARIANTS = ("mtml", "mt", "ml", "nn")
TASK_MODES = ("regression", "binary", "three_class")
N_CLASSES = {"regression": 1, "binary": 2, "three_class": 3}
ALL = "all"
LABEL_SCALE = 100.0


@dataclass
class ModelConfig:
    n_features: int = len(SCHEMA)
    conv_channels: int = 32
    shared_widths: tuple[int, ...] = (64, 32)
    branch_width: int = 16
    roles: tuple[str, ...] = ROLES
    labels: tuple[str, ...] = LABELS
    task_mode: str = "regression"
    variant: str = "mtml"
    focal_gamma: float = 2.0
    learning_rate: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 500
    batch_size: int = 16
    patience: int = 50
    seed: int = 0
    init_scale: float = 0.1

    def __post_init__(self):
        self.shared_widths = tuple(int(w) for w in self.shared_widths)
        self.roles = tuple(self.roles)
        self.labels = tuple(self.labels)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise InvalidVariant(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.task_mode not in TASK_MODES:
            raise ConfigError(f"unknown task_mode {self.task_mode!r}; choose from {TASK_MODES}")
        if self.variant in ("mt", "nn") and len(self.labels) != 1:
            raise InvalidVariant(f"variant {self.variant!r} predicts one label, got {self.labels}")
        if not self.labels or any(l not in LABELS for l in self.labels):
            raise ConfigError(f"labels must be drawn from {LABELS}")
        if len(self.roles) != 2 or len(set(self.roles)) != 2:
            raise ConfigError("exactly two distinct roles are supported")
        for name in ("n_features", "conv_channels", "branch_width", "epochs", "batch_size", "patience"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if any(w < 1 for w in self.shared_widths):
            raise ConfigError("shared widths must be positive")
        if self.focal_gamma < 0 or self.learning_rate < 0:
            raise ConfigError("focal_gamma and learning_rate must be non-negative")
        if not self.init_scale > 0:
            raise ConfigError("init_scale must be positive")

    @property
    def branched(self) -> bool:
        return self.variant in ("mtml", "mt")

    @property
    def n_outputs(self) -> int:
        return N_CLASSES[self.task_mode]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["shared_widths"] = list(self.shared_widths)
        d["roles"] = list(self.roles)
        d["labels"] = list(self.labels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def load_config(path) -> ModelConfig:
    """Read a JSON object whose keys are ModelConfig fields."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return ModelConfig.from_dict(raw)


@dataclass
class Batch:
    """Standardized features, role per row and per-label targets.

    Regression targets are on the internal [0, 1] scale; classification
    targets are class indices.
    """

    x: np.ndarray
    roles: np.ndarray
    y: np.ndarray
    imputed: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.roles = np.asarray(self.roles)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        if len(self.x) != len(self.roles) or len(self.x) != len(self.y):
            raise ShapeMismatch("features, roles and targets must have the same number of rows")

    def __len__(self):
        return len(self.x)

    def subset(self, idx) -> "Batch":
        out = Batch.__new__(Batch)  # rows of a valid batch need no revalidation
        out.x, out.roles, out.y = self.x[idx], self.roles[idx], self.y[idx]
        out.imputed = None if self.imputed is None else self.imputed[idx]
        return out


class MTMLNetwork:
    """Parameters and forward/backward passes for one model variant."""

    def __init__(self, config: ModelConfig, loss_specs: Optional[Sequence[LossSpec]] = None):
        config.validate()
        self.config = config
        self.branches = config.roles if config.branched else (ALL,)
        self.labels = config.labels
        self.trained = False
        if loss_specs is None:
            task = "regression" if config.task_mode == "regression" else "classification"
            loss_specs = [LossSpec(task, config.focal_gamma) for _ in self.labels]
        if len(loss_specs) != len(self.labels):
            raise ConfigError("one loss spec per label is required")
        self.loss_specs = list(loss_specs)
        self._pack(self._init_params(np.random.default_rng(config.seed)))

    def _pack(self, params: dict[str, np.ndarray]) -> None:
        # Every parameter is a view into one flat buffer so the optimizer and
        # gradient accumulation touch a single array. The heads of a branch
        # share one (width, labels * k) block; each head is a column slice.
        k = self.config.n_outputs
        n_labels = len(self.labels)
        groups = {}
        offset = 0
        for name, v in params.items():
            if name.startswith("head."):
                continue
            groups[name] = (offset, offset + v.size, v.shape)
            offset += v.size
        for b in self.branches:
            for part, shape in (("weight", (self.config.branch_width, n_labels * k)),
                                ("bias", (n_labels * k,))):
                size = int(np.prod(shape))
                groups[f"heads.{b}.{part}"] = (offset, offset + size, shape)
                offset += size
        self._groups = groups
        self._order = list(params)
        self.flat = np.empty(offset)
        self._param_blocks = self._blocks(self.flat)
        self.params = self._views(self.flat)
        for name, v in params.items():
            self.params[name][...] = v

    def _blocks(self, buf: np.ndarray) -> dict[str, np.ndarray]:
        return {name: buf[a:b].reshape(shape) for name, (a, b, shape) in self._groups.items()}

    def _views(self, buf: np.ndarray) -> dict[str, np.ndarray]:
        blocks = self._blocks(buf)
        k = self.config.n_outputs
        out = {}
        for name in self._order:
            if name.startswith("head."):
                _, b, label, part = name.split(".")
                j = self.labels.index(label)
                block = blocks[f"heads.{b}.{part}"]
                out[name] = block[..., j * k:(j + 1) * k]
            else:
                out[name] = blocks[name]
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        """Copy ``params`` (same names and shapes) into the network."""
        for name, v in params.items():
            if name not in self.params or self.params[name].shape != np.shape(v):
                raise ShapeMismatch(f"parameter {name!r} does not fit this network")
            self.params[name][...] = v

    def _init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        c = self.config
        p: dict[str, np.ndarray] = {}
        conv = Conv1DLayer.init(c.n_features, rng, c.conv_channels)
        p["conv.kernels"], p["conv.bias"] = conv.kernels, conv.bias
        width = c.conv_channels
        for i, w in enumerate(c.shared_widths):
            p[f"shared{i}.weight"] = he_uniform(rng, width, (width, w))
            p[f"shared{i}.bias"] = np.zeros(w)
            width = w
        for b in self.branches:
            p[f"branch.{b}.weight"] = he_uniform(rng, width, (width, c.branch_width))
            p[f"branch.{b}.bias"] = np.zeros(c.branch_width)
        k = c.n_outputs
        for b in self.branches:
            for label in self.labels:
                p[f"head.{b}.{label}.weight"] = xavier_uniform(rng, c.branch_width, k,
                                                               (c.branch_width, k))
                p[f"head.{b}.{label}.bias"] = np.zeros(k)
        for name, v in p.items():
            if not name.endswith("bias"):
                v *= c.init_scale
        return p

    # -- structure --------------------------------------------------------------

    @property
    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def branch_parameter_names(self, branch: str) -> list[str]:
        return [n for n in self.params
                if n.startswith(f"branch.{branch}.") or n.startswith(f"head.{branch}.")]

    def conv_layer(self) -> Conv1DLayer:
        return Conv1DLayer(self.params["conv.kernels"], self.params["conv.bias"])

    def role_codes(self, roles) -> np.ndarray:
        roles = np.asarray(roles)
        codes = np.full(len(roles), -1, dtype=np.int64)
        for i, r in enumerate(self.config.roles):
            codes[roles == r] = i
        if np.any(codes < 0):
            bad = roles[codes < 0][0]
            raise UnknownRole(f"unknown role {bad!r}; expected one of {self.config.roles}")
        return codes

    def branch_rows(self, roles) -> dict[str, np.ndarray]:
        return self._rows_from_codes(self.role_codes(roles))

    def _rows_from_codes(self, codes: np.ndarray) -> dict[str, np.ndarray]:
        if self.config.branched:
            return {b: np.flatnonzero(codes == i) for i, b in enumerate(self.branches)}
        return {ALL: np.arange(len(codes))}

    # -- passes -----------------------------------------------------------------

    def _forward(self, x: np.ndarray, roles, dtype=np.float64,
                 codes: Optional[np.ndarray] = None) -> tuple[dict[str, np.ndarray], dict]:
        p = self._param_blocks
        if dtype is not np.float64:
            p = {k: v.astype(dtype) for k, v in p.items()}
            x = x.astype(dtype)
        if x.ndim != 2 or x.shape[1] != self.config.n_features:
            raise ShapeMismatch(f"expected (rows, {self.config.n_features}) features, got {x.shape}")
        if codes is None:
            codes = self.role_codes(roles)
        rows = self._rows_from_codes(codes)
        cache: dict = {"x": x, "rows": rows, "codes": codes}
        pre = x @ p["conv.kernels"].T + p["conv.bias"]
        h = relu(pre)
        acts = [(x, pre)]
        layers_in = [h]
        for i in range(len(self.config.shared_widths)):
            pre = h @ p[f"shared{i}.weight"] + p[f"shared{i}.bias"]
            h = relu(pre)
            acts.append((layers_in[-1], pre))
            layers_in.append(h)
        cache["acts"] = acts
        cache["shared_out"] = h
        n, k = len(x), self.config.n_outputs
        z = np.zeros((n, len(self.labels) * k), dtype=x.dtype)
        cache["branch"] = {}
        for b, idx in rows.items():
            if idx.size == 0:
                continue
            hin = h[idx]
            bpre = hin @ p[f"branch.{b}.weight"] + p[f"branch.{b}.bias"]
            bh = relu(bpre)
            cache["branch"][b] = (hin, bpre, bh)
            z[idx] = bh @ p[f"heads.{b}.weight"] + p[f"heads.{b}.bias"]
        cache["z"] = z
        out = {label: z[:, j * k:(j + 1) * k] for j, label in enumerate(self.labels)}
        return out, cache

    def forward(self, x, roles) -> dict[str, np.ndarray]:
        """Raw outputs per label: (rows, 1) for regression, logits otherwise."""
        out, _ = self._forward(np.asarray(x, dtype=np.float64), roles)
        for v in out.values():
            if not np.all(np.isfinite(v)):
                raise FloatingPointError("non-finite network output")
        return out

    def row_losses(self, out: dict[str, np.ndarray], y: np.ndarray
                   ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Per-row summed label loss and per-label output gradients."""
        z = np.hstack([out[label] for label in self.labels])
        total, dz = self._row_losses(z, y)
        k = self.config.n_outputs
        return total, {label: dz[:, j * k:(j + 1) * k] for j, label in enumerate(self.labels)}

    def _row_losses(self, z: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # z holds the outputs of all heads side by side, k columns per label
        if self.config.task_mode == "regression":
            sq, dz = squared_error_terms(z, y)
            return sq.sum(axis=1), dz
        k = self.config.n_outputs
        total = np.zeros(len(y), dtype=z.dtype)
        dz = np.empty_like(z)
        for j, spec in enumerate(self.loss_specs):
            loss, g = focal_terms(z[:, j * k:(j + 1) * k], y[:, j], spec.gamma, spec.alpha)
            total += loss
            dz[:, j * k:(j + 1) * k] = g
        return total, dz

    def loss(self, batch: Batch) -> float:
        if len(batch) == 0:
            raise EmptyBatch("empty batch")
        _, cache = self._forward(batch.x, batch.roles)
        per_row, _ = self._row_losses(cache["z"], batch.y)
        return float(self._role_sum(per_row, cache["codes"]))

    def probe(self, batch: Batch, dtype=np.longdouble) -> tuple[float, bytes]:
        """Loss evaluated in ``dtype`` plus the ReLU activation pattern.

        Used as the finite-difference side of gradient checks: the wider
        type keeps roundoff well below the step size, and the pattern
        reveals perturbations that cross a ReLU kink.
        """
        _, cache = self._forward(batch.x, batch.roles, dtype)
        per_row, _ = self._row_losses(cache["z"], batch.y)
        pres = [pre for _, pre in cache["acts"]] + [bpre for _, bpre, _ in cache["branch"].values()]
        pattern = np.packbits(np.concatenate([(q > 0).ravel() for q in pres])).tobytes()
        return self._role_sum(per_row, cache["codes"]), pattern

    def _role_sum(self, per_row: np.ndarray, codes: np.ndarray):
        return sum(per_row[codes == i].sum() for i in range(len(self.config.roles)))

    def loss_and_grad(self, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
        loss, gflat = self.loss_and_flat_grad(batch)
        return loss, self._views(gflat)

    def loss_and_flat_grad(self, batch: Batch, codes: Optional[np.ndarray] = None
                           ) -> tuple[float, np.ndarray]:
        """Loss and the gradient laid out like ``self.flat``."""
        if len(batch) == 0:
            raise EmptyBatch("empty batch")
        p = self._param_blocks
        _, cache = self._forward(batch.x, batch.roles, codes=codes)
        per_row, dz = self._row_losses(cache["z"], batch.y)
        loss = float(self._role_sum(per_row, cache["codes"]))

        gflat = np.zeros_like(self.flat)
        grads = self._blocks(gflat)
        d_shared = np.zeros_like(cache["shared_out"])
        for b, (hin, bpre, bh) in cache["branch"].items():
            idx = cache["rows"][b]
            g = dz[idx]
            grads[f"heads.{b}.weight"][...] = bh.T @ g
            grads[f"heads.{b}.bias"][...] = g.sum(axis=0)
            dbh = g @ p[f"heads.{b}.weight"].T
            dpre = dbh * (bpre > 0)
            grads[f"branch.{b}.weight"][...] = hin.T @ dpre
            grads[f"branch.{b}.bias"][...] = dpre.sum(axis=0)
            d_shared[idx] += dpre @ p[f"branch.{b}.weight"].T

        dh = d_shared
        acts = cache["acts"]
        for i in reversed(range(len(self.config.shared_widths))):
            hin, pre = acts[i + 1]
            dpre = dh * (pre > 0)
            grads[f"shared{i}.weight"][...] = hin.T @ dpre
            grads[f"shared{i}.bias"][...] = dpre.sum(axis=0)
            dh = dpre @ p[f"shared{i}.weight"].T
        x, pre = acts[0]
        dpre = dh * (pre > 0)
        grads["conv.kernels"][...] = dpre.T @ x
        grads["conv.bias"][...] = dpre.sum(axis=0)
        return loss, gflat

    def copy(self) -> "MTMLNetwork":
        new = copy.copy(self)
        new.loss_specs = copy.deepcopy(self.loss_specs)
        new._pack({k: self.params[k].copy() for k in self._order})
        return new

    # -- persistence ------------------------------------------------------------

    def save(self, path, extra_blocks: Optional[dict[str, np.ndarray]] = None,
             extra_header: Optional[dict] = None) -> None:
        header = {
            "kind": "mtml-network",
            "schema_version": SCHEMA.version,
            "feature_names": list(SCHEMA.names),
            "config": self.config.to_dict(),
            "branches": list(self.branches),
            "task_mode": self.config.task_mode,
            "trained": self.trained,
            "loss_specs": [{"task": s.task, "gamma": s.gamma,
                            "alpha": None if s.alpha is None else [float(a) for a in s.alpha]}
                           for s in self.loss_specs],
        }
        header.update(extra_header or {})
        blocks = {f"param:{k}": v for k, v in self.params.items()}
        for k, v in (extra_blocks or {}).items():
            blocks[f"extra:{k}"] = v
        write_container(path, header, blocks)

    @classmethod
    def load(cls, path) -> tuple["MTMLNetwork", dict, dict[str, np.ndarray]]:
        header, blocks = read_container(path)
        if header.get("kind") != "mtml-network":
            raise ConfigError(f"{path}: not an MTML network container")
        if header.get("schema_version") != SCHEMA.version:
            raise ConfigError(f"{path}: schema version {header.get('schema_version')} "
                              f"does not match {SCHEMA.version}")
        config = ModelConfig.from_dict(header["config"])
        specs = [LossSpec(s["task"], s["gamma"], None if s["alpha"] is None else np.array(s["alpha"]))
                 for s in header["loss_specs"]]
        net = cls(config, specs)
        missing = [n for n in net.params if f"param:{n}" not in blocks]
        if missing:
            raise DataError(f"{path}: missing parameter blocks {missing}")
        net.set_params({n: blocks[f"param:{n}"] for n in net.params})
        net.trained = bool(header["trained"])
        extras = {k[len("extra:"):]: v for k, v in blocks.items() if k.startswith("extra:")}
        return net, header, extras


def make_variant(config: ModelConfig, loss_specs=None) -> MTMLNetwork:
    return MTMLNetwork(config, loss_specs)


def forward(net: MTMLNetwork, batch: Batch) -> dict[str, np.ndarray]:
    return net.forward(batch.x, batch.roles)


def masked_batch_loss(net: MTMLNetwork, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
    """Role-masked batch loss: nurse-row sum plus doctor-row sum of per-label
    losses, with gradients for every parameter (inactive branches get zeros)."""
    return net.loss_and_grad(batch)


@dataclass
class TrainResult:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def validation_loss(net: MTMLNetwork, batch: Batch) -> float:
    """MAE on the 0-100 label scale for regression, mean focal loss otherwise."""
    out = net.forward(batch.x, batch.roles)
    if net.config.task_mode == "regression":
        pred = np.column_stack([out[l][:, 0] for l in net.labels])
        return float(np.mean(np.abs(pred - batch.y)) * LABEL_SCALE)
    per_row, _ = net.row_losses(out, batch.y)
    return float(per_row.mean() / len(net.labels))


def train(net: MTMLNetwork, data: Batch, config: Optional[ModelConfig] = None,
          validation: Optional[Batch] = None, epochs: Optional[int] = None) -> TrainResult:
    """Mini-batch Adam on the role-masked loss.

    Shuffling is seeded from the config. With a validation batch, training
    stops after ``patience`` epochs without improvement and the best
    parameters are restored.
    """
    config = config or net.config
    if len(data) == 0:
        raise EmptyBatch("no training rows")
    n_epochs = epochs if epochs is not None else config.epochs
    rng = np.random.default_rng([config.seed, 1])
    opt = AdamState(config.learning_rate, config.beta1, config.beta2, config.eps)
    result = TrainResult()
    best = math.inf
    best_params = None
    since_best = 0
    n = len(data)
    codes = net.role_codes(data.roles)
    flat = {"flat": net.flat}
    for epoch in range(n_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, gflat = net.loss_and_flat_grad(data.subset(idx), codes[idx])
            if not math.isfinite(loss):
                raise DivergenceDetected(f"loss became {loss} at epoch {epoch}, step {opt.step}")
            adam_step(opt, flat, {"flat": gflat})
            total += loss
        result.train_loss.append(total / n)
        if validation is not None and len(validation):
            v = validation_loss(net, validation)
            if not math.isfinite(v):
                raise DivergenceDetected(f"validation loss became {v} at epoch {epoch}")
            result.val_loss.append(v)
            if v < best:
                best, since_best = v, 0
                best_params = net.flat.copy()
                result.best_epoch = epoch + 1
            else:
                since_best += 1
                if since_best >= config.patience:
                    result.stopped_early = True
                    break
        else:
            result.best_epoch = epoch + 1
    if best_params is not None:
        net.flat[...] = best_params
    net.trained = True
    return result


@dataclass
class Prediction:
    labels: tuple[str, ...]
    values: np.ndarray                      # regression scores (0-100) or class indices
    probabilities: Optional[list[np.ndarray]] = None  # per label, (rows, k)


def predict(net: MTMLNetwork, x, roles) -> Prediction:
    if not net.trained:
        raise UntrainedModel("network has not been trained")
    out = net.forward(x, roles)
    if net.config.task_mode == "regression":
        vals = np.column_stack([out[l][:, 0] for l in net.labels]) * LABEL_SCALE
        return Prediction(net.labels, vals)
    probs = [softmax(out[l]) for l in net.labels]
    classes = np.column_stack([p.argmax(axis=1) for p in probs])
    return Prediction(net.labels, classes, probs)


def check_network_gradients(net: MTMLNetwork, batch: Batch, n_samples: int = 200,
                            seed: int = 0, h: float = 1e-5) -> float:
    return gradient_check(net.params, lambda: net.loss_and_grad(batch), n_samples, h, seed,
                          probe=lambda: net.probe(batch))
