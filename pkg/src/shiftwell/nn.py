"""Small dense-network substrate in float64 numpy.

Layers keep their parameters as plain arrays so a network can expose a
single ordered ``name -> array`` mapping to the optimizer, the gradient
checker and the weight container.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import DataError, InvalidClass, ShapeMismatch
from .io import atomic_write_bytes

CONV_CHANNELS = 32


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def he_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class Conv1DLayer:
    """Row-wise 1-D convolution: each kernel spans the whole feature vector,
    so every kernel yields one output channel per input row."""

    kernels: np.ndarray  # (channels, width)
    bias: np.ndarray     # (channels,)

    @classmethod
    def init(cls, width: int, rng: np.random.Generator, channels: int = CONV_CHANNELS):
        return cls(he_uniform(rng, width, (channels, width)), np.zeros(channels))

    @property
    def width(self) -> int:
        return self.kernels.shape[1]


@dataclass
class DenseLayer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray    # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "identity", "softmax"):
            raise ValueError(f"unknown activation {self.activation!r}")


def _check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values produced by {where}")
    return x


def conv1d_preactivation(layer: Conv1DLayer, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != layer.width:
        raise ShapeMismatch(f"conv expects width {layer.width}, got shape {x.shape}")
    return x @ layer.kernels.T + layer.bias


def conv1d_forward(layer: Conv1DLayer, x: np.ndarray) -> np.ndarray:
    return _check_finite(relu(conv1d_preactivation(layer, x)), "conv1d")


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != layer.weight.shape[0]:
        raise ShapeMismatch(f"dense expects {layer.weight.shape[0]} inputs, got shape {x.shape}")
    z = x @ layer.weight + layer.bias
    if layer.activation == "relu":
        z = relu(z)
    elif layer.activation == "softmax":
        z = softmax(z)
    return _check_finite(z, "dense")


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


# --- losses -------------------------------------------------------------------

@dataclass
class LossSpec:
    """``regression`` uses squared error, ``classification`` focal loss."""

    task: str = "regression"
    gamma: float = 2.0
    alpha: Optional[np.ndarray] = None  # per-class weights, default all ones

    def __post_init__(self):
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown loss task {self.task!r}")
        if self.gamma < 0:
            raise ValueError("focal gamma must be >= 0")
        if self.alpha is not None:
            self.alpha = np.asarray(self.alpha, dtype=np.float64)
            if np.any(self.alpha <= 0):
                raise ValueError("focal alpha must be positive")


def squared_error_terms(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-element squared error and its gradient."""
    diff = pred - target
    return diff * diff, 2.0 * diff


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    sq, grad = squared_error_terms(pred, target)
    return float(sq.mean()), grad / pred.size


def focal_terms(logits: np.ndarray, targets: np.ndarray, gamma: float,
                alpha: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-row focal loss ``-alpha_t (1 - p_t)^gamma log p_t`` and its
    gradient with respect to the logits."""
    n, k = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ShapeMismatch(f"targets shape {targets.shape}, expected ({n},)")
    if np.any(targets < 0) or np.any(targets >= k) or not np.all(targets == np.floor(targets)):
        raise InvalidClass(f"class targets must be integers in [0, {k})")
    t = targets.astype(np.int64)
    rows = np.arange(n)
    logp = log_softmax(logits)
    p = np.exp(logp)
    logp_t = logp[rows, t]
    p_t = p[rows, t]
    a_t = np.ones(n) if alpha is None else alpha[t]
    one_minus = 1.0 - p_t
    loss = -a_t * one_minus ** gamma * logp_t
    # dL/dz_j = a_t [gamma (1-p_t)^(gamma-1) p_t log p_t - (1-p_t)^gamma] (1[j=t] - p_j)
    if gamma == 0:
        focal_term = np.zeros(n)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            focal_term = np.where(one_minus > 0,
                                  gamma * one_minus ** (gamma - 1.0) * p_t * logp_t, 0.0)
    coef = a_t * (focal_term - one_minus ** gamma)
    onehot = np.zeros_like(p)
    onehot[rows, t] = 1.0
    grad = coef[:, None] * (onehot - p)
    return loss, grad


def cross_entropy(logits, targets) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    loss, grad = focal_terms(logits, targets, 0.0)
    return float(loss.mean()), grad / len(loss)


def focal_loss(logits, targets, spec: LossSpec = LossSpec("classification")) -> tuple[float, np.ndarray]:
    """Batch-mean focal loss and its gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] not in (2, 3):
        raise ShapeMismatch(f"logits must be (batch, 2 or 3), got {logits.shape}")
    loss, grad = focal_terms(logits, targets, spec.gamma, spec.alpha)
    return float(loss.mean()), grad / len(loss)


# --- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        work = np.multiply(g, 1.0 - b1)
        m *= b1
        m += work
        np.multiply(g, g, out=work)
        work *= 1.0 - b2
        v *= b2
        v += work
        # p -= lr * (m / c1) / (sqrt(v / c2) + eps), without temporaries
        np.divide(v, c2, out=work)
        np.sqrt(work, out=work)
        work += state.eps
        np.divide(m, work, out=work)
        work *= state.lr / c1
        p -= work
    return params


# --- gradient checking ---------------------------------------------------------

def gradient_check(params: dict[str, np.ndarray],
                   loss_and_grad: Callable[[], tuple[float, dict[str, np.ndarray]]],
                   n_samples: int = 200, h: float = 1e-5, seed: int = 0,
                   probe: Optional[Callable[[], tuple[float, object]]] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Entries are drawn at random without replacement until ``n_samples``
    have been compared; the error of one entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.

    ``probe`` returns ``(loss, pattern)`` for the current parameters. When
    the patterns at ``+h`` and ``-h`` differ the difference straddles a
    kink, so that entry is skipped and another is drawn. Without a probe
    the loss from ``loss_and_grad`` is used and no entry is skipped.
    """
    _, grads = loss_and_grad()
    grads = {k: v.copy() for k, v in grads.items()}
    if probe is None:
        probe = lambda: (loss_and_grad()[0], None)  # noqa: E731
    index = [(name, i) for name, p in params.items() for i in range(p.size)]
    order = np.random.default_rng(seed).permutation(len(index))
    worst = 0.0
    checked = 0
    for pick in order:
        if checked >= n_samples:
            break
        name, i = index[pick]
        arr = params[name]  # may be a strided view, so index it in place
        pos = np.unravel_index(i, arr.shape)
        orig = arr[pos]
        arr[pos] = orig + h
        up, pat_up = probe()
        arr[pos] = orig - h
        down, pat_down = probe()
        arr[pos] = orig
        if pat_up != pat_down:
            continue
        checked += 1
        numeric = float((up - down) / (2.0 * h))
        analytic = float(grads[name][pos])
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


# --- weight container ------------------------------------------------------------
#
# Layout:  MAGIC | uint64 little-endian header length | UTF-8 JSON header |
#          parameter blocks, float64 little-endian, row-major, in header order.
# The header lists every block as {"name", "shape"}.

MAGIC = b"SHIFTWELL-NET\x00"
CONTAINER_VERSION = 1


def write_container(path, header: dict, blocks: dict[str, np.ndarray]) -> None:
    header = dict(header)
    header["container_version"] = CONTAINER_VERSION
    header["blocks"] = [{"name": k, "shape": list(v.shape)} for k, v in blocks.items()]
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = [MAGIC, struct.pack("<Q", len(raw)), raw]
    for v in blocks.values():
        payload.append(np.ascontiguousarray(v, dtype="<f8").tobytes(order="C"))
    atomic_write_bytes(path, b"".join(payload))


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise DataError(f"{path}: not a model container")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    if header.get("container_version") != CONTAINER_VERSION:
        raise DataError(f"{path}: unsupported container version {header.get('container_version')}")
    blocks = {}
    for spec in header["blocks"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        blocks[spec["name"]] = arr.astype(np.float64)
        pos += 8 * count
    if pos != len(data):
        raise DataError(f"{path}: trailing bytes after parameter blocks")
    return header, blocks
