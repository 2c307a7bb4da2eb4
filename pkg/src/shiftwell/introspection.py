"""Feature importance read off the convolutional layer of a trained network.

Two views are provided: the mean absolute kernel weight each input feature
receives across channels, and the Pearson correlation between every input
feature and every conv output channel, flagged with a Bonferroni threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .cohort_stats import ALPHA, pearson_r
from .errors import DegenerateVariance, ShapeMismatch, TooFewSamples, UntrainedModel
from .model import MTMLNetwork
from .nn import conv1d_forward, conv1d_preactivation
from .schema import SCHEMA


def _require_trained(net: MTMLNetwork) -> None:
    if not net.trained:
        raise UntrainedModel("importance analysis needs a trained network")


def kernel_importance(kernels: np.ndarray) -> np.ndarray:
    """Mean absolute kernel entry per input feature.

    ``kernels`` has shape (channels, features); the result has one value per
    feature and does not depend on channel order.
    """
    kernels = np.asarray(kernels, dtype=np.float64)
    if kernels.ndim != 2 or kernels.shape[0] == 0:
        raise ShapeMismatch("kernels must be a non-empty (channels, features) matrix")
    return np.abs(kernels).mean(axis=0)


def conv_weight_importance(net: MTMLNetwork) -> np.ndarray:
    """Per-feature importance of a trained network's conv layer."""
    _require_trained(net)
    return kernel_importance(net.params["conv.kernels"])


@dataclass
class CorrelationResult:
    r: np.ndarray            # (features, channels); NaN where a column is constant
    p_value: np.ndarray      # same shape as ``r``
    significant: np.ndarray  # p < threshold, False where r is missing
    threshold: float
    n_rows: int


def _correlate(x: np.ndarray, out: np.ndarray, alpha: float) -> CorrelationResult:
    n, f = x.shape
    if n < 3:
        raise TooFewSamples("correlation analysis needs at least 3 feature rows")
    c = out.shape[1]
    r = np.full((f, c), np.nan)
    p = np.full((f, c), np.nan)
    for j in range(f):
        for k in range(c):
            try:
                r[j, k], p[j, k], _ = pearson_r(x[:, j], out[:, k])
            except DegenerateVariance:
                pass
    threshold = alpha / f
    significant = np.isfinite(p) & (p < threshold)
    return CorrelationResult(r, p, significant, threshold, n)


def cnn_output_correlation(net: MTMLNetwork, features, preprocessor=None,
                           activation: bool = True, alpha: float = ALPHA) -> CorrelationResult:
    """Correlate each input feature with each conv output channel.

    Parameters
    ----------
    net : trained network.
    features : (rows, features) matrix. When ``preprocessor`` is given the
        matrix is raw and is transformed first; otherwise it must already be
        on the scale the network was trained on.
    activation : correlate the rectified channel outputs (the layer's output)
        when True, the pre-activations when False.
    alpha : family-wise level; each test uses ``alpha / n_features``.

    Constant features and constant (for example dead) channels give missing
    correlations rather than errors.
    """
    _require_trained(net)
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.config.n_features:
        raise ShapeMismatch(f"expected {net.config.n_features} feature columns, got shape {x.shape}")
    if preprocessor is not None:
        x = preprocessor.transform(x)
    layer = net.conv_layer()
    out = conv1d_forward(layer, x) if activation else conv1d_preactivation(layer, x)
    return _correlate(x, out, alpha)


@dataclass
class ImportanceReport:
    feature_names: tuple[str, ...]
    importance: np.ndarray
    correlation: Optional[CorrelationResult] = None

    @property
    def ranking(self) -> list[str]:
        """Feature names by decreasing importance, ties in schema order."""
        order = np.argsort(-self.importance, kind="stable")
        return [self.feature_names[i] for i in order]

    def top(self, k: int) -> list[str]:
        return self.ranking[:k]

    def to_frame(self) -> pd.DataFrame:
        order = np.argsort(-self.importance, kind="stable")
        rank = np.empty(len(order), dtype=int)
        rank[order] = np.arange(1, len(order) + 1)
        df = pd.DataFrame({"feature": list(self.feature_names), "importance": self.importance,
                           "rank": rank})
        if self.correlation is not None:
            r = self.correlation.r
            absr = np.abs(r)
            has = np.isfinite(r).any(axis=1)
            df["max_abs_r"] = np.where(has, np.nanmax(np.where(np.isfinite(absr), absr, -1), axis=1),
                                       np.nan)
            df["n_significant_channels"] = self.correlation.significant.sum(axis=1)
        return df.sort_values("rank", kind="stable").reset_index(drop=True)

    def correlation_frame(self) -> pd.DataFrame:
        """Long table with one row per (feature, channel) pair."""
        if self.correlation is None:
            raise ValueError("report was built without feature rows")
        c = self.correlation
        f, k = c.r.shape
        return pd.DataFrame({
            "feature": np.repeat(list(self.feature_names), k),
            "channel": np.tile(np.arange(k), f),
            "r": c.r.ravel(),
            "p_value": c.p_value.ravel(),
            "significant": c.significant.ravel(),
            "threshold": c.threshold,
        })


def importance_report(net: MTMLNetwork, features=None, preprocessor=None,
                      feature_names: Optional[Sequence[str]] = None) -> ImportanceReport:
    """Kernel importance plus, when ``features`` is given, the correlation table."""
    importance = conv_weight_importance(net)
    names = tuple(feature_names) if feature_names is not None else tuple(SCHEMA.names)
    if len(names) != len(importance):
        names = tuple(f"f{j}" for j in range(len(importance)))
    corr = None
    if features is not None:
        corr = cnn_output_correlation(net, features, preprocessor)
    return ImportanceReport(names, importance, corr)
