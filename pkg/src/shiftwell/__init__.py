"""Next-day wellbeing forecasting for shift workers from wearable and survey data.

Modules
-------
timeseries, features : minute-level streams to daily feature vectors.
cohort_stats : nurse vs doctor comparisons and label correlations.
nn, model : layers, losses, Adam and the role-branched multilabel network.
harness : repeated-split evaluation with grid search and significance tests.
synth : calibrated synthetic cohorts with a planted signal.
introspection : conv-layer feature importance.
cli : the ``shiftwell`` command.
"""

from .errors import ConfigError, DataError, ShiftwellError, UsageError
from .schema import LABELS, ROLES, SCHEMA

__all__ = ["ConfigError", "DataError", "ShiftwellError", "UsageError", "LABELS", "ROLES", "SCHEMA"]
__version__ = "0.1.0"
