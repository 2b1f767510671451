"""Retouching level estimation with learned multi-level token clustering."""

from mamkit.labels import Annotation, ManifestRecord, RetouchType
from mamkit.metrics import MetricsReport, aggregate, average_trials
from mamkit.model import MamConfig, MamNet
from mamkit.numeric import RngStream

__version__ = "0.1.0"

__all__ = [
    "Annotation",
    "ManifestRecord",
    "MamConfig",
    "MamNet",
    "MetricsReport",
    "RetouchType",
    "RngStream",
    "aggregate",
    "average_trials",
]
