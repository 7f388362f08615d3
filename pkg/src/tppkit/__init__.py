"""Toolkit for marked temporal point processes.

Classical Hawkes simulation and calibration, a small reverse-mode autodiff
engine, self-attention based neural event-sequence models, training with
cross-validation, and next-mark evaluation utilities.
"""

__version__ = "0.1.0"

from tppkit.data import Dataset, Event, EventSequence, StatsReport
from tppkit.hawkes import HawkesParams, PoissonParams

__all__ = [
    "Dataset",
    "Event",
    "EventSequence",
    "StatsReport",
    "HawkesParams",
    "PoissonParams",
    "__version__",
]
