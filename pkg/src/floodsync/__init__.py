"""Flooding time synchronization for wireless sensor networks, at desk scale.

A deterministic discrete-event simulator plus the estimator and protocol
library needed to study rapid-flooding multi-broadcast time synchronization
with real-time delay compensation, and the classic flooding baselines it is
compared against (FTSP, FCSA-lite, PulseSync, RMTS).
"""

__version__ = "0.1.0"

from floodsync.clocks import HardwareClock, LogicalClock, OscillatorModel
from floodsync.estimators import (
    BroadcastBatch,
    DelayDecomposition,
    OffsetEstimate,
    SkewEstimate,
)

__all__ = [
    "__version__",
    "HardwareClock",
    "LogicalClock",
    "OscillatorModel",
    "BroadcastBatch",
    "DelayDecomposition",
    "OffsetEstimate",
    "SkewEstimate",
]
