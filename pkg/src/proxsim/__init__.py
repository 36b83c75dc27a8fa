"""Dual-radio proximity-tag protocol simulator.

BLE-based neighbor discovery triggers on-demand UWB two-way ranging;
the package simulates the protocol deterministically, models per-state
energy draw calibrated to measured averages, and post-processes range
streams into continuous-contact analytics.
"""

from .simulator import VERSION as __version__

__all__ = ["__version__"]
