"""Analysis, simulation and tuning of the DS-CSMA/CA double-station MAC protocol."""

from .core import (
    CounterIndex,
    FrameTimings,
    PartnerMap,
    ProtocolParams,
    channel_times,
    partner_of,
    validate_partner_map,
)

__all__ = [
    "CounterIndex",
    "FrameTimings",
    "PartnerMap",
    "ProtocolParams",
    "channel_times",
    "partner_of",
    "validate_partner_map",
]

__version__ = "0.1.0"
