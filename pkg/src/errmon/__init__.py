"""errmon: a desk-scale erroneous-traffic monitor.

A filtering-switch model with static and per-flow filters and in-switch
anonymization, a flow-state detection engine classifying first packets as
benign or erroneous via a detection timeout, a batching control plane, a
collector with an optional impersonating TCP responder, and analytics over
the collected traffic. Everything runs on a deterministic virtual clock.
"""

from .core import (
    FlowKey,
    NetworkConfig,
    PacketRecord,
    Timers,
    classify_response,
    is_internal,
    make_flow_key,
)

__version__ = "0.1.0"

__all__ = [
    "FlowKey",
    "NetworkConfig",
    "PacketRecord",
    "Timers",
    "classify_response",
    "is_internal",
    "make_flow_key",
    "__version__",
]
