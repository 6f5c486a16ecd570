"""Deterministic simulation of the verification flow."""
from .engine import (
    DAY,
    HOUR,
    Channels,
    ChannelUnavailable,
    EventLoop,
    LedgerEvent,
    RunLedger,
    SimClock,
    rng_stream,
)
from .scenario import ConfigError, load_scenario, run_scenario, run_world, validate
from .world import World

__all__ = [
    "DAY", "HOUR", "ChannelUnavailable", "Channels", "ConfigError", "EventLoop", "LedgerEvent", "RunLedger",
    "SimClock", "World", "load_scenario", "rng_stream", "run_scenario", "run_world", "validate",
]
