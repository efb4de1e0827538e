"""Instrumented applications under test: a UDP probe and a capture tap."""

from .model import FLAVOURS, TAP_FLAVOURS, ZERO_COST, CostModel, ProbeFlavour
from .probe import (
    IntervalStats,
    ProbePacket,
    ReceiverStats,
    ancillary_report,
    define_probe_mps,
    parse_vanilla_csv,
    probe_config,
    run_probe_receiver,
    run_probe_sender,
    run_probe_sender_wall,
    send_schedule,
)
from .sim import VirtualClient, VirtualClock
from .tap import TAP_COLUMNS, define_tap_mps, parse_tap_csv, run_tap_reporter, tap_config

__all__ = [
    "FLAVOURS", "TAP_FLAVOURS", "ZERO_COST", "CostModel", "ProbeFlavour", "IntervalStats", "ProbePacket",
    "ReceiverStats", "ancillary_report", "define_probe_mps", "probe_config", "run_probe_receiver",
    "parse_vanilla_csv", "run_probe_sender", "run_probe_sender_wall", "send_schedule", "VirtualClient", "VirtualClock",
    "TAP_COLUMNS", "define_tap_mps", "parse_tap_csv", "run_tap_reporter", "tap_config",
]
