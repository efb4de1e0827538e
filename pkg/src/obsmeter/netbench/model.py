"""Flavours of the instrumented applications and the synthetic CPU cost model."""

from __future__ import annotations

from dataclasses import dataclass

FLAVOURS = ("vanilla-csv", "legacy-mp", "advanced-mp", "advanced-filtered")
TAP_FLAVOURS = ("csv", "mp", "mp-filtered")
THREADS = ("off", "on")


@dataclass(frozen=True)
class ProbeFlavour:
    name: str
    threads: bool = False

    def __post_init__(self):
        if self.name not in FLAVOURS:
            raise ValueError(f"unknown probe flavour {self.name!r}; expected one of {FLAVOURS}")

    @property
    def instrumented(self) -> bool:
        return self.name != "vanilla-csv"

    @property
    def per_packet(self) -> bool:
        return self.name in ("advanced-mp", "advanced-filtered")

    def __str__(self):
        return f"{self.name}:{'threads' if self.threads else 'nothreads'}"


@dataclass(frozen=True)
class CostModel:
    """Per-datagram CPU costs of the sending loop, in microseconds.

    Without threads the sender pays for instrumentation inline; with threads
    it pays a handoff and the instrumentation overlaps with the I/O wait, so
    only the excess of instrumentation over I/O stays on the sending path.
    The defaults make advanced-mp CPU-bound at 100 Mbit/s with 1498 B
    datagrams (interval 119.84 us) while every other flavour keeps up.
    """

    send_us: float = 20.0
    io_wait_us: float = 24.0
    handoff_us: float = 2.0
    inject_us: float = 1.2
    frame_us: float = 120.0
    noise_us: float = 2.0  # mean of an exponential per-datagram extra
    stall_rate: float = 20.0  # preemptions per second
    stall_mean_us: float = 400.0
    scale: float = 1.0  # multiplies every cost; 0 gives an ideal sender

    def instrumentation_us(self, flavour: ProbeFlavour) -> float:
        if flavour.name == "advanced-mp":
            return self.inject_us + self.frame_us
        if flavour.name == "advanced-filtered":
            return self.inject_us
        return 0.0

    def cycle_us(self, flavour: ProbeFlavour) -> float:
        instr = self.instrumentation_us(flavour)
        if flavour.threads:
            c = self.send_us + self.handoff_us + max(self.io_wait_us, instr)
        else:
            c = self.send_us + self.io_wait_us + instr
        return c * self.scale

    def saturation_rate(self, flavour: ProbeFlavour, size: int) -> float:
        """Highest sending rate in bits/s the loop sustains, ignoring noise."""
        c = self.cycle_us(flavour)
        return float("inf") if c == 0 else size * 8 / (c * 1e-6)


ZERO_COST = CostModel(scale=0.0, noise_us=0.0, stall_rate=0.0)
