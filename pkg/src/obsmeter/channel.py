"""Deterministic two-hop path (sender -> router -> receiver) and a shared medium.

All times are kept as integer microseconds so that replaying the same
schedule reproduces traces byte for byte and timestamp differences are exact.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import OversizePacket, UnknownFlow

JITTER_MODELS = ("none", "uniform", "gaussian")
TRACE_COLUMNS = ("packet_id", "size", "t_snd", "t_rtr_in", "t_rtr_eg", "t_rcv")


def serialization_us(size: int, capacity_bps: float) -> int:
    return int(round(size * 8 * 1e6 / capacity_bps))


@dataclass(frozen=True)
class PathConfig:
    capacity_bps: float
    base_delay: float = 0.0  # per hop, seconds
    jitter_model: str = "none"
    jitter: float = 0.0  # ±d for uniform, sigma for gaussian, seconds
    loss: float = 0.0
    mtu: int = 1500
    seed: int = 0

    def __post_init__(self):
        if self.capacity_bps <= 0:
            raise ValueError("capacity must be positive")
        if self.jitter_model not in JITTER_MODELS:
            raise ValueError(f"jitter model must be one of {JITTER_MODELS}")
        if not 0.0 <= self.loss <= 1.0:
            raise ValueError("loss probability must lie in [0, 1]")
        if self.base_delay < 0 or self.jitter < 0:
            raise ValueError("delays must be non-negative")
        if self.mtu < 1:
            raise ValueError("mtu must be positive")


@dataclass(frozen=True)
class TraceRecord:
    packet_id: int
    size: int
    t_snd_us: int
    t_rtr_in_us: int
    t_rtr_eg_us: int
    t_rcv_us: Optional[int]  # None when lost

    @property
    def delivered(self) -> bool:
        return self.t_rcv_us is not None

    @property
    def t_snd(self) -> float:
        return self.t_snd_us / 1e6

    @property
    def t_rtr_in(self) -> float:
        return self.t_rtr_in_us / 1e6

    @property
    def t_rtr_eg(self) -> float:
        return self.t_rtr_eg_us / 1e6

    @property
    def t_rcv(self) -> Optional[float]:
        return None if self.t_rcv_us is None else self.t_rcv_us / 1e6


class Path:
    """Sender link, router FIFO and receiver link, each at `capacity_bps`.

    A packet's tap timestamps mark the instant its last bit passes the tap.
    Delay noise is applied on the sender->router hop only and never reorders
    packets, so router egress and receiver see identical transit variation.
    Loss is drawn on the router->receiver hop.
    """

    def __init__(self, cfg: PathConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.delay_us = int(round(cfg.base_delay * 1e6))
        self.records: list[TraceRecord] = []
        self._link_free = 0
        self._last_in = 0
        self._router_free = 0

    def _noise_us(self) -> int:
        m = self.cfg.jitter_model
        if m == "none" or self.cfg.jitter == 0:
            return 0
        if m == "uniform":
            return int(round(self.rng.uniform(-self.cfg.jitter, self.cfg.jitter) * 1e6))
        return int(round(self.rng.normal(0.0, self.cfg.jitter) * 1e6))

    def send_packet(self, size: int, now: float | int, *, now_in_us: bool = False) -> TraceRecord:
        if size > self.cfg.mtu:
            raise OversizePacket(f"{size} B exceeds mtu {self.cfg.mtu} B")
        if size < 1:
            raise ValueError("packet size must be positive")
        t_snd = int(now) if now_in_us else int(round(now * 1e6))
        ser = serialization_us(size, self.cfg.capacity_bps)
        start = max(t_snd, self._link_free)
        self._link_free = start + ser
        t_in = start + ser + max(0, self.delay_us + self._noise_us())
        t_in = max(t_in, self._last_in)
        self._last_in = t_in
        eg_start = max(t_in, self._router_free)
        t_eg = eg_start + ser
        self._router_free = t_eg
        lost = self.cfg.loss > 0 and self.rng.random() < self.cfg.loss
        rec = TraceRecord(len(self.records), size, t_snd, t_in, t_eg, None if lost else t_eg + self.delay_us)
        self.records.append(rec)
        return rec


def send_packet(path: Path, size: int, now: float) -> TraceRecord:
    return path.send_packet(size, now)


def _fmt_us(us: Optional[int]) -> str:
    if us is None:
        return "-"
    return "%d.%06d" % divmod(us, 1_000_000)


def export_trace(records: Iterable[TraceRecord], out=None) -> str:
    """TAB-separated trace table; written to `out` (path or file) if given."""
    buf = io.StringIO()
    buf.write("\t".join(TRACE_COLUMNS) + "\n")
    for r in records:
        buf.write(
            f"{r.packet_id}\t{r.size}\t{_fmt_us(r.t_snd_us)}\t{_fmt_us(r.t_rtr_in_us)}\t"
            f"{_fmt_us(r.t_rtr_eg_us)}\t{_fmt_us(r.t_rcv_us)}\n"
        )
    text = buf.getvalue()
    if out is not None:
        if hasattr(out, "write"):
            out.write(text)
        else:
            with open(out, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
    return text


def _parse_us(text: str) -> Optional[int]:
    if text == "-":
        return None
    whole, _, frac = text.partition(".")
    return int(whole) * 1_000_000 + int(frac.ljust(6, "0")[:6])


def load_trace(path_or_text) -> list[TraceRecord]:
    if "\n" in str(path_or_text):
        text = str(path_or_text)
    else:
        with open(path_or_text, encoding="utf-8") as fh:
            text = fh.read()
    lines = text.splitlines()
    if not lines or tuple(lines[0].split("\t")) != TRACE_COLUMNS:
        raise ValueError("not a trace table")
    out = []
    for line in lines[1:]:
        c = line.split("\t")
        out.append(TraceRecord(int(c[0]), int(c[1]), _parse_us(c[2]), _parse_us(c[3]), _parse_us(c[4]), _parse_us(c[5])))
    return out


# shared medium ----------------------------------------------------------------


@dataclass
class _Flow:
    name: str
    rate_bps: Optional[float]
    bucket_bytes: float
    tokens: float
    stamp_us: int = 0
    granted_bytes: int = 0
    grants: int = 0
    completions: list[tuple[int, int]] = field(default_factory=list)  # (end_us, bytes)


class SharedMedium:
    """One transmission at a time over a medium of `capacity_bps`.

    Grants are served in call order; each transmission occupies the medium for
    its serialization time plus a fixed per-transmission overhead (standing in
    for contention and framing costs) plus an optional random extra drawn
    uniformly from ``[0, overhead_jitter_us]``. A flow registered with a rate
    is additionally held to a token bucket of that rate.
    """

    def __init__(self, capacity_bps: float, overhead_us: int = 0, overhead_jitter_us: int = 0, seed: int = 0):
        if capacity_bps <= 0:
            raise ValueError("capacity must be positive")
        self.capacity_bps = capacity_bps
        self.overhead_us = int(overhead_us)
        self.overhead_jitter_us = int(overhead_jitter_us)
        self.rng = np.random.default_rng(seed)
        self.flows: dict[str, _Flow] = {}
        self.busy_until = 0

    def register(self, flow: str, rate_bps: Optional[float] = None, bucket_bytes: float = 3000.0) -> None:
        self.flows[flow] = _Flow(flow, rate_bps, bucket_bytes, bucket_bytes)

    def _flow(self, name: str) -> _Flow:
        try:
            return self.flows[name]
        except KeyError:
            raise UnknownFlow(name) from None

    def grant(self, flow: str, nbytes: int, now_us: int) -> int:
        """Transmit `nbytes` for `flow`, requested at `now_us`; returns the completion time."""
        f = self._flow(flow)
        start = max(int(now_us), self.busy_until)
        if f.rate_bps is not None:
            # refill up to `start`, then wait for enough tokens
            f.tokens = min(f.bucket_bytes, f.tokens + (start - f.stamp_us) * f.rate_bps / 8e6)
            f.stamp_us = start
            if f.tokens < nbytes:
                wait = int(np.ceil((nbytes - f.tokens) * 8e6 / f.rate_bps))
                start += wait
                f.tokens += wait * f.rate_bps / 8e6
                f.stamp_us = start
            f.tokens -= nbytes
        extra = int(self.rng.integers(0, self.overhead_jitter_us + 1)) if self.overhead_jitter_us else 0
        end = start + serialization_us(nbytes, self.capacity_bps) + self.overhead_us + extra
        self.busy_until = end
        f.granted_bytes += nbytes
        f.grants += 1
        f.completions.append((end, nbytes))
        return end

    def throughput(self, flow: str, t0_us: int, t1_us: int) -> float:
        """Bytes/s of `flow` completed within [t0, t1)."""
        f = self._flow(flow)
        total = sum(b for end, b in f.completions if t0_us <= end < t1_us)
        return total * 1e6 / (t1_us - t0_us)


def shared_medium_grant(medium: SharedMedium, flow: str, nbytes: int, now_us: int) -> int:
    return medium.grant(flow, nbytes, now_us)


def run_saturating(medium: SharedMedium, sizes: dict[str, int], duration: float) -> dict[str, float]:
    """Closed-loop saturating flows: each requests its next transmission the
    moment the previous one completes. Returns bytes/s per flow."""
    end_us = int(round(duration * 1e6))
    ready = {name: 0 for name in sizes}
    order = list(sizes)
    last = None
    while True:
        t = min(ready.values())
        if t >= end_us:
            break
        due = [n for n in order if ready[n] == t]
        # ties go to the flow not served last
        pick = next((n for n in due if n != last), due[0])
        ready[pick] = medium.grant(pick, sizes[pick], t)
        last = pick
    return {name: medium.throughput(name, 0, end_us) for name in sizes}


@dataclass
class ContentionResult:
    experiment_bytes: int
    experiment_packets: int
    report_count: int
    report_bytes: int
    duration: float

    @property
    def throughput(self) -> float:
        """Experiment goodput in bytes/s."""
        return self.experiment_bytes / self.duration


def run_contention(
    medium: SharedMedium,
    packet_size: int,
    duration: float,
    on_delivery: Callable[[int, int], Sequence[int]],
    reports_on_medium: bool = True,
) -> ContentionResult:
    """A saturating experiment flow sharing `medium` with the reports it triggers.

    `on_delivery(t_us, size)` is called for each delivered experiment packet
    and returns the sizes (bytes) of report transmissions produced at that
    instant. Those are queued on the measurement flow, or carried elsewhere
    when `reports_on_medium` is False (the dedicated-channel bound).
    """
    for name in ("experiment", "measurement"):
        if name not in medium.flows:
            medium.register(name)
    end_us = int(round(duration * 1e6))
    exp_ready = 0
    queue: list[tuple[int, int]] = []  # (ready_us, bytes)
    head = 0
    last = None
    exp_bytes = exp_pkts = n_reports = rep_bytes = 0
    while True:
        rep_ready = queue[head][0] if head < len(queue) else None
        if rep_ready is not None and (rep_ready < exp_ready or (rep_ready == exp_ready and last != "measurement")):
            t, size = queue[head]
            head += 1
            if t >= end_us:
                break
            medium.grant("measurement", size, t)
            last = "measurement"
            continue
        if exp_ready >= end_us:
            break
        done = medium.grant("experiment", packet_size, exp_ready)
        last = "experiment"
        exp_ready = done
        if done >= end_us:
            break
        exp_bytes += packet_size
        exp_pkts += 1
        for size in on_delivery(done, packet_size):
            n_reports += 1
            rep_bytes += size
            if reports_on_medium:
                queue.append((done, size))
    return ContentionResult(exp_bytes, exp_pkts, n_reports, rep_bytes, duration)
