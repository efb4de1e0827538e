"""UDP probe analog: a paced sender and an interval-reporting receiver.

Virtual-time runs push packets through :class:`obsmeter.channel.Path` and
drive real measurement libraries on a :class:`VirtualClock`; the sender's
CPU cost per datagram comes from a :class:`CostModel`. `run_probe_sender_wall`
runs the same loop against the wall clock with genuine busy-work.
"""

from __future__ import annotations

import io
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..channel import Path, TraceRecord
from ..client import Transport, start
from ..config import parse_config
from ..filters import JitterEstimator
from ..measurement import MeasurementLibrary
from .model import CostModel, ProbeFlavour
from .sim import VirtualClient, VirtualClock

PACKET_SIZE = 1498
VANILLA_COLUMNS = "t0,t1,transferred,throughput,lost,sent,jitter"


def define_probe_mps(lib: MeasurementLibrary) -> None:
    lib.define_mp("application", [("version", "text"), ("argv", "text"), ("role", "text")])
    lib.define_mp("transfer", [("begin", "float64"), ("end", "float64"), ("size", "int64")])
    lib.define_mp("losses", [("begin", "float64"), ("end", "float64"), ("lost", "int64"), ("sent", "int64")])
    lib.define_mp("jitter", [("begin", "float64"), ("end", "float64"), ("jitter", "float64")])
    lib.define_mp("packets", [("id", "int64"), ("size", "int64"), ("t_snd", "float64"), ("t_rcv", "float64")])


def probe_config(flavour: ProbeFlavour, role: str, interval: float = 0.5, experiment: str = "probe", server: str = "s") -> str:
    """RunConfig text for one side (``sender`` or ``receiver``) of the probe."""
    lines = [f"experiment {experiment}", f"node {role}", "app probe", f"server {server}", "enable application"]
    if flavour.name == "legacy-mp":
        lines += ["enable transfer", "enable losses", "enable jitter"]
    elif flavour.name == "advanced-mp":
        lines += ["enable packets"]
    elif flavour.name == "advanced-filtered":
        lines += [f"filter bytes = sum(packets.size) every {interval:g}s"]
        if role == "receiver":
            lines += [f"filter pkt_jitter = jitter(packets.t_snd, t_rcv) every {interval:g}s"]
    return "\n".join(lines) + "\n"


def ancillary_report(lib: MeasurementLibrary, version: Optional[str], argv: Sequence[str], role: str = "") -> None:
    """One-shot `application` sample describing the running program."""
    lib.inject("application", [version or "", " ".join(argv), role])


@dataclass(frozen=True)
class ProbePacket:
    packet_id: int
    size: int
    t_snd: float
    t_rcv: Optional[float] = None


@dataclass
class SenderLog:
    flavour: ProbeFlavour
    set_rate: float
    duration: float
    records: list[TraceRecord]

    @property
    def packets(self) -> list[ProbePacket]:
        return [ProbePacket(r.packet_id, r.size, r.t_snd, r.t_rcv) for r in self.records]

    @property
    def achieved_rate(self) -> float:
        """Bits/s put on the wire over the run."""
        return sum(r.size for r in self.records) * 8 / self.duration


def send_schedule(
    rate_bps: float,
    duration: float,
    flavour: ProbeFlavour,
    costs: CostModel,
    rng: np.random.Generator,
    size: int = PACKET_SIZE,
) -> np.ndarray:
    """Integer-microsecond emission times of a paced sender.

    Datagram p is due at p * interval; the loop sends it at the later of its
    due time and the moment the previous datagram's CPU work finished, so a
    sender that falls behind catches up in bursts while it can.
    """
    if rate_bps <= 0:
        raise ValueError("rate must be positive")
    interval = size * 8 * 1e6 / rate_bps
    end = duration * 1e6
    base = costs.cycle_us(flavour)
    step = max(min(interval, base), 1.0)
    n_max = int(end / step) + 2
    noise = rng.exponential(costs.noise_us, n_max) if costs.noise_us > 0 else np.zeros(n_max)
    if costs.stall_rate > 0:
        p_stall = min(1.0, costs.stall_rate * max(interval, base) * 1e-6)
        stalls = np.where(rng.random(n_max) < p_stall, rng.exponential(costs.stall_mean_us, n_max), 0.0)
    else:
        stalls = np.zeros(n_max)
    cost = base + noise + stalls
    out = []
    free = 0.0
    p = 0
    while p < n_max:
        t = max(int(round(p * interval)), int(round(free)))
        if t >= end:
            break
        out.append(t)
        free = t + cost[p]
        p += 1
    return np.asarray(out, dtype=np.int64)


def run_probe_sender(
    path: Path,
    rate_bps: float,
    duration: float,
    flavour: ProbeFlavour,
    costs: CostModel,
    seed: int = 0,
    client: Optional[VirtualClient] = None,
    size: int = PACKET_SIZE,
    report_interval: float = 0.5,
) -> SenderLog:
    """Emit the probe's datagrams into `path`; instrument them through `client`."""
    rng = np.random.default_rng(seed)
    times = send_schedule(rate_bps, duration, flavour, costs, rng, size)
    records = []
    clock = client.clock if client is not None else None
    lib = client.library if client is not None else None
    per_packet = lib is not None and flavour.per_packet
    legacy = lib is not None and flavour.name == "legacy-mp"
    interval_us = int(round(report_interval * 1e6))
    next_report, sent_bytes = interval_us, 0
    for t in times:
        t = int(t)
        rec = path.send_packet(size, t, now_in_us=True)
        records.append(rec)
        if legacy:
            while t >= next_report:
                clock.set_us(next_report)
                lib.inject("transfer", [(next_report - interval_us) / 1e6, next_report / 1e6, sent_bytes])
                sent_bytes = 0
                next_report += interval_us
            sent_bytes += size
        elif per_packet:
            clock.set_us(t)
            lib.inject("packets", [rec.packet_id, size, rec.t_snd, 0.0])
            client.advance()
    return SenderLog(flavour, rate_bps, duration, records)


@dataclass
class ReceiverStats:
    t0: float
    t1: float
    transferred: int
    throughput: float  # bytes/s
    lost: int
    sent: int
    jitter: float

    def csv(self) -> str:
        return "%.6f,%.6f,%d,%r,%d,%d,%r" % (
            self.t0, self.t1, self.transferred, self.throughput, self.lost, self.sent, self.jitter,
        )


class IntervalStats:
    """Receiver bookkeeping over consecutive report intervals.

    Packets are binned by receive time. `sent` in an interval is the advance
    of the highest packet id seen; `lost` is what of that advance never
    arrived. Jitter is the running estimate at the interval's end.
    """

    def __init__(self, interval: float, start: float = 0.0):
        if interval <= 0:
            raise ValueError("report interval must be positive")
        self.interval_us = int(round(interval * 1e6))
        self.start_us = int(round(start * 1e6))
        self.k = 0
        self.jitter = JitterEstimator()
        self.prev_max = -1
        self._reset()

    def _reset(self):
        self.bytes = 0
        self.received = 0
        self.max_id = self.prev_max

    def _close(self) -> ReceiverStats:
        t0 = (self.start_us + self.k * self.interval_us) / 1e6
        t1 = (self.start_us + (self.k + 1) * self.interval_us) / 1e6
        sent = self.max_id - self.prev_max
        stats = ReceiverStats(
            t0, t1, self.bytes, self.bytes * 1e6 / self.interval_us,
            max(sent - self.received, 0), sent, self.jitter.jitter,
        )
        self.prev_max = self.max_id
        self.k += 1
        self._reset()
        return stats

    def add(self, packet_id: int, size: int, t_snd: float, t_rcv: float) -> list[ReceiverStats]:
        done = []
        k = (int(round(t_rcv * 1e6)) - self.start_us) // self.interval_us
        while self.k < k:
            done.append(self._close())
        self.bytes += size
        self.received += 1
        if packet_id > self.max_id:
            self.max_id = packet_id
        self.jitter.update(t_snd, t_rcv)
        return done

    def finish(self, end: float) -> list[ReceiverStats]:
        """Close every interval that ends at or before `end`."""
        done = []
        end_us = int(round(end * 1e6))
        while self.start_us + (self.k + 1) * self.interval_us <= end_us:
            done.append(self._close())
        return done


def parse_vanilla_csv(text: str) -> list[ReceiverStats]:
    lines = text.strip().splitlines()
    if not lines or lines[0] != VANILLA_COLUMNS:
        raise ValueError("not a probe CSV report")
    out = []
    for line in lines[1:]:
        c = line.split(",")
        out.append(ReceiverStats(float(c[0]), float(c[1]), int(c[2]), float(c[3]), int(c[4]), int(c[5]), float(c[6])))
    return out


@dataclass
class ReceiverOutput:
    flavour: ProbeFlavour
    stats: list[ReceiverStats] = field(default_factory=list)  # local view, every flavour
    csv: Optional[str] = None  # vanilla-csv only
    samples: int = 0  # samples injected into the library


def run_probe_receiver(
    records: Sequence[TraceRecord],
    flavour: ProbeFlavour,
    report_interval: float = 0.5,
    duration: Optional[float] = None,
    client: Optional[VirtualClient] = None,
) -> ReceiverOutput:
    """Replay delivered datagrams into the receiver in arrival order."""
    if report_interval < 0.5:
        raise ValueError("report interval must be at least 0.5 s")
    out = ReceiverOutput(flavour)
    stats = IntervalStats(report_interval)
    csv = io.StringIO() if flavour.name == "vanilla-csv" else None
    if csv is not None:
        csv.write(VANILLA_COLUMNS + "\n")
    lib = client.library if client is not None and flavour.instrumented else None
    clock = client.clock if client is not None else None
    legacy = lib is not None and flavour.name == "legacy-mp"
    per_packet = lib is not None and flavour.per_packet

    def report(done: list[ReceiverStats]):
        for s in done:
            out.stats.append(s)
            if csv is not None:
                csv.write(s.csv() + "\n")
            elif legacy:
                lib.inject("transfer", [s.t0, s.t1, s.transferred])
                lib.inject("losses", [s.t0, s.t1, s.lost, s.sent])
                lib.inject("jitter", [s.t0, s.t1, s.jitter])
                out.samples += 3

    delivered = sorted((r for r in records if r.t_rcv_us is not None), key=lambda r: (r.t_rcv_us, r.packet_id))
    for r in delivered:
        if clock is not None:
            clock.set_us(r.t_rcv_us)
        report(stats.add(r.packet_id, r.size, r.t_snd, r.t_rcv))
        if per_packet:
            lib.inject("packets", [r.packet_id, r.size, r.t_snd, r.t_rcv])
            out.samples += 1
        if client is not None:
            client.advance()
    if duration is not None:
        if clock is not None:
            clock.now = max(clock.now, duration)
        report(stats.finish(duration))
    if csv is not None:
        out.csv = csv.getvalue()
    return out


# wall-clock mode -------------------------------------------------------------


class DiscardTransport(Transport):
    def __init__(self):
        self.bytes = 0

    def handshake(self, header: bytes) -> None:
        pass

    def send(self, data: bytes) -> None:
        self.bytes += len(data)


class DiscardEndpoint:
    def open(self) -> DiscardTransport:
        return DiscardTransport()


def _spin(us: float) -> None:
    if us <= 0:
        return
    end = time.perf_counter() + us * 1e-6
    while time.perf_counter() < end:
        pass


@dataclass
class WallSenderLog:
    flavour: ProbeFlavour
    set_rate: float
    sent: int
    elapsed: float
    size: int
    dropped: int

    @property
    def achieved_rate(self) -> float:
        return self.sent * self.size * 8 / self.elapsed


def run_probe_sender_wall(
    rate_bps: float,
    duration: float,
    flavour: ProbeFlavour,
    size: int = PACKET_SIZE,
    busy_us: float = 0.0,
    endpoint=None,
) -> WallSenderLog:
    """Paced sender on the real clock with `busy_us` of synthetic work per sample.

    Datagrams are built but not put on a socket; reports go to `endpoint`
    (discarded by default). With threads the instrumentation runs on a
    second thread fed through a queue.
    """
    lib = None
    reporter = None
    if flavour.instrumented:
        lib = MeasurementLibrary()
        define_probe_mps(lib)
        cfg = parse_config(probe_config(flavour, "sender"))
        reporter = start(lib, cfg, endpoints={"s": endpoint or DiscardEndpoint()})
        ancillary_report(lib, "wall", ["--rate", str(rate_bps)], "sender")

    def instrument(pid: int, t: float) -> None:
        if flavour.per_packet:
            lib.inject("packets", [pid, size, t, 0.0])
            _spin(busy_us)

    work: Optional[queue.SimpleQueue] = None
    worker = None
    if lib is not None and flavour.threads:
        work = queue.SimpleQueue()

        def drain():
            while True:
                item = work.get()
                if item is None:
                    return
                instrument(*item)

        worker = threading.Thread(target=drain, daemon=True)
        worker.start()

    interval = size * 8 / rate_bps
    pad = bytes(size - 8)
    t0 = time.perf_counter()
    p = 0
    while True:
        due = t0 + p * interval
        now = time.perf_counter()
        if due - t0 >= duration:
            break
        if due - now > 0.002:
            time.sleep(due - now - 0.001)
        while time.perf_counter() < due:
            pass
        _datagram = p.to_bytes(8, "big") + pad
        t = time.perf_counter() - t0
        if lib is not None:
            if work is not None:
                work.put((p, t))
            else:
                instrument(p, t)
        p += 1
    elapsed = time.perf_counter() - t0
    if worker is not None:
        work.put(None)
        worker.join()
    dropped = 0
    if reporter is not None:
        dropped = reporter.flush_and_close().total_dropped
    return WallSenderLog(flavour, rate_bps, p, max(elapsed, duration), size, dropped)
