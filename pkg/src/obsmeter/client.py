"""Client runtime: bounded buffering and transmission of measurement streams.

The injecting thread runs the filter pipeline and then makes a single
non-blocking `offer` into a :class:`BoundedBuffer`. One consumer (a background
thread, or the caller of :meth:`Reporter.pump` in manual mode) encodes frames
and writes them to every endpoint the stream is routed to.
"""

from __future__ import annotations

import collections
import logging
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

from .config import DEFAULT_BUFFER, RunConfig
from .errors import ConnectFailed, FlushTimeout, HandshakeRejected, ObsmeterError
from .filters import Pipeline, compose
from .measurement import ClientIdentity, MeasurementLibrary
from .protocol import HeaderBlock, StreamFrame, StreamSchema, encode_frame, encode_header, encode_trailer

log = logging.getLogger(__name__)


class BoundedBuffer:
    """Multi-producer single-consumer FIFO with a hard capacity.

    Items taken by the consumer keep occupying capacity until `release`, so a
    stalled sink holds at most `capacity` items in total.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: collections.deque = collections.deque()
        self._occupied = 0
        self._lock = threading.Lock()
        self._ready = threading.Condition(self._lock)
        self._space = threading.Condition(self._lock)

    def __len__(self):
        return self._occupied

    def offer(self, item) -> bool:
        with self._lock:
            if self._occupied >= self.capacity:
                return False
            self._items.append(item)
            self._occupied += 1
            self._ready.notify()
            return True

    def put(self, item, timeout: Optional[float] = None) -> bool:
        with self._lock:
            if not self._space.wait_for(lambda: self._occupied < self.capacity, timeout):
                return False
            self._items.append(item)
            self._occupied += 1
            self._ready.notify()
            return True

    def take(self, max_items: int, timeout: Optional[float] = None) -> list:
        with self._lock:
            if timeout != 0:
                self._ready.wait_for(lambda: self._items, timeout)
            n = min(max_items, len(self._items))
            return [self._items.popleft() for _ in range(n)]

    def release(self, n: int) -> None:
        with self._lock:
            self._occupied -= n
            self._space.notify_all()


class Transport:
    """Byte pipe to one collection server."""

    def handshake(self, header: bytes) -> None:
        raise NotImplementedError

    def send(self, data: bytes) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass


class TcpTransport(Transport):
    def __init__(self, address: str, timeout: float = 5.0):
        host, _, port = address.rpartition(":")
        try:
            self.sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout=timeout)
        except (OSError, ValueError) as exc:
            raise ConnectFailed(f"{address}: {exc}") from exc
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.address = address

    def handshake(self, header: bytes) -> None:
        self.sock.sendall(header)
        reply = b""
        while not reply.endswith(b"\n"):
            chunk = self.sock.recv(1024)
            if not chunk:
                raise HandshakeRejected(f"{self.address} closed during handshake")
            reply += chunk
        text = reply.decode("utf-8").strip()
        if text != "ok":
            raise HandshakeRejected(f"{self.address}: {text}")
        self.sock.settimeout(None)

    def send(self, data: bytes) -> None:
        self.sock.sendall(data)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_WR)
            # wait for the server to acknowledge the trailer by closing
            self.sock.settimeout(5.0)
            while self.sock.recv(1024):
                pass
        except OSError:
            pass
        finally:
            self.sock.close()


def open_transport(address) -> Transport:
    if isinstance(address, str):
        return TcpTransport(address)
    return address.open()


@dataclass
class ReporterConfig:
    endpoints: Mapping[str, object]  # tag -> "host:port" or an object with .open()
    buffer_capacity: int = DEFAULT_BUFFER
    routes: Mapping[str, Sequence[str]] = field(default_factory=dict)  # stream -> tags
    flush_timeout: float = 10.0

    def __post_init__(self):
        if self.buffer_capacity < 1:
            raise ValueError("buffer capacity must be >= 1")

    def tags_for(self, stream: str) -> tuple[str, ...]:
        tags = tuple(self.routes.get(stream, ()))
        return tags or tuple(self.endpoints)

    @classmethod
    def from_run_config(cls, cfg: RunConfig, endpoints: Optional[Mapping[str, object]] = None, **kw):
        eps = dict(cfg.servers)
        if endpoints:
            eps.update(endpoints)
        streams = list(cfg.enabled) + [f.output for f in cfg.filters]
        routes = {s: cfg.routes_for(s) for s in streams}
        return cls(eps, cfg.buffer, routes, **kw)


@dataclass
class RunSummary:
    sent: dict[str, int]
    dropped: dict[str, int]
    generated: dict[str, int]
    valid: bool = True
    error: Optional[str] = None

    @property
    def total_sent(self) -> int:
        return sum(self.sent.values())

    @property
    def total_dropped(self) -> int:
        return sum(self.dropped.values())


class _Connection:
    def __init__(self, tag: str, transport: Transport, streams: list[int]):
        self.tag = tag
        self.transport = transport
        self.local_index = {g: i + 1 for i, g in enumerate(streams)}
        self.schemas: dict[int, StreamSchema] = {}
        self.pending: list[bytes] = []


class Reporter:
    """Owns the bounded buffer, the sequence counters and all connections."""

    BATCH = 512

    def __init__(
        self,
        cfg: ReporterConfig,
        identity: ClientIdentity,
        pipelines: Pipeline | Sequence[Pipeline],
        threaded: bool = True,
        clock: Optional[Callable[[], float]] = None,
    ):
        self.cfg = cfg
        self.identity = identity
        self.pipelines = [pipelines] if isinstance(pipelines, Pipeline) else list(pipelines)
        self.threaded = threaded
        self.clock = clock or time.monotonic
        self.buffer = BoundedBuffer(cfg.buffer_capacity)
        self.streams = []  # (name, fields)
        for p_index, pipeline in enumerate(self.pipelines):
            offset = len(self.streams)
            self.streams.extend(pipeline.streams)
            pipeline.bind(self._make_sink(offset))
        self.names = [s.name for s in self.streams]
        n = len(self.streams)
        self.next_seq = [0] * n
        self.dropped = [0] * n
        self.sent = [0] * n
        self.connections: list[_Connection] = []
        self._routes: list[list[_Connection]] = [[] for _ in range(n)]
        self._thread: Optional[threading.Thread] = None
        self._closing = False
        self._draining = False
        self._summary: Optional[RunSummary] = None
        self._close_lock = threading.Lock()
        self.error: Optional[str] = None
        self.on_close: list[Callable[[], None]] = []

    def _make_sink(self, offset: int):
        def sink(stream: int, ts: float, values: tuple) -> bool:
            return self.submit(stream + offset, ts, values)

        return sink

    # producer side -------------------------------------------------------
    def submit(self, stream: int, ts: float, values: tuple) -> bool:
        """Assign the next sequence number and enqueue, dropping on a full buffer.

        Callers serialise per stream (the library holds the MP lock).
        """
        seq = self.next_seq[stream]
        self.next_seq[stream] = seq + 1
        item = (stream, seq, ts, values)
        if self.buffer.offer(item):
            return True
        if self._closing:
            # windows flushed at close are not subject to back-pressure
            if not self.threaded:
                self._pump_batch(self.BATCH)
                if self.buffer.offer(item):
                    return True
            elif self.buffer.put(item, self.cfg.flush_timeout):
                return True
        self.dropped[stream] += 1
        return False

    # connection management ----------------------------------------------
    def start(self) -> "Reporter":
        by_tag: dict[str, list[int]] = {tag: [] for tag in self.cfg.endpoints}
        for g, name in enumerate(self.names):
            tags = self.cfg.tags_for(name)
            if not tags:
                raise ObsmeterError(f"stream {name} has no destination")
            for tag in tags:
                if tag not in by_tag:
                    raise ObsmeterError(f"stream {name} routed to unknown endpoint {tag!r}")
                by_tag[tag].append(g)
        opened = []
        try:
            for tag, streams in by_tag.items():
                if not streams:
                    continue
                transport = open_transport(self.cfg.endpoints[tag])
                opened.append(transport)
                conn = _Connection(tag, transport, streams)
                schemas = tuple(
                    StreamSchema(conn.local_index[g], self.names[g], self.streams[g].fields) for g in streams
                )
                conn.schemas = {s.index: s for s in schemas}
                transport.handshake(encode_header(HeaderBlock(self.identity, schemas)))
                self.connections.append(conn)
                for g in streams:
                    self._routes[g].append(conn)
        except Exception:
            for t in opened:
                t.close()
            self.connections.clear()
            raise
        if self.threaded:
            self._thread = threading.Thread(target=self._run, name="obsmeter-reporter", daemon=True)
            self._thread.start()
        return self

    # consumer side -------------------------------------------------------
    def _transmit(self, items: list) -> None:
        for stream, seq, ts, values in items:
            for conn in self._routes[stream]:
                frame = StreamFrame(ts, conn.local_index[stream], seq, values)
                conn.pending.append(encode_frame(frame, conn.schemas))
        for conn in self.connections:
            if conn.pending:
                data = b"".join(conn.pending)
                conn.pending.clear()
                if self.error is None:
                    try:
                        conn.transport.send(data)
                    except OSError as exc:
                        # no reconnection: the run is marked invalid
                        self.error = f"lost connection to {conn.tag}: {exc}"
                        log.error(self.error)
        if self.error is None:
            for stream, *_ in items:
                self.sent[stream] += 1

    def _pump_batch(self, max_items: int) -> int:
        items = self.buffer.take(max_items, timeout=0)
        if items:
            try:
                self._transmit(items)
            finally:
                self.buffer.release(len(items))
        return len(items)

    def pump(self, max_items: Optional[int] = None) -> int:
        """Manual mode: transmit up to `max_items` buffered frames (all if None)."""
        done = 0
        while max_items is None or done < max_items:
            want = self.BATCH if max_items is None else min(self.BATCH, max_items - done)
            n = self._pump_batch(want)
            if n == 0:
                break
            done += n
        return done

    def _run(self):
        while True:
            items = self.buffer.take(self.BATCH, timeout=0.05)
            if not items:
                if self._draining and len(self.buffer) == 0:
                    return
                continue
            try:
                self._transmit(items)
            finally:
                self.buffer.release(len(items))

    # shutdown ------------------------------------------------------------
    def flush_and_close(self, timeout: Optional[float] = None) -> RunSummary:
        with self._close_lock:
            if self._summary is not None:
                return self._summary
            timeout = self.cfg.flush_timeout if timeout is None else timeout
            self._closing = True
            for cb in self.on_close:
                cb()
            now = self.clock()
            for pipeline in self.pipelines:
                pipeline.flush(now)
            self._draining = True
            if self.threaded and self._thread is not None:
                self._thread.join(timeout)
                if self._thread.is_alive():
                    raise FlushTimeout(f"{len(self.buffer)} frames still buffered after {timeout}s")
            else:
                self.pump()
            for conn in self.connections:
                try:
                    if self.error is None:
                        counts = {conn.local_index[g]: self.next_seq[g] for g in conn.local_index}
                        conn.transport.send(encode_trailer(counts))
                except OSError as exc:
                    self.error = f"lost connection to {conn.tag}: {exc}"
                conn.transport.close()
            self._summary = RunSummary(
                sent=dict(zip(self.names, self.sent)),
                dropped=dict(zip(self.names, self.dropped)),
                generated=dict(zip(self.names, self.next_seq)),
                valid=self.error is None,
                error=self.error,
            )
            return self._summary


def start_reporter(
    cfg: ReporterConfig,
    pipelines: Pipeline | Sequence[Pipeline],
    identity: ClientIdentity,
    threaded: bool = True,
    clock: Optional[Callable[[], float]] = None,
) -> Reporter:
    return Reporter(cfg, identity, pipelines, threaded=threaded, clock=clock).start()


def start(
    library: MeasurementLibrary,
    config: RunConfig,
    endpoints: Optional[Mapping[str, object]] = None,
    start_time: Optional[float] = None,
    threaded: bool = True,
) -> Reporter:
    """Wire a library to its configured streams and start reporting.

    `endpoints` overrides or supplements the ``server`` lines of `config`
    (e.g. with in-process endpoints); `start_time` is the client's wall-clock
    start (defaults to ``time.time()``).
    """
    from .config import enabled_mps

    enabled_mps(config, library.schemas)  # validates MP names
    pipeline = compose(config.filters, library.schemas, raw=list(config.enabled))
    identity = ClientIdentity(
        config.experiment_id, config.node_id, config.app_name, start_time if start_time is not None else time.time()
    )
    rc = ReporterConfig.from_run_config(config, endpoints)
    reporter = Reporter(rc, identity, pipeline, threaded=threaded, clock=library.clock)
    reporter.start()
    reporter.on_close.append(library.detach)
    library.attach(pipeline.routes)
    return reporter
