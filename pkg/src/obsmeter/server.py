"""Collection server: sessions, timestamp rebasing, bounded ingest FIFO, flat-file store.

Storage layout, one directory per experiment::

    <data-dir>/<experiment-id>/metadata.txt
    <data-dir>/<experiment-id>/<node>.<app>.<stream>.tsv

Each table starts with ``oml_ts_client oml_ts_server seq <fields...>``
(TAB-separated); values use the wire-protocol encodings.
"""

from __future__ import annotations

import argparse
import collections
import logging
import re
import signal
import socketserver
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .errors import (
    ActiveSessions,
    DuplicateClient,
    HandshakeRejected,
    ObsmeterError,
    ProtocolError,
    UndeclaredStream,
)
from .filters import to_us
from .measurement import MetricType
from .protocol import (
    GapReport,
    GapTracker,
    HeaderBlock,
    StreamFrame,
    StreamParser,
    escape,
    format_value,
    parse_value,
    unescape,
)

log = logging.getLogger(__name__)

DEFAULT_FIFO_CAPACITY = 65536

_UNSAFE = re.compile(r"[^A-Za-z0-9_.-]")


def _safe(name: str) -> str:
    return _UNSAFE.sub("_", name) or "_"


class StreamTable:
    def __init__(self, key: str, node_id: str, app_name: str, stream: str, fields, path: Path):
        self.key = key
        self.node_id = node_id
        self.app_name = app_name
        self.stream = stream
        self.fields = tuple(fields)
        self.path = path
        self.rows = 0
        self.server_drops = 0
        self.gaps = GapTracker()
        self.final_count: Optional[int] = None
        self.last_server_ts = 0.0
        self.fh = path.open("w", encoding="utf-8", newline="\n")
        cols = ["oml_ts_client", "oml_ts_server", "seq"] + [n for n, _ in self.fields]
        self.fh.write("\t".join(cols) + "\n")

    def write(self, client_ts: float, server_ts: float, seq: int, values: tuple) -> None:
        cols = ["%.6f" % client_ts, "%.6f" % server_ts, str(seq)]
        cols.extend(format_value(t, v) for (_, t), v in zip(self.fields, values))
        self.fh.write("\t".join(cols) + "\n")
        self.rows += 1
        self.last_server_ts = server_ts


@dataclass
class StreamReport:
    key: str
    node_id: str
    app_name: str
    stream: str
    rows: int
    received: int
    client_gaps: int
    gap_ranges: list[tuple[int, int]]
    server_drops: int
    final_count: Optional[int]


@dataclass
class CollectionReport:
    experiment_id: str
    origin: float
    streams: dict[str, StreamReport]
    overload_events: int
    max_fifo_depth: int
    fifo_capacity: int
    duration: float
    invalid_sessions: list[str] = field(default_factory=list)
    max_ingest_latency: float = 0.0
    mean_ingest_latency: float = 0.0

    @property
    def total_rows(self) -> int:
        return sum(s.rows for s in self.streams.values())

    @property
    def total_client_gaps(self) -> int:
        return sum(s.client_gaps for s in self.streams.values())

    @property
    def total_server_drops(self) -> int:
        return sum(s.server_drops for s in self.streams.values())

    def stream(self, name: str, node_id: Optional[str] = None) -> StreamReport:
        hits = [s for s in self.streams.values() if s.stream == name and (node_id is None or s.node_id == node_id)]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} tables match stream {name!r} node {node_id!r}")
        return hits[0]


class Session:
    """One connected client: its header, clock offset and stream tables."""

    def __init__(self, store: "ExperimentStore", header: HeaderBlock, receipt_time: float):
        self.store = store
        self.header = header
        self.receipt_time = receipt_time
        self.offset_us = to_us(receipt_time - store.origin)
        self.tables: dict[int, StreamTable] = {}
        self.open = True
        self.orderly = False

    @property
    def label(self) -> str:
        ident = self.header.identity
        return f"{ident.node_id}/{ident.app_name}"


class ExperimentStore:
    def __init__(self, experiment_id: str, directory: Path, fifo_capacity: int, clock: Callable[[], float]):
        self.experiment_id = experiment_id
        self.directory = directory
        self.directory.mkdir(parents=True, exist_ok=True)
        self.fifo_capacity = fifo_capacity
        self.clock = clock
        self.origin: Optional[float] = None
        self.tables: dict[str, StreamTable] = {}
        self.sessions: list[Session] = []
        self.fifo: collections.deque = collections.deque()
        self.lock = threading.Lock()
        self.ready = threading.Condition(self.lock)
        self.idle = threading.Condition(self.lock)
        self.overload_events = 0
        self.max_depth = 0
        self.latency_total = 0.0
        self.latency_max = 0.0
        self.written = 0
        self.sealed = False
        self._writer: Optional[threading.Thread] = None
        self._stop = False

    # writer -------------------------------------------------------------
    def start_writer(self) -> None:
        self._writer = threading.Thread(target=self._writer_loop, name=f"writer-{self.experiment_id}", daemon=True)
        self._writer.start()

    def _writer_loop(self) -> None:
        while True:
            with self.lock:
                self.ready.wait_for(lambda: self.fifo or self._stop)
                if not self.fifo and self._stop:
                    return
            self.drain(1024)

    def drain(self, max_rows: Optional[int] = None) -> int:
        """Move up to `max_rows` rows from the FIFO into their tables."""
        done = 0
        while max_rows is None or done < max_rows:
            with self.lock:
                if not self.fifo:
                    self.idle.notify_all()
                    break
                table, client_ts, server_ts, seq, values, enqueued = self.fifo.popleft()
            table.write(client_ts, server_ts, seq, values)
            wait = self.clock() - enqueued
            self.latency_total += wait
            self.latency_max = max(self.latency_max, wait)
            self.written += 1
            done += 1
        return done

    def enqueue(self, row: tuple) -> bool:
        with self.lock:
            if len(self.fifo) >= self.fifo_capacity:
                self.overload_events += 1
                return False
            self.fifo.append(row)
            if len(self.fifo) > self.max_depth:
                self.max_depth = len(self.fifo)
            self.ready.notify()
            return True

    def wait_empty(self, timeout: Optional[float] = None) -> bool:
        if self._writer is None:
            self.drain()
            return True
        with self.lock:
            return self.idle.wait_for(lambda: not self.fifo, timeout)

    def stop_writer(self) -> None:
        if self._writer is not None:
            with self.lock:
                self._stop = True
                self.ready.notify_all()
            self._writer.join()
            self._writer = None
        self.drain()


class CollectionServer:
    """Transport-independent server core.

    `writer` selects how the ingest FIFO is drained: ``"thread"`` (a
    background writer per experiment), ``"inline"`` (synchronously after each
    frame, for deterministic single-threaded simulations) or ``"manual"``
    (only when :meth:`drain` is called, to model a writer of finite capacity
    under a virtual `clock`).
    """

    def __init__(
        self,
        data_dir,
        fifo_capacity: int = DEFAULT_FIFO_CAPACITY,
        clock: Callable[[], float] = time.time,
        writer: str = "thread",
    ):
        if writer not in ("thread", "inline", "manual"):
            raise ValueError(f"unknown writer mode {writer!r}")
        if fifo_capacity < 1:
            raise ValueError("fifo capacity must be >= 1")
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.fifo_capacity = fifo_capacity
        self.clock = clock
        self.writer = writer
        self.experiments: dict[str, ExperimentStore] = {}
        self._lock = threading.Lock()

    def store(self, experiment_id: str) -> ExperimentStore:
        return self.experiments[experiment_id]

    def accept_client(self, header: HeaderBlock, receipt_time: Optional[float] = None) -> Session:
        if receipt_time is None:
            receipt_time = self.clock()
        exp = header.identity.experiment_id
        with self._lock:
            store = self.experiments.get(exp)
            if store is None:
                store = ExperimentStore(exp, self.data_dir / _safe(exp), self.fifo_capacity, self.clock)
                if self.writer == "thread":
                    store.start_writer()
                self.experiments[exp] = store
            if store.sealed:
                raise ObsmeterError(f"experiment {exp} is already finalized")
            if store.origin is None:
                store.origin = receipt_time
            session = Session(store, header, receipt_time)
            ident = header.identity
            new = {}
            for schema in header.schemas:
                key = f"{_safe(ident.node_id)}.{_safe(ident.app_name)}.{schema.name}"
                if key in store.tables or key in new:
                    raise DuplicateClient(f"table {key} already exists in {exp}")
                new[key] = schema
            for key, schema in new.items():
                table = StreamTable(key, ident.node_id, ident.app_name, schema.name, schema.fields, store.directory / f"{key}.tsv")
                store.tables[key] = table
                session.tables[schema.index] = table
            store.sessions.append(session)
        return session

    def ingest(self, session: Session, frame: StreamFrame) -> bool:
        """Queue one frame for storage; False when the FIFO overflowed."""
        try:
            table = session.tables[frame.stream_index]
        except KeyError:
            raise UndeclaredStream(f"stream index {frame.stream_index} not declared by {session.label}") from None
        table.gaps.observe(frame.seq)
        server_ts = (to_us(frame.client_ts) + session.offset_us) / 1e6
        row = (table, frame.client_ts, server_ts, frame.seq, frame.values, self.clock())
        if session.store.enqueue(row):
            if self.writer == "inline":
                session.store.drain()
            return True
        table.server_drops += 1
        return False

    def close_session(self, session: Session, final_counts: Optional[dict[int, int]] = None) -> None:
        """End a session; `final_counts` comes from the client's trailer.

        A session closed without a trailer lost its connection and is invalid.
        """
        with self._lock:
            if not session.open:
                return
            session.open = False
            session.orderly = final_counts is not None
            for index, table in session.tables.items():
                table.final_count = None if final_counts is None else final_counts.get(index)
                table.gaps.close(table.final_count)

    def drain(self, experiment_id: str, max_rows: Optional[int] = None) -> int:
        return self.experiments[experiment_id].drain(max_rows)

    def finalize(self, experiment_id: str) -> CollectionReport:
        store = self.experiments[experiment_id]
        if any(s.open for s in store.sessions):
            raise ActiveSessions(f"{sum(s.open for s in store.sessions)} session(s) still open")
        if not store.sealed:
            store.stop_writer()
            for table in store.tables.values():
                table.fh.close()
            store.sealed = True
            _write_metadata(store)
        streams = {}
        for key, t in sorted(store.tables.items()):
            gaps = t.gaps.report()
            streams[key] = StreamReport(
                key, t.node_id, t.app_name, t.stream, t.rows, t.gaps.received,
                gaps.missing, gaps.ranges, t.server_drops, t.final_count,
            )
        duration = max((t.last_server_ts for t in store.tables.values()), default=0.0)
        return CollectionReport(
            experiment_id=experiment_id,
            origin=store.origin if store.origin is not None else 0.0,
            streams=streams,
            overload_events=store.overload_events,
            max_fifo_depth=store.max_depth,
            fifo_capacity=store.fifo_capacity,
            duration=duration,
            invalid_sessions=[s.label for s in store.sessions if not s.orderly],
            max_ingest_latency=store.latency_max,
            mean_ingest_latency=store.latency_total / store.written if store.written else 0.0,
        )

    def close(self) -> None:
        for store in self.experiments.values():
            if not store.sealed:
                store.stop_writer()


def _write_metadata(store: ExperimentStore) -> None:
    lines = [f"experiment-id: {escape(store.experiment_id)}", f"origin: {store.origin!r}"]
    for s in store.sessions:
        ident = s.header.identity
        lines.append(
            "client: "
            + "\t".join(
                [escape(ident.node_id), escape(ident.app_name), repr(ident.start_time), repr(s.receipt_time), str(s.offset_us), "orderly" if s.orderly else "aborted"]
            )
        )
    for key, t in sorted(store.tables.items()):
        cols = " ".join(f"{n}:{ty.value}" for n, ty in t.fields)
        lines.append(f"table: {key}\t{escape(t.node_id)}\t{escape(t.app_name)}\t{t.stream}\t{cols}")
    lines.append("sealed: yes")
    (store.directory / "metadata.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# reading stores back -------------------------------------------------------


@dataclass
class StoredTable:
    key: str
    node_id: str
    app_name: str
    stream: str
    fields: tuple[tuple[str, MetricType], ...]
    rows: list[tuple]  # (oml_ts_client, oml_ts_server, seq, *values)

    def column(self, name: str) -> list:
        cols = ["oml_ts_client", "oml_ts_server", "seq"] + [n for n, _ in self.fields]
        i = cols.index(name)
        return [r[i] for r in self.rows]


@dataclass
class LoadedStore:
    experiment_id: str
    origin: float
    tables: dict[str, StoredTable]

    def table(self, stream: str, node_id: Optional[str] = None) -> StoredTable:
        hits = [t for t in self.tables.values() if t.stream == stream and (node_id is None or t.node_id == node_id)]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} tables match stream {stream!r} node {node_id!r}")
        return hits[0]


def load_store(directory, streams: Optional[set] = None, node_id: Optional[str] = None) -> LoadedStore:
    """Reopen a finalized experiment directory, optionally only some tables."""
    directory = Path(directory)
    meta = (directory / "metadata.txt").read_text(encoding="utf-8").splitlines()
    exp, origin, tables = "", 0.0, {}
    for line in meta:
        key, _, value = line.partition(": ")
        if key == "experiment-id":
            exp = unescape(value)
        elif key == "origin":
            origin = float(value)
        elif key == "table":
            tkey, node, app, stream, cols = value.split("\t")
            if (streams is not None and stream not in streams) or (node_id is not None and unescape(node) != node_id):
                continue
            fields = tuple((n, MetricType(t)) for n, t in (c.split(":") for c in cols.split()))
            rows = []
            with (directory / f"{tkey}.tsv").open(encoding="utf-8") as fh:
                next(fh)
                for raw in fh:
                    parts = raw.rstrip("\n").split("\t")
                    row = (float(parts[0]), float(parts[1]), int(parts[2]))
                    row += tuple(parse_value(t, c) for (_, t), c in zip(fields, parts[3:]))
                    rows.append(row)
            tables[tkey] = StoredTable(tkey, unescape(node), unescape(app), stream, fields, rows)
    return LoadedStore(exp, origin, tables)


def export_canonical(store: LoadedStore) -> bytes:
    """Deterministic byte rendering of a store, for durability comparisons."""
    out = [f"experiment\t{escape(store.experiment_id)}\t{store.origin!r}\n"]
    for key in sorted(store.tables):
        t = store.tables[key]
        out.append(f"table\t{key}\t{len(t.rows)}\n")
        for row in t.rows:
            cols = ["%.6f" % row[0], "%.6f" % row[1], str(row[2])]
            cols.extend(format_value(ty, v) for (_, ty), v in zip(t.fields, row[3:]))
            out.append("\t".join(cols) + "\n")
    return "".join(out).encode("utf-8")


# in-process and TCP front ends ---------------------------------------------


class LocalTransport:
    """Client transport that feeds bytes straight into a server's session parser."""

    def __init__(self, server: CollectionServer, receipt_time: Optional[Callable[[], float]] = None):
        self.server = server
        self.parser = StreamParser()
        self.session: Optional[Session] = None
        self._receipt = receipt_time

    def handshake(self, header: bytes) -> None:
        try:
            events = self.parser.feed(header)
            (kind, h), = events
            t = self._receipt() if self._receipt else None
            self.session = self.server.accept_client(h, t)
        except (ObsmeterError, ValueError) as exc:
            raise HandshakeRejected(str(exc)) from exc

    def send(self, data: bytes) -> None:
        for kind, payload in self.parser.feed(data):
            if kind == "frame":
                self.server.ingest(self.session, payload)

    def close(self) -> None:
        final = None
        for kind, payload in self.parser.finish():
            if kind == "final":
                final = payload
        if self.session is not None:
            self.server.close_session(self.session, final)


class LocalEndpoint:
    """Endpoint object accepted by :class:`obsmeter.client.ReporterConfig`."""

    def __init__(self, server: CollectionServer, receipt_time: Optional[Callable[[], float]] = None):
        self.server = server
        self.receipt_time = receipt_time

    def open(self) -> LocalTransport:
        return LocalTransport(self.server, self.receipt_time)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        core: CollectionServer = self.server.core
        parser = StreamParser()
        session = None
        final = None
        try:
            while True:
                data = self.request.recv(65536)
                if not data:
                    break
                for kind, payload in parser.feed(data):
                    if kind == "header":
                        try:
                            session = core.accept_client(payload)
                        except ObsmeterError as exc:
                            self.request.sendall(f"error: {exc}\n".encode())
                            return
                        self.request.sendall(b"ok\n")
                    elif kind == "frame":
                        core.ingest(session, payload)
            for kind, payload in parser.finish():
                if kind == "final":
                    final = payload
        except ProtocolError as exc:
            log.warning("protocol error from %s: %s", self.client_address, exc)
            if session is None:
                try:
                    self.request.sendall(f"error: {exc}\n".encode())
                except OSError:
                    pass
        except OSError as exc:
            log.warning("connection from %s lost: %s", self.client_address, exc)
        finally:
            if session is not None:
                core.close_session(session, final)


class TcpServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], core: CollectionServer):
        super().__init__(address, _Handler)
        self.core = core

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def serve_in_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="obsmeter-server", daemon=True)
        t.start()
        return t


def _host_port(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "0.0.0.0", int(port)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="obsmeter-server", description="Measurement collection server")
    parser.add_argument("--listen", required=True, help="host:port to accept clients on")
    parser.add_argument("--data-dir", required=True, help="directory holding one subdirectory per experiment")
    parser.add_argument("--fifo-capacity", type=int, default=DEFAULT_FIFO_CAPACITY)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")

    core = CollectionServer(args.data_dir, fifo_capacity=args.fifo_capacity)
    server = TcpServer(_host_port(args.listen), core)
    log.info("listening on %s, storing into %s", server.endpoint, args.data_dir)
    # SIGTERM finalizes the stores the same way Ctrl-C does
    signal.signal(signal.SIGTERM, signal.default_int_handler)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        for exp in list(core.experiments):
            store = core.experiments[exp]
            for s in store.sessions:
                core.close_session(s, None)
            report = core.finalize(exp)
            log.info(
                "%s: %d rows, %d client gaps, %d server drops",
                exp, report.total_rows, report.total_client_gaps, report.total_server_drops,
            )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
