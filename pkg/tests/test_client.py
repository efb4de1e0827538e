import socket
import threading
import time

import pytest

from obsmeter import MeasurementLibrary
from obsmeter.client import BoundedBuffer, Reporter, ReporterConfig, Transport, start
from obsmeter.config import parse_config
from obsmeter.errors import ConnectFailed, FlushTimeout, HandshakeRejected
from obsmeter.filters import compose
from obsmeter.measurement import ClientIdentity
from obsmeter.protocol import StreamParser
from obsmeter.server import CollectionServer, LocalEndpoint, TcpServer


class RecordingTransport(Transport):
    def __init__(self, gate=None, fail_after=None):
        self.parser = StreamParser()
        self.events = []
        self.gate = gate
        self.fail_after = fail_after
        self.sends = 0
        self.closed = False

    def handshake(self, header):
        self.events.extend(self.parser.feed(header))

    def send(self, data):
        if self.gate is not None:
            self.gate.wait()
        self.sends += 1
        if self.fail_after is not None and self.sends > self.fail_after:
            raise ConnectionResetError("peer went away")
        self.events.extend(self.parser.feed(data))

    def close(self):
        self.events.extend(self.parser.finish())
        self.closed = True

    def frames(self):
        return [e for k, e in self.events if k == "frame"]


class Endpoint:
    def __init__(self, transport):
        self.transport = transport

    def open(self):
        return self.transport


def library():
    lib = MeasurementLibrary()
    lib.define_mp("transfer", [("size", "int64")])
    lib.define_mp("jitter", [("jitter", "float64")])
    return lib


def test_bounded_buffer_counts_in_flight_items():
    buf = BoundedBuffer(2)
    assert buf.offer(1) and buf.offer(2) and not buf.offer(3)
    assert buf.take(2, timeout=0) == [1, 2]
    assert not buf.offer(3)  # still in flight
    buf.release(2)
    assert buf.offer(3)
    with pytest.raises(ValueError):
        BoundedBuffer(0)


def test_one_stream_in_order_and_summary():
    lib = library()
    t = RecordingTransport()
    rep = start(lib, parse_config("server x as s\nenable transfer\n"), {"s": Endpoint(t)}, start_time=10.0)
    for i in range(1000):
        lib.inject("transfer", [i])
    lib.inject("jitter", [0.5])  # not enabled: no-op
    summary = rep.flush_and_close()
    assert summary.sent == {"transfer": 1000} and summary.dropped == {"transfer": 0}
    assert [f.seq for f in t.frames()] == list(range(1000))
    assert [f.values[0] for f in t.frames()] == list(range(1000))
    assert t.events[0][0] == "header" and t.events[-1] == ("final", {1: 1000})
    assert rep.flush_and_close() is summary


def test_two_streams_to_two_endpoints():
    lib = library()
    a, b = RecordingTransport(), RecordingTransport()
    cfg = parse_config("server x as a\nserver y as b\nenable transfer -> a\nenable jitter -> b\n")
    rep = start(lib, cfg, {"a": Endpoint(a), "b": Endpoint(b)}, start_time=10.0)
    lib.inject("transfer", [1])
    lib.inject("jitter", [0.25])
    rep.flush_and_close()
    assert [s.name for s in a.events[0][1].schemas] == ["transfer"]
    assert [s.name for s in b.events[0][1].schemas] == ["jitter"]
    assert [f.values for f in a.frames()] == [(1,)]
    assert [f.values for f in b.frames()] == [(0.25,)]


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_unreachable_endpoint_fails_at_start():
    lib = library()
    with pytest.raises(ConnectFailed):
        start(lib, parse_config(f"server 127.0.0.1:{_free_port()} as s\nenable transfer\n"), start_time=10.0)


def test_stalled_sink_drops_newest():
    lib = library()
    gate = threading.Event()
    t = RecordingTransport(gate=gate)
    rep = start(lib, parse_config("server x as s\nbuffer 8\nenable transfer\n"), {"s": Endpoint(t)}, start_time=10.0)
    outcomes = [lib.inject("transfer", [i]) for i in range(100)]
    gate.set()
    summary = rep.flush_and_close()
    assert summary.sent["transfer"] + summary.dropped["transfer"] == 100
    assert summary.dropped["transfer"] >= 92
    assert sum(o.value == "dropped" for o in outcomes) == summary.dropped["transfer"]
    # the frames that got through are the oldest ones, and seqs still count the drops
    seqs = [f.seq for f in t.frames()]
    assert seqs == sorted(seqs) and t.events[-1][1] == {1: 100}


def test_flush_timeout():
    lib = library()
    gate = threading.Event()
    t = RecordingTransport(gate=gate)
    cfg = parse_config("server x as s\nbuffer 8\nenable transfer\n")
    rep = start(lib, cfg, {"s": Endpoint(t)}, start_time=10.0)
    lib.inject("transfer", [1])
    time.sleep(0.1)
    with pytest.raises(FlushTimeout):
        rep.flush_and_close(timeout=0.2)
    gate.set()


def test_lost_connection_marks_run_invalid():
    lib = library()
    t = RecordingTransport(fail_after=0)
    rep = start(lib, parse_config("server x as s\nenable transfer\n"), {"s": Endpoint(t)}, start_time=10.0, threaded=False)
    lib.inject("transfer", [1])
    rep.pump()
    summary = rep.flush_and_close()
    assert not summary.valid and "lost connection" in summary.error


def test_manual_pump_and_partial_window_flush():
    now = [0.0]
    lib = MeasurementLibrary(lambda: now[0])
    lib.define_mp("transfer", [("size", "int64")])
    t = RecordingTransport()
    cfg = parse_config("server x as s\nfilter bytes = sum(transfer.size) every 1s\n")
    rep = start(lib, cfg, {"s": Endpoint(t)}, start_time=10.0, threaded=False)
    for i in range(5):
        now[0] = 0.3 * i
        lib.inject("transfer", [100])
    assert rep.pump() == 1
    now[0] = 1.5
    rep.flush_and_close()
    vals = [f.values for f in t.frames()]
    assert vals == [(0.0, 1.0, 4, 0, 400), (1.0, 2.0, 1, 1, 100)]


def test_conservation_with_multiple_producers():
    lib = library()
    t = RecordingTransport()
    rep = start(lib, parse_config("server x as s\nbuffer 16\nenable transfer\nenable jitter\n"), {"s": Endpoint(t)}, start_time=10.0)

    def worker(mp, value):
        for _ in range(3000):
            lib.inject(mp, [value])

    threads = [threading.Thread(target=worker, args=a) for a in (("transfer", 1), ("transfer", 2), ("jitter", 0.5))]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    summary = rep.flush_and_close()
    assert summary.generated == {"transfer": 6000, "jitter": 3000}
    for name in summary.generated:
        assert summary.sent[name] + summary.dropped[name] == summary.generated[name]
    assert len(t.frames()) == summary.total_sent


def test_handshake_rejected_by_server(tmp_path):
    server = CollectionServer(tmp_path, writer="inline")
    lib_a, lib_b = library(), library()
    cfg = parse_config("server x as s\nexperiment e\nnode n\nenable transfer\n")
    start(lib_a, cfg, {"s": LocalEndpoint(server)}, start_time=10.0)
    with pytest.raises(HandshakeRejected):
        start(lib_b, cfg, {"s": LocalEndpoint(server)}, start_time=10.0)


def test_tcp_round_trip(tmp_path):
    core = CollectionServer(tmp_path)
    srv = TcpServer(("127.0.0.1", 0), core)
    srv.serve_in_background()
    try:
        lib = library()
        rep = start(lib, parse_config(f"experiment tcp\nserver {srv.endpoint} as s\nenable transfer\n"))
        for i in range(500):
            lib.inject("transfer", [i])
        summary = rep.flush_and_close()
        deadline = time.time() + 5
        while any(s.open for s in core.store("tcp").sessions) and time.time() < deadline:
            time.sleep(0.01)
        report = core.finalize("tcp")
    finally:
        srv.shutdown()
        srv.server_close()
    st = report.stream("transfer")
    assert st.rows == summary.sent["transfer"] == 500 and st.client_gaps == 0
    assert report.invalid_sessions == []


def test_reporter_direct_construction():
    lib = library()
    p = compose([], lib.schemas, raw=["transfer"])
    t = RecordingTransport()
    rep = Reporter(ReporterConfig({"s": Endpoint(t)}, buffer_capacity=4), ClientIdentity("e", "n", "a", 5.0), p, threaded=False).start()
    lib.attach(p.routes)
    for i in range(6):
        lib.inject("transfer", [i])
    summary = rep.flush_and_close()
    assert (summary.sent["transfer"], summary.dropped["transfer"]) == (4, 2)
