"""Deterministic scenario behind the files in testdata/.

``python3 tests/golden.py`` rewrites testdata/ from the current code; the
tests regenerate the same bytes in a temporary directory and compare.
"""

from __future__ import annotations

import sys
import tempfile
from pathlib import Path as FsPath

from obsmeter import MeasurementLibrary
from obsmeter.channel import Path, PathConfig, export_trace
from obsmeter.client import start
from obsmeter.config import parse_config
from obsmeter.netbench.sim import VirtualClock
from obsmeter.server import CollectionServer, LocalTransport

TESTDATA = FsPath(__file__).resolve().parent.parent / "testdata"
ORIGIN = 1_700_000_000.0


class CaptureEndpoint:
    """Endpoint whose transport records every byte handed to the server."""

    def __init__(self, server, receipt_time):
        self.server = server
        self.receipt_time = receipt_time
        self.data = bytearray()

    def open(self):
        inner = LocalTransport(self.server, lambda: self.receipt_time)
        outer = self

        class Tee:
            def handshake(self, header):
                outer.data += header
                inner.handshake(header)

            def send(self, data):
                outer.data += data
                inner.send(data)

            def close(self):
                inner.close()

        return Tee()


CONFIG_A = """\
experiment golden
node alpha
app probe
server local as s
buffer 4
enable transfer
enable note
filter bytes = sum(transfer.size) every 0.5s
"""

CONFIG_B = """\
experiment golden
node beta
app probe
server local as s
enable note
"""


def _library(clock):
    lib = MeasurementLibrary(clock)
    lib.define_mp("transfer", [("size", "int64"), ("rate", "float64")])
    lib.define_mp("note", [("text", "text")])
    return lib


def build(workdir: FsPath) -> dict[str, bytes]:
    clock = VirtualClock()
    server = CollectionServer(workdir, clock=clock, writer="inline")
    ep_a = CaptureEndpoint(server, ORIGIN)
    ep_b = CaptureEndpoint(server, ORIGIN + 2.0)
    lib_a, lib_b = _library(clock), _library(clock)
    rep_a = start(lib_a, parse_config(CONFIG_A), {"s": ep_a}, start_time=ORIGIN - 0.25, threaded=False)
    rep_b = start(lib_b, parse_config(CONFIG_B), {"s": ep_b}, start_time=ORIGIN + 1.75, threaded=False)
    sizes = [1498, 1498, 512, 9_223_372_036_854_775_807, -1, 0, 1498, 64]
    rates = [0.1, 1e-300, -0.0, 1.7976931348623157e308, 2.5, 1 / 3, float("inf"), 12.0]
    for i, (size, rate) in enumerate(zip(sizes, rates)):
        clock.now = 0.2 * i
        lib_a.inject("transfer", [size, rate])
        if i == 4:
            # the buffer (4 slots) is full here: the next injections are dropped
            lib_a.inject("note", ["dropped\tone"])
            rep_a.pump()
    clock.now = 1.0
    lib_a.inject("note", ["tab\there"])
    lib_b.inject("note", ["line\nbreak and back\\slash"])
    lib_b.inject("note", [""])
    clock.now = 1.7
    rep_a.flush_and_close()
    rep_b.flush_and_close()
    server.finalize("golden")
    store = workdir / "golden"
    out = {
        "wire/alpha.txt": bytes(ep_a.data),
        "wire/beta.txt": bytes(ep_b.data),
    }
    for f in sorted(store.iterdir()):
        out[f"store/{f.name}"] = f.read_bytes()
    path = Path(PathConfig(8e6, base_delay=0.001, jitter_model="uniform", jitter=0.0005, loss=0.1, seed=42))
    for i in range(40):
        path.send_packet(1000 if i % 3 else 1500, i * 0.0015)
    out["trace/seed42.tsv"] = export_trace(path.records).encode("utf-8")
    return out


def write(target: FsPath = TESTDATA) -> None:
    with tempfile.TemporaryDirectory() as tmp:
        files = build(FsPath(tmp))
    for name, data in files.items():
        p = target / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)


if __name__ == "__main__":
    write(FsPath(sys.argv[1]) if len(sys.argv) > 1 else TESTDATA)
