"""Execution of the three experiment sets in virtual time."""

from __future__ import annotations

import math
import shutil
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path as FsPath
from typing import Optional

import numpy as np

from ..channel import Path, SharedMedium, run_contention
from ..client import Transport
from ..errors import DegenerateVariance, InvalidRun
from ..filters import WindowSpec
from ..measurement import MeasurementLibrary
from ..netbench.model import ProbeFlavour
from ..netbench.probe import ancillary_report, define_probe_mps, parse_vanilla_csv, probe_config, run_probe_receiver, run_probe_sender
from ..netbench.sim import VirtualClient, VirtualClock
from ..netbench.tap import define_tap_mps, parse_tap_csv, run_tap_reporter, tap_config
from ..server import CollectionServer, LocalEndpoint, LocalTransport, load_store
from ..stats.pipeline import PipelineResult, ResponseSeries, analysis_pipeline
from .recipes import Recipe
from .responses import (
    IntervalReport,
    Summary,
    compute_jitter_diff,
    compute_loss_ratio,
    compute_sending_rate,
    compute_throughput_diff,
    compute_timestamp_diff,
    egress_rate,
    reports_from_packets,
    window_bytes,
)

VERSION = "obsmeter-bench 0.1"
REPORT_OVERHEAD = 40  # IP + TCP header bytes per report transmission


def run_seed(recipe: Recipe, *keys: int) -> int:
    return int(np.random.SeedSequence([recipe.seed, recipe.set_id, *keys]).generate_state(1)[0])


@dataclass
class Conservation:
    injected: int = 0
    stored: int = 0
    client_gaps: int = 0
    server_drops: int = 0
    client_drops: int = 0

    def add(self, summary, report, node: str) -> None:
        for name, gen in summary.generated.items():
            st = report.stream(name, node)
            self.injected += gen
            self.stored += st.rows
            self.client_gaps += st.client_gaps
            self.server_drops += st.server_drops
            self.client_drops += summary.dropped[name]

    @property
    def balanced(self) -> bool:
        return self.injected == self.stored + self.client_gaps + self.server_drops and self.client_gaps == self.client_drops


@dataclass
class CellRun:
    cell: tuple
    rep: int
    responses: dict[str, np.ndarray]
    conservation: Conservation
    valid: bool = True
    extra: dict = field(default_factory=dict)


@dataclass
class Analysis:
    response: str
    subset: str
    factors: tuple[str, str]
    series: list[ResponseSeries]
    result: Optional[PipelineResult] = None
    note: str = ""


@dataclass
class SetResult:
    recipe: Recipe
    runs: list[CellRun]
    analyses: list[Analysis]
    tables: dict[str, str] = field(default_factory=dict)  # extra TSV outputs by file name


def _client_config(base: str, recipe: Recipe) -> str:
    return base + f"buffer {recipe.config.buffer}\n"


def _virtual_server(workdir: FsPath, clock: VirtualClock) -> CollectionServer:
    return CollectionServer(workdir, clock=clock, writer="inline")


# set 1 -----------------------------------------------------------------------


def _probe_reports(flavour: ProbeFlavour, out, store, recipe: Recipe, n_windows: int) -> list[IntervalReport]:
    dt = recipe.report_interval
    if flavour.name == "vanilla-csv":
        return [IntervalReport(s.t0, s.t1, s.throughput, s.jitter) for s in parse_vanilla_csv(out.csv)]
    if flavour.name == "legacy-mp":
        size = {(r[3], r[4]): r[5] for r in store.table("transfer", "receiver").rows}
        jit = {(r[3], r[4]): r[5] for r in store.table("jitter", "receiver").rows}
        return [IntervalReport(a, b, size[(a, b)] / dt, jit[(a, b)]) for (a, b) in sorted(size) if (a, b) in jit]
    if flavour.name == "advanced-mp":
        rows = [(r[3], r[4], r[5], r[6]) for r in store.table("packets", "receiver").rows]
        return reports_from_packets(rows, dt, n_windows)
    # advanced-filtered: windowed sum and jitter, missing windows carry nothing / the last jitter
    w = int(round(dt * 1e6))
    size = {int(round(r[3] * 1e6)) // w: r[7] for r in store.table("bytes", "receiver").rows}
    jit = {int(round(r[3] * 1e6)) // w: r[7] for r in store.table("pkt_jitter", "receiver").rows}
    reports, last = [], 0.0
    for k in range(n_windows):
        last = jit.get(k, last)
        reports.append(IntervalReport(k * dt, (k + 1) * dt, size.get(k, 0) / dt, last))
    return reports


def run_probe_cell(recipe: Recipe, flavour: ProbeFlavour, rate: float, rep: int, seed: int, workdir: FsPath) -> CellRun:
    clock = VirtualClock()
    server = _virtual_server(workdir, clock)
    endpoints = {"s": LocalEndpoint(server, clock)}
    exp = recipe.config.experiment_id if recipe.config.experiment_id != "default" else "probe"
    clients = {}
    for role, drain in (("sender", None), ("receiver", recipe.reporter_rate)):
        lib = MeasurementLibrary(clock)
        define_probe_mps(lib)
        cfg = _client_config(probe_config(flavour, role, recipe.report_interval, exp), recipe)
        clients[role] = VirtualClient(lib, cfg, endpoints, clock, drain_fps=drain)
        if flavour.instrumented:
            ancillary_report(lib, VERSION, ["--rate", f"{rate:g}", "--flavour", str(flavour)], role)
    path = Path(recipe.path_config(seed))
    rng = np.random.default_rng(seed)
    log = run_probe_sender(
        path, rate, recipe.duration, flavour, recipe.costs, seed=int(rng.integers(2**63)),
        client=clients["sender"], size=recipe.packet_size, report_interval=recipe.report_interval,
    )
    clock.now = 0.0
    out = run_probe_receiver(log.records, flavour, recipe.report_interval, recipe.duration, client=clients["receiver"])
    clock.now = recipe.duration
    summaries = {role: c.close() for role, c in clients.items()}
    report = server.finalize(exp)
    cons = Conservation()
    for role, s in summaries.items():
        cons.add(s, report, role)
    valid = all(s.valid for s in summaries.values()) and not report.invalid_sessions
    store = load_store(workdir / exp, streams={"transfer", "jitter", "packets", "bytes", "pkt_jitter"}, node_id="receiver")
    n_windows = int(math.ceil(recipe.duration / recipe.report_interval - 1e-9))
    reports = _probe_reports(flavour, out, store, recipe, n_windows)
    records = log.records
    responses = {
        "sending_rate": compute_sending_rate(records, recipe.report_interval, recipe.duration),
        "throughput_diff": compute_throughput_diff(records, reports, recipe.report_interval),
        "jitter_diff": compute_jitter_diff(records, reports, recipe.report_interval),
    }
    return CellRun((flavour.name, "on" if flavour.threads else "off", rate), rep, responses, cons, valid,
                   {"achieved_rate": log.achieved_rate, "receiver_dropped": summaries["receiver"].total_dropped})


# set 2 -----------------------------------------------------------------------


def run_tap_cell(recipe: Recipe, flavour: str, rate: float, rep: int, seed: int, workdir: FsPath) -> CellRun:
    clock = VirtualClock()
    server = _virtual_server(workdir, clock)
    exp = recipe.config.experiment_id if recipe.config.experiment_id != "default" else "tap"
    client = None
    if flavour != "csv":
        lib = MeasurementLibrary(clock)
        define_tap_mps(lib)
        cfg = _client_config(tap_config(flavour, WindowSpec.by_time(recipe.report_interval), exp), recipe)
        client = VirtualClient(lib, cfg, {"s": LocalEndpoint(server, clock)}, clock, drain_fps=recipe.reporter_rate)
        ancillary_report(lib, VERSION, ["--flavour", flavour], "tap")
    path = Path(recipe.path_config(seed))
    rng = np.random.default_rng(seed)
    log = run_probe_sender(path, rate, recipe.duration, ProbeFlavour("vanilla-csv"), recipe.costs,
                           seed=int(rng.integers(2**63)), size=recipe.packet_size)
    records = log.records
    tap = run_tap_reporter(records, flavour, client, cost_us=recipe.tap_cost_us)
    dt = recipe.report_interval
    n_windows = int(math.ceil(recipe.duration / dt - 1e-9))
    cons = Conservation()
    valid = True
    tdiff = None
    if client is not None:
        clock.now = max(recipe.duration, tap.last_inject_us / 1e6)
        summary = client.close()
        report = server.finalize(exp)
        cons.add(summary, report, "receiver")
        valid = summary.valid and not report.invalid_sessions
        store = load_store(workdir / exp, streams={"ip", "ip_bytes"})
        if flavour == "mp":
            ip = store.table("ip").rows
            loss = compute_loss_ratio(records, dt, reported_ids=[r[3] for r in ip], n_windows=n_windows)
            tdiff = compute_timestamp_diff(records, [(r[3], r[0]) for r in ip])
        else:
            w = int(round(dt * 1e6))
            counts = {}
            for r in store.table("ip_bytes").rows:
                k = int(round(r[3] * 1e6)) // w
                c, b = counts.get(k, (0, 0))
                counts[k] = (c + r[5], b + r[7])
            loss = compute_loss_ratio(records, dt, window_counts=counts, n_windows=n_windows)
    else:
        rows = parse_tap_csv(tap.csv)
        loss = compute_loss_ratio(records, dt, reported_ids=[r[1] for r in rows], n_windows=n_windows)
        tdiff = compute_timestamp_diff(records, [(r[1], r[0]) for r in rows])
    eg = egress_rate(records, dt, recipe.duration)
    ok = ~np.isnan(loss.loss)
    responses = {
        "loss_ratio": loss.loss[ok],
        "received_rate_diff": (eg - loss.received_rate)[ok],
    }
    extra = {"captured": tap.captured}
    if tdiff is not None:
        responses["timestamp_diff"] = tdiff[0]
        extra["timestamp_summary"] = tdiff[1]
    return CellRun((flavour, rate), rep, responses, cons, valid, extra)


# set 3 -----------------------------------------------------------------------


class _TeeTransport(Transport):
    """Forwards to the collection server and records each transmission's size."""

    def __init__(self, inner: LocalTransport, sizes: list):
        self.inner = inner
        self.sizes = sizes

    def handshake(self, header: bytes) -> None:
        self.inner.handshake(header)

    def send(self, data: bytes) -> None:
        self.sizes.append(len(data))
        self.inner.send(data)

    def close(self) -> None:
        self.inner.close()


class _TeeEndpoint:
    def __init__(self, server: CollectionServer, clock, sizes: list):
        self.server, self.clock, self.sizes = server, clock, sizes

    def open(self):
        return _TeeTransport(LocalTransport(self.server, self.clock), self.sizes)


def run_contention_cell(
    recipe: Recipe, sampling: Fraction, size: int, rep: int, seed: int, workdir: FsPath, dedicated: bool = False
) -> CellRun:
    clock = VirtualClock()
    server = _virtual_server(workdir, clock)
    exp = "contention"
    sizes: list[int] = []
    lib = MeasurementLibrary(clock)
    define_tap_mps(lib)
    every = max(1, int(round(1 / sampling)))
    cfg = _client_config(tap_config("mp-filtered", WindowSpec.by_count(every), exp), recipe)
    client = VirtualClient(lib, cfg, {"s": _TeeEndpoint(server, clock, sizes)}, clock)
    ancillary_report(lib, VERSION, ["--sampling", str(sampling)], "tap")
    medium = SharedMedium(recipe.medium_capacity, recipe.medium_overhead_us, recipe.medium_overhead_jitter_us, seed)
    counter = [0]

    def on_delivery(t_us: int, nbytes: int) -> list[int]:
        clock.set_us(t_us)
        lib.inject("ip", [counter[0], "10.0.0.1", "10.0.0.2", nbytes, 64])
        counter[0] += 1
        before = len(sizes)
        client.reporter.pump()
        return [s + REPORT_OVERHEAD for s in sizes[before:]]

    result = run_contention(medium, size, recipe.duration, on_delivery, reports_on_medium=not dedicated)
    clock.now = recipe.duration
    summary = client.close()
    report = server.finalize(exp)
    cons = Conservation()
    cons.add(summary, report, "receiver")
    dt_us = int(round(recipe.report_interval * 1e6))
    n_windows = int(math.ceil(recipe.duration / recipe.report_interval - 1e-9))
    per_window = np.zeros(n_windows)
    for end, nbytes in medium.flows["experiment"].completions:
        k = end // dt_us
        if k < n_windows:
            per_window[k] += nbytes
    responses = {"throughput": per_window / recipe.report_interval}
    return CellRun((str(sampling), size, "dedicated" if dedicated else "shared"), rep, responses, cons, summary.valid,
                   {"throughput": result.throughput, "reports": result.report_count, "report_bytes": result.report_bytes})


# orchestration -----------------------------------------------------------------


def _mbit(rate: float) -> str:
    return f"{rate / 1e6:g}M"


def _analyse(recipe: Recipe, response: str, subset: str, factors, series: list[ResponseSeries]) -> Analysis:
    a = Analysis(response, subset, factors, series)
    run_analysis(a, recipe.alpha, recipe.n_perm, recipe.seed)
    return a


def run_analysis(a: Analysis, alpha: float, n_perm: int, seed: int) -> Analysis:
    values = np.concatenate([np.asarray(s.values, dtype=float)[1:-1] for s in a.series]) if a.series else np.array([])
    if values.size and np.all(values == values[0]):
        a.note = f"every trimmed value equals {float(values[0])!r}: no variation, all nulls retained"
        return a
    try:
        a.result = analysis_pipeline(a.series, alpha, n_perm, seed, factors=a.factors)
    except DegenerateVariance as exc:
        a.note = f"degenerate residual variance ({exc}): not analysed"
    return a


def run_set(recipe: Recipe, workdir: Optional[FsPath] = None, keep_stores: bool = False) -> SetResult:
    """Run every cell and repetition of `recipe`, then analyse each response."""
    tmp = None
    if workdir is None:
        tmp = tempfile.mkdtemp(prefix="obsmeter-")
        workdir = FsPath(tmp)
    workdir = FsPath(workdir)
    try:
        if recipe.set_id == 1:
            return _run_set1(recipe, workdir, keep_stores)
        if recipe.set_id == 2:
            return _run_set2(recipe, workdir, keep_stores)
        return _run_set3(recipe, workdir, keep_stores)
    finally:
        if tmp is not None:
            shutil.rmtree(tmp, ignore_errors=True)


def _cell_dir(workdir: FsPath, keep: bool, *parts) -> FsPath:
    d = workdir.joinpath(*[str(p).replace("/", "_") for p in parts])
    if d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True)
    return d


def _done(d: FsPath, keep: bool) -> None:
    if not keep:
        shutil.rmtree(d, ignore_errors=True)


def _check(run: CellRun) -> CellRun:
    if not run.valid:
        raise InvalidRun(f"cell {run.cell} repetition {run.rep}: transport lost, run invalid")
    return run


def _run_set1(recipe: Recipe, workdir: FsPath, keep: bool) -> SetResult:
    runs = []
    for ri, rate in enumerate(recipe.rates):
        for fi, name in enumerate(recipe.flavours):
            for ti, threads in enumerate(recipe.threads):
                for rep in range(recipe.repetitions):
                    fl = ProbeFlavour(name, threads)
                    d = _cell_dir(workdir, keep, f"{name}-{'on' if threads else 'off'}-{_mbit(rate)}", rep)
                    runs.append(_check(run_probe_cell(recipe, fl, rate, rep, run_seed(recipe, ri, fi, ti, rep), d)))
                    _done(d, keep)
    analyses = []
    for rate in recipe.rates:
        for response in ("sending_rate", "throughput_diff", "jitter_diff"):
            series = [
                ResponseSeries(r.responses[response], r.cell[0], r.cell[1], str(r.rep))
                for r in runs if r.cell[2] == rate
            ]
            analyses.append(_analyse(recipe, response, _mbit(rate), ("oml", "threads"), series))
    return SetResult(recipe, runs, analyses)


def _run_set2(recipe: Recipe, workdir: FsPath, keep: bool) -> SetResult:
    runs = []
    for ri, rate in enumerate(recipe.rates):
        for fi, name in enumerate(recipe.flavours):
            for rep in range(recipe.repetitions):
                d = _cell_dir(workdir, keep, f"{name}-{_mbit(rate)}", rep)
                runs.append(_check(run_tap_cell(recipe, name, rate, rep, run_seed(recipe, ri, fi, rep), d)))
                _done(d, keep)
    analyses = []
    if len(recipe.rates) >= 2 and len(recipe.flavours) >= 2:
        for response in ("loss_ratio", "received_rate_diff"):
            series = [ResponseSeries(r.responses[response], r.cell[0], _mbit(r.cell[1]), str(r.rep)) for r in runs]
            analyses.append(_analyse(recipe, response, "all", ("oml", "rate"), series))
    lines = ["flavour\trate\tmin\tmed\tavg\tmax\tsd\tn"]
    for rate in recipe.rates:
        for name in recipe.flavours:
            diffs = [r.responses["timestamp_diff"] for r in runs if r.cell == (name, rate) and "timestamp_diff" in r.responses]
            if not diffs:
                continue
            s = Summary.of(np.concatenate(diffs))
            lines.append(f"{name}\t{_mbit(rate)}\t{s.min!r}\t{s.med!r}\t{s.avg!r}\t{s.max!r}\t{s.sd!r}\t{s.n}")
    return SetResult(recipe, runs, analyses, {"timestamp_diff.tsv": "\n".join(lines) + "\n"})


def _run_set3(recipe: Recipe, workdir: FsPath, keep: bool) -> SetResult:
    runs, bounds = [], []
    for zi, size in enumerate(recipe.sizes):
        for rep in range(recipe.repetitions):
            d = _cell_dir(workdir, keep, f"bound-{size}", rep)
            seed = run_seed(recipe, zi, len(recipe.sampling), rep)
            bounds.append(_check(run_contention_cell(recipe, recipe.sampling[-1], size, rep, seed, d, dedicated=True)))
            _done(d, keep)
            for si, sampling in enumerate(recipe.sampling):
                d = _cell_dir(workdir, keep, f"{sampling}-{size}", rep)
                seed = run_seed(recipe, zi, si, rep)
                runs.append(_check(run_contention_cell(recipe, sampling, size, rep, seed, d)))
                _done(d, keep)
    series = [ResponseSeries(r.responses["throughput"], r.cell[0], str(r.cell[1]), str(r.rep)) for r in runs]
    analyses = [_analyse(recipe, "throughput", "all", ("sampling", "size"), series)]
    lines = ["frequency\tsize\tmean\tsd\tbound_mean\tbound_sd\truns"]
    for size in recipe.sizes:
        b = np.array([r.extra["throughput"] for r in bounds if r.cell[1] == size])
        for sampling in recipe.sampling:
            v = np.array([r.extra["throughput"] for r in runs if r.cell[:2] == (str(sampling), size)])
            sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
            bsd = float(np.std(b, ddof=1)) if b.size > 1 else 0.0
            lines.append(f"{float(sampling)!r}\t{size}\t{float(v.mean())!r}\t{sd!r}\t{float(b.mean())!r}\t{bsd!r}\t{v.size}")
    return SetResult(recipe, runs + bounds, analyses, {"frequency_curve.tsv": "\n".join(lines) + "\n"})
