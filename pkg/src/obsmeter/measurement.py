"""Measurement points, samples and the injection API used by instrumented tools."""

from __future__ import annotations

import enum
import math
import re
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .errors import (
    ArityMismatch,
    DuplicateMPName,
    EmptyFieldList,
    MalformedIdentifier,
    TypeMismatch,
    UnknownMPName,
)

IDENTIFIER = re.compile(r"[a-z][a-z0-9_]*\Z")

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1


class MetricType(str, enum.Enum):
    INT64 = "int64"
    FLOAT64 = "float64"
    TEXT = "text"

    @property
    def numeric(self) -> bool:
        return self is not MetricType.TEXT

    def coerce(self, value):
        """Return `value` as this type's Python representation or raise TypeMismatch."""
        if self is MetricType.INT64:
            if isinstance(value, bool) or not isinstance(value, int):
                # numpy integers are accepted, floats never are
                if hasattr(value, "dtype") and getattr(value.dtype, "kind", "") in "iu":
                    value = int(value)
                else:
                    raise TypeMismatch(f"expected int64, got {value!r}")
            if not INT64_MIN <= value <= INT64_MAX:
                raise TypeMismatch(f"{value} out of int64 range")
            return int(value)
        if self is MetricType.FLOAT64:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                if hasattr(value, "dtype") and getattr(value.dtype, "kind", "") in "iuf":
                    return float(value)
                raise TypeMismatch(f"expected float64, got {value!r}")
            return float(value)
        if value is None:
            return ""
        if not isinstance(value, str):
            raise TypeMismatch(f"expected text, got {value!r}")
        return value


def check_identifier(name: str) -> str:
    if not isinstance(name, str) or not IDENTIFIER.match(name):
        raise MalformedIdentifier(f"not a valid identifier: {name!r}")
    return name


@dataclass(frozen=True)
class MPSchema:
    name: str
    fields: tuple[tuple[str, MetricType], ...]
    index: int

    @property
    def arity(self) -> int:
        return len(self.fields)

    @property
    def field_names(self) -> tuple[str, ...]:
        return tuple(f for f, _ in self.fields)

    def field_type(self, field: str) -> MetricType:
        for name, mtype in self.fields:
            if name == field:
                return mtype
        raise KeyError(field)

    def coerce(self, values: Sequence) -> tuple:
        if len(values) != len(self.fields):
            raise ArityMismatch(
                f"{self.name} expects {len(self.fields)} values, got {len(values)}"
            )
        return tuple(t.coerce(v) for (_, t), v in zip(self.fields, values))


def make_fields(fields: Iterable[tuple[str, MetricType | str]]) -> tuple[tuple[str, MetricType], ...]:
    out = []
    seen = set()
    for name, mtype in fields:
        check_identifier(name)
        if name in seen:
            raise MalformedIdentifier(f"duplicate field name {name!r}")
        seen.add(name)
        out.append((name, MetricType(mtype)))
    if not out:
        raise EmptyFieldList("a measurement point needs at least one field")
    return tuple(out)


@dataclass(frozen=True)
class Sample:
    mp_index: int
    client_ts: float
    values: tuple


@dataclass(frozen=True)
class ClientIdentity:
    experiment_id: str
    node_id: str
    app_name: str
    start_time: float

    def __post_init__(self):
        if not self.experiment_id:
            raise ValueError("experiment-id must be non-empty")
        if not (self.start_time > 0 and math.isfinite(self.start_time)):
            raise ValueError("start-time must be a positive epoch")


class InjectOutcome(enum.Enum):
    ACCEPTED = "accepted"
    DROPPED = "dropped"


def quantize_us(seconds: float) -> float:
    """Round a timestamp to microsecond resolution."""
    return round(seconds * 1e6) / 1e6


class MonotonicClock:
    """Seconds since construction from the process monotonic clock."""

    def __init__(self):
        self._t0 = time.monotonic()

    def __call__(self) -> float:
        return time.monotonic() - self._t0


class _NoRoute:
    def push(self, sample):
        return True


_NO_ROUTE = _NoRoute()


class MeasurementLibrary:
    """Registry of measurement points plus the per-MP injection entry point.

    MPs are defined during a single setup phase. Once `attach` binds a route
    (normally the pipeline built by :func:`obsmeter.client.start`), each
    `inject` timestamps the sample and hands it to that route under a per-MP
    lock; MPs without a route are no-ops.
    """

    def __init__(self, clock: Callable[[], float] | None = None):
        self.clock = clock or MonotonicClock()
        self._schemas: list[MPSchema] = []
        self._by_name: dict[str, MPSchema] = {}
        self._routes: list = []
        self._locks: list[threading.Lock] = []
        self._last_ts: list[float] = []
        self._frozen = False
        self.accepted = 0
        self.dropped = 0
        self._count_lock = threading.Lock()

    @property
    def schemas(self) -> tuple[MPSchema, ...]:
        return tuple(self._schemas)

    def schema(self, name: str) -> MPSchema:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownMPName(name) from None

    def define_mp(self, name: str, fields) -> MPSchema:
        if self._frozen:
            raise RuntimeError("measurement points must be defined before injection starts")
        check_identifier(name)
        if name in self._by_name:
            raise DuplicateMPName(name)
        schema = MPSchema(name, make_fields(fields), len(self._schemas))
        self._schemas.append(schema)
        self._by_name[name] = schema
        self._routes.append(_NO_ROUTE)
        self._locks.append(threading.Lock())
        self._last_ts.append(0.0)
        return schema

    def attach(self, routes: dict[int, object]) -> None:
        """Bind per-MP routes; each route exposes ``push(sample) -> bool``."""
        self._frozen = True
        for index in range(len(self._routes)):
            self._routes[index] = routes.get(index, _NO_ROUTE)

    def detach(self) -> None:
        for index in range(len(self._routes)):
            self._routes[index] = _NO_ROUTE

    def inject(self, mp: MPSchema | str, values: Sequence) -> InjectOutcome:
        if isinstance(mp, str):
            mp = self.schema(mp)
        values = mp.coerce(values)
        self._frozen = True
        route = self._routes[mp.index]
        if route is _NO_ROUTE:
            with self._count_lock:
                self.accepted += 1
            return InjectOutcome.ACCEPTED
        with self._locks[mp.index]:
            ts = quantize_us(self.clock())
            # monotone per MP even if a virtual clock is fed out of order
            if ts < self._last_ts[mp.index]:
                ts = self._last_ts[mp.index]
            self._last_ts[mp.index] = ts
            ok = route.push(Sample(mp.index, ts, values))
        with self._count_lock:
            if ok:
                self.accepted += 1
            else:
                self.dropped += 1
        return InjectOutcome.ACCEPTED if ok else InjectOutcome.DROPPED
