"""Virtual-time plumbing: a settable clock and a client whose reporter drains
at a finite rate measured in virtual seconds."""

from __future__ import annotations

import math
from typing import Mapping, Optional

from ..client import Reporter, start
from ..config import RunConfig, parse_config
from ..measurement import MeasurementLibrary


class VirtualClock:
    def __init__(self, now: float = 0.0):
        self.now = now

    def __call__(self) -> float:
        return self.now

    def set_us(self, us: int) -> None:
        self.now = us / 1e6


class VirtualClient:
    """A measurement library plus a manual-mode reporter on a virtual clock.

    `drain_fps` caps how many frames per virtual second leave the reporter's
    buffer (None means the sink keeps up with anything). Call :meth:`advance`
    whenever virtual time moves forward.
    """

    def __init__(
        self,
        library: MeasurementLibrary,
        config: RunConfig | str,
        endpoints: Mapping[str, object],
        clock: VirtualClock,
        drain_fps: Optional[float] = None,
        start_time: float = 1.0e9,
    ):
        if isinstance(config, str):
            config = parse_config(config)
        self.library = library
        self.clock = clock
        self.drain_fps = drain_fps
        self.reporter: Reporter = start(library, config, endpoints=endpoints, start_time=start_time, threaded=False)
        self._last = clock()
        self._credit = 0.0

    def advance(self) -> None:
        now = self.clock()
        if self.drain_fps is None:
            if len(self.reporter.buffer) >= 256:
                self.reporter.pump()
            self._last = now
            return
        if now > self._last:
            self._credit += (now - self._last) * self.drain_fps
            self._last = now
        n = math.floor(self._credit)
        if n > 0:
            done = self.reporter.pump(n)
            # unused credit does not accumulate while the buffer is empty
            self._credit = 0.0 if done < n else self._credit - n

    def close(self):
        return self.reporter.flush_and_close()
