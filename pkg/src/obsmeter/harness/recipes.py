"""Experiment recipes: a RunConfig file plus treatment-grid lines.

Grid lines (values in Mbit/s where a rate is expected)::

    set 1|2|3
    flavours <name>...            # probe flavours (set 1) or tap flavours (set 2)
    threads off on
    rates 1 5 10 25 50 100
    duration <s>
    repetitions <n>
    seed <n>
    interval <s>                  # report interval, >= 0.5
    packet-size <bytes>
    link <Mbit/s>                 # sets 1-2 path capacity
    path-delay <ms>               # sets 1-2 per-hop propagation delay
    path-jitter <model> <ms>      # sets 1-2 ingress delay jitter: none, uniform or gaussian
    path-loss <p>                 # sets 1-2 drop probability on the receiver hop
    sampling 1 1/10 1/50 1/100    # set 3 reports per captured packet
    sizes 1500 1000               # set 3 packet sizes
    medium <Mbit/s>               # set 3 shared capacity
    medium-overhead <us> [<us>]   # fixed and random per-transmission overhead
    cost <field>=<value>...       # CostModel overrides
    reporter-rate <frames/s>      # drain capacity of the measured client's reporter
    tap-cost <us>
    permutations <n>
    alpha <p>
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

from ..channel import PathConfig
from ..config import RunConfig, parse_config
from ..errors import ConfigError
from ..netbench.model import FLAVOURS, TAP_FLAVOURS, CostModel
from ..stats.pipeline import MIN_TRIMMED

DEFAULT_RATES = (1e6, 5e6, 10e6, 25e6, 50e6, 100e6)
DEFAULT_SAMPLING = (Fraction(1), Fraction(1, 10), Fraction(1, 50), Fraction(1, 100))
FULL_DURATION = 300.0


@dataclass
class Recipe:
    set_id: int
    flavours: tuple[str, ...] = ()
    threads: tuple[bool, ...] = (False, True)
    rates: tuple[float, ...] = DEFAULT_RATES
    duration: float = 10.0
    repetitions: int = 5
    seed: int = 1
    report_interval: float = 0.5
    packet_size: int = 1498
    link_capacity: float = 1e9
    path_delay: float = 0.0
    path_jitter_model: str = "uniform"
    path_jitter: float = 100e-6  # without transit variation every jitter report is trivially zero
    path_loss: float = 0.0
    sampling: tuple[Fraction, ...] = DEFAULT_SAMPLING
    sizes: tuple[int, ...] = (1500, 1000)
    medium_capacity: float = 20e6
    medium_overhead_us: int = 200
    medium_overhead_jitter_us: int = 100
    costs: CostModel = field(default_factory=CostModel)
    reporter_rate: Optional[float] = None
    tap_cost_us: int = 0
    n_perm: int = 999
    alpha: float = 0.05
    config: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        if self.set_id not in (1, 2, 3):
            raise ConfigError(f"set must be 1, 2 or 3, got {self.set_id}")
        if not self.flavours:
            self.flavours = FLAVOURS if self.set_id == 1 else TAP_FLAVOURS
        allowed = FLAVOURS if self.set_id == 1 else TAP_FLAVOURS
        for f in self.flavours:
            if self.set_id != 3 and f not in allowed:
                raise ConfigError(f"flavour {f!r} not valid for set {self.set_id}")
        if self.report_interval < 0.5:
            raise ConfigError("report interval must be at least 0.5 s")
        if self.repetitions < 1 or self.duration <= 0:
            raise ConfigError("need at least one repetition of positive duration")
        if self.duration / self.report_interval + 1e-9 < MIN_TRIMMED + 2:
            raise ConfigError(f"duration must span at least {MIN_TRIMMED + 2} report intervals")
        try:
            self.path_config(0)
        except ValueError as exc:
            raise ConfigError(f"bad path settings: {exc}") from exc
        grid = {1: len(self.flavours) * len(self.threads) * len(self.rates), 2: len(self.flavours) * len(self.rates),
                3: len(self.sampling) * len(self.sizes)}[self.set_id]
        if grid == 0:
            raise ConfigError("treatment grid is empty")

    def path_config(self, seed: int) -> PathConfig:
        return PathConfig(self.link_capacity, self.path_delay, self.path_jitter_model, self.path_jitter, self.path_loss, seed=seed)

    def full_scale(self) -> "Recipe":
        """Five-minute runs (600 half-second samples), ten Set 3 repetitions."""
        reps = max(self.repetitions, 10) if self.set_id == 3 else self.repetitions
        return dataclasses.replace(self, duration=FULL_DURATION, repetitions=reps)


def _rate(text: str) -> float:
    return float(text) * 1e6


def parse_recipe(text: str, set_id: Optional[int] = None) -> Recipe:
    cfg = parse_config(text)
    kw: dict = {"config": cfg}
    cost_kw: dict = {}
    for key, rest in cfg.extra:
        args = rest.split()
        try:
            if key == "set":
                kw["set_id"] = int(rest)
            elif key == "flavours":
                kw["flavours"] = tuple(args)
            elif key == "threads":
                kw["threads"] = tuple({"off": False, "on": True}[a] for a in args)
            elif key == "rates":
                kw["rates"] = tuple(_rate(a) for a in args)
            elif key == "duration":
                kw["duration"] = float(rest)
            elif key == "repetitions":
                kw["repetitions"] = int(rest)
            elif key == "seed":
                kw["seed"] = int(rest)
            elif key == "interval":
                kw["report_interval"] = float(rest)
            elif key == "packet-size":
                kw["packet_size"] = int(rest)
            elif key == "link":
                kw["link_capacity"] = _rate(rest)
            elif key == "path-delay":
                kw["path_delay"] = float(rest) / 1e3
            elif key == "path-jitter":
                kw["path_jitter_model"] = args[0]
                kw["path_jitter"] = float(args[1]) / 1e3 if len(args) > 1 else 0.0
            elif key == "path-loss":
                kw["path_loss"] = float(rest)
            elif key == "sampling":
                kw["sampling"] = tuple(Fraction(a) for a in args)
            elif key == "sizes":
                kw["sizes"] = tuple(int(a) for a in args)
            elif key == "medium":
                kw["medium_capacity"] = _rate(rest)
            elif key == "medium-overhead":
                kw["medium_overhead_us"] = int(args[0])
                if len(args) > 1:
                    kw["medium_overhead_jitter_us"] = int(args[1])
            elif key == "cost":
                for item in args:
                    name, _, value = item.partition("=")
                    cost_kw[name] = float(value)
            elif key == "reporter-rate":
                kw["reporter_rate"] = float(rest)
            elif key == "tap-cost":
                kw["tap_cost_us"] = int(rest)
            elif key == "permutations":
                kw["n_perm"] = int(rest)
            elif key == "alpha":
                kw["alpha"] = float(rest)
            else:
                raise ConfigError(f"unknown recipe directive {key!r}")
        except (KeyError, ValueError, IndexError) as exc:
            raise ConfigError(f"bad recipe line {key} {rest!r}: {exc}") from exc
    if set_id is not None:
        kw["set_id"] = set_id
    if "set_id" not in kw:
        raise ConfigError("recipe does not name a set")
    if cost_kw:
        try:
            kw["costs"] = CostModel(**cost_kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
    return Recipe(**kw)


def load_recipe(path, set_id: Optional[int] = None) -> Recipe:
    return parse_recipe(Path(path).read_text(encoding="utf-8"), set_id)


def default_recipe(set_id: int, **overrides) -> Recipe:
    base = {1: {}, 2: {}, 3: {"repetitions": 10}}[set_id]
    base.update(overrides)
    return Recipe(set_id, **base)
