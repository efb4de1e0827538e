"""RunConfig: the plain-text file selecting streams, filters and servers.

Grammar, one directive per line, ``#`` starts a comment::

    experiment <id>
    node <id>
    app <name>
    server <host:port> [as <tag>]
    buffer <N>
    enable <mp> [-> <tag>[,<tag>...]]
    filter <out> = <kind>(<mp>.<field>[,<field>]) every <N>s|<N>samples [-> <tag>[,...]]

Streams without an explicit ``->`` go to every declared server. Unknown
directives are kept in ``extra`` so recipe files can extend the dialect.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, UnknownMPName
from .filters import FilterSpec, WindowSpec

ENV_VAR = "OBSMETER_CONFIG"
DEFAULT_BUFFER = 4096

_FILTER_RE = re.compile(
    r"""^(?P<out>\S+)\s*=\s*(?P<kind>[a-z]+)\(\s*(?P<src>[a-z][a-z0-9_]*)\.(?P<fields>[a-z0-9_,\s]+)\)
        \s+every\s+(?P<n>[0-9.]+)\s*(?P<unit>s|samples?)
        (?:\s*->\s*(?P<tags>\S+))?\s*$""",
    re.X,
)


@dataclass
class RunConfig:
    experiment_id: str = "default"
    node_id: str = "node"
    app_name: str = "app"
    servers: dict[str, str] = field(default_factory=dict)  # tag -> host:port
    buffer: int = DEFAULT_BUFFER
    enabled: dict[str, tuple[str, ...]] = field(default_factory=dict)  # mp -> tags
    filters: list[FilterSpec] = field(default_factory=list)
    filter_routes: dict[str, tuple[str, ...]] = field(default_factory=dict)
    extra: list[tuple[str, str]] = field(default_factory=list)

    def routes_for(self, stream: str) -> tuple[str, ...]:
        tags = self.enabled.get(stream) or self.filter_routes.get(stream) or ()
        return tags or tuple(self.servers)

    def referenced_mps(self) -> set[str]:
        """MP names the config names directly (enable lines and filter roots)."""
        outputs = {f.output for f in self.filters}
        names = set(self.enabled)
        names.update(f.source for f in self.filters if f.source not in outputs)
        return names


def _tags(text: str | None) -> tuple[str, ...]:
    if not text:
        return ()
    return tuple(t for t in (p.strip() for p in text.split(",")) if t)


def parse_filter(text: str) -> tuple[FilterSpec, tuple[str, ...]]:
    m = _FILTER_RE.match(text.strip())
    if not m:
        raise ConfigError(f"cannot parse filter declaration: {text!r}")
    fields = tuple(f.strip() for f in m["fields"].split(",") if f.strip())
    n = float(m["n"])
    window = WindowSpec.by_time(n) if m["unit"] == "s" else WindowSpec.by_count(int(n))
    try:
        spec = FilterSpec(m["out"], m["kind"], m["src"], fields, window)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return spec, _tags(m["tags"])


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, rest = line.partition(" ")
        rest = rest.strip()
        try:
            if key == "experiment":
                cfg.experiment_id = rest
            elif key == "node":
                cfg.node_id = rest
            elif key == "app":
                cfg.app_name = rest
            elif key == "server":
                parts = rest.split()
                if len(parts) == 3 and parts[1] == "as":
                    cfg.servers[parts[2]] = parts[0]
                elif len(parts) == 1:
                    cfg.servers[parts[0]] = parts[0]
                else:
                    raise ConfigError("expected: server <host:port> [as <tag>]")
            elif key == "buffer":
                cfg.buffer = int(rest)
                if cfg.buffer < 1:
                    raise ConfigError("buffer must be at least 1")
            elif key == "enable":
                name, _, tags = rest.partition("->")
                cfg.enabled[name.strip()] = _tags(tags)
            elif key == "filter":
                spec, tags = parse_filter(rest)
                cfg.filters.append(spec)
                if tags:
                    cfg.filter_routes[spec.output] = tags
            else:
                cfg.extra.append((key, rest))
        except (ConfigError, ValueError) as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    for stream in list(cfg.enabled) + [f.output for f in cfg.filters]:
        for tag in cfg.routes_for(stream):
            if tag not in cfg.servers:
                raise ConfigError(f"stream {stream} routed to undeclared server {tag!r}")
    return cfg


def load_config(path: str | os.PathLike | None = None) -> RunConfig:
    """Read a RunConfig from `path`, or from the file named by $OBSMETER_CONFIG."""
    if path is None:
        path = os.environ.get(ENV_VAR)
        if not path:
            raise ConfigError(f"no config path given and ${ENV_VAR} is unset")
    return parse_config(Path(path).read_text(encoding="utf-8"))


def enabled_mps(config: RunConfig, schemas) -> set[int]:
    """Indices of the MPs that produce at least one stream under `config`."""
    by_name = {s.name: s for s in schemas}
    out = set()
    for name in config.referenced_mps():
        if name not in by_name:
            raise UnknownMPName(name)
        out.add(by_name[name].index)
    return out
