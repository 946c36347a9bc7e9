"""Plain-text run configuration: one ``dotted.key = value`` per line.

Keys live under three roots::

    world.<WorldConfig field>
    fed.<FedConfig field>            fed.optimizer.<OptimizerConfig field>
    run.seeds / run.out

Values are parsed by shape: ``none``, ``true``/``false``, numbers, bare
strings, comma-separated tuples and ``;``-separated tuples of tuples (used
for ``fed.palette``). ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import InvalidConfig
from .federation import FedConfig
from .taskgen import WorldConfig
from .util import stable_hash


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    seeds: tuple[int, ...] = (0,)
    out: str = "out"

    def config_hash(self) -> str:
        """Hash of everything that affects numeric output (not the output path)."""
        return stable_hash({"world": self.world.as_dict(), "fed": self.fed.as_dict(),
                            "seeds": list(self.seeds)})

    def validate(self) -> None:
        if not self.seeds:
            raise InvalidConfig("run.seeds must list at least one seed")
        self.world.validate()
        self.fed.validate()


def _scalar(text: str):
    low = text.lower()
    if low in ("none", "null"):
        return None
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    return text


def parse_value(text: str):
    text = text.strip()
    if ";" in text:
        return tuple(parse_value(part) if "," in part else (_scalar(part.strip()),)
                     for part in text.split(";") if part.strip())
    if "," in text:
        return tuple(_scalar(p.strip()) for p in text.split(",") if p.strip())
    return _scalar(text)


def _coerce(value, default, key: str):
    """Shape a parsed value like the field's default so dataclass validation sees sane types."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InvalidConfig(f"{key}: expected true or false, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, tuple) and not isinstance(value, tuple):
        return (value,)
    if isinstance(default, tuple) and default and isinstance(default[0], float):
        return tuple(float(v) for v in value)
    if default is not None and value is not None and not isinstance(default, tuple):
        if isinstance(default, (int, float)) and not isinstance(value, (int, float)):
            raise InvalidConfig(f"{key}: expected a number, got {value!r}")
        if isinstance(default, str) and not isinstance(value, str):
            return str(value)
    return value


def _apply(obj, path: list[str], value, key: str):
    names = {f.name for f in dataclasses.fields(obj)}
    head = path[0]
    if head not in names:
        raise InvalidConfig(f"unknown key {key!r}")
    current = getattr(obj, head)
    if len(path) > 1:
        if not dataclasses.is_dataclass(current):
            raise InvalidConfig(f"unknown key {key!r}")
        return dataclasses.replace(obj, **{head: _apply(current, path[1:], value, key)})
    if dataclasses.is_dataclass(current):
        raise InvalidConfig(f"{key!r} is a section, set one of its fields instead")
    try:
        return dataclasses.replace(obj, **{head: _coerce(value, current, key)})
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"{key}: {exc}") from exc


def parse_lines(lines: Iterable[str], source: str = "<config>") -> list[tuple[str, str]]:
    pairs = []
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"{source}:{no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise InvalidConfig(f"{source}:{no}: empty key")
        pairs.append((key, value))
    return pairs


def build(pairs: Iterable[tuple[str, str]], base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for key, text in pairs:
        value = parse_value(text)
        root, _, rest = key.partition(".")
        if root == "run" and rest == "seeds":
            seeds = value if isinstance(value, tuple) else (value,)
            if not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
                raise InvalidConfig(f"run.seeds must be integers, got {text!r}")
            cfg = dataclasses.replace(cfg, seeds=tuple(seeds))
        elif root == "run" and rest == "out":
            cfg = dataclasses.replace(cfg, out=str(value))
        elif root in ("world", "fed") and rest:
            cfg = dataclasses.replace(cfg, **{root: _apply(getattr(cfg, root), rest.split("."), value, key)})
        else:
            raise InvalidConfig(f"unknown key {key!r}")
    try:
        cfg.validate()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InvalidConfig):
            raise
        raise InvalidConfig(str(exc)) from exc
    return cfg


def load(path, overrides: Iterable[str] = ()) -> RunConfig:
    """Read a config file and apply ``key=value`` overrides on top."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    pairs = parse_lines(text.splitlines(), str(path))
    pairs += parse_lines(overrides, "--set")
    return build(pairs)

