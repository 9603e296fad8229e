"""INI run configuration.

Sections: ``[model]`` (``name`` plus builder parameters), ``[engine]``
(any ``EngineConfig`` field), ``[sweep]`` (parameter grids) and ``[run]``
(``seed``, ``workers``, ``out``).  Grid values are comma-separated numbers or
``linspace(start, stop, count)``.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .engine import EngineConfig
from .models import INT_PARAMS, MODEL_PARAMS


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        where = f"{path or '<config>'}" + (f":{line}" if line is not None else "")
        super().__init__(f"{where}: {message}")


@dataclass
class RunConfig:
    model: str
    params: dict[str, Any]
    engine: EngineConfig
    sweep: dict[str, list[float]] = field(default_factory=dict)
    seed: int = 0
    workers: Optional[int] = None
    out: str = "out"
    text: str = ""

    def echo(self) -> list[str]:
        """Config source lines for output headers."""
        return [ln for ln in self.text.splitlines() if ln.strip()]


_LINSPACE = re.compile(r"^linspace\(\s*([^,]+),\s*([^,]+),\s*([^,)]+)\)$")


def parse_grid(text: str) -> list[float]:
    text = text.strip()
    m = _LINSPACE.match(text)
    if m:
        start, stop, count = float(m.group(1)), float(m.group(2)), int(m.group(3))
        if count < 1:
            raise ValueError("linspace count must be positive")
        return [float(x) for x in np.linspace(start, stop, count)]
    vals = [float(v) for v in text.split(",") if v.strip()]
    if not vals:
        raise ValueError("empty grid")
    return vals


def _line_numbers(text: str) -> dict[tuple[str, str], int]:
    """Map ``(section, key)`` to the 1-based line that defines it."""
    out = {}
    section = None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
        if section is not None:
            out[(section, key)] = i
    return out


_ENGINE_FIELDS = {f.name: f for f in fields(EngineConfig)}


def _coerce_engine(key: str, value: str):
    f = _ENGINE_FIELDS[key]
    default = f.default
    if key == "chi_schedule":
        return tuple(int(v) for v in value.split(",") if v.strip())
    if key == "c_value":
        return None if value.strip().lower() in ("", "none", "auto") else float(value)
    if isinstance(default, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(value)
    return float(value)


def parse_config(text: str, path: Optional[str] = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=path or "<config>")
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("content before the first section header", exc.lineno, path) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line", line, path) from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigError(str(exc.message if hasattr(exc, "message") else exc).split(": ", 1)[-1],
                          getattr(exc, "lineno", None), path) from None
    lines = _line_numbers(text)

    def where(section, key=None):
        if key is None:
            for (s, _), ln in sorted(lines.items(), key=lambda kv: kv[1]):
                if s == section:
                    return ln - 1
            return None
        return lines.get((section, key.lower()))

    known = {"model", "engine", "sweep", "run"}
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"unknown section [{sec}]", where(sec), path)
    if not cp.has_section("model") or not cp.has_option("model", "name"):
        raise ConfigError("missing [model] name", None, path)
    model = cp.get("model", "name").strip()
    if model not in MODEL_PARAMS:
        raise ConfigError(f"unknown model {model!r}; available: {', '.join(sorted(MODEL_PARAMS))}",
                          where("model", "name"), path)
    params: dict[str, Any] = {}
    for key, value in cp.items("model"):
        if key == "name":
            continue
        if key not in MODEL_PARAMS[model]:
            raise ConfigError(f"unknown parameter {key!r} for model {model!r}", where("model", key), path)
        try:
            params[key] = int(value) if key in INT_PARAMS else float(value)
        except ValueError:
            raise ConfigError(f"parameter {key!r} expects a number, got {value!r}", where("model", key), path) from None
    eng_kwargs = {}
    if cp.has_section("engine"):
        for key, value in cp.items("engine"):
            if key not in _ENGINE_FIELDS:
                raise ConfigError(f"unknown engine setting {key!r}", where("engine", key), path)
            try:
                eng_kwargs[key] = _coerce_engine(key, value)
            except ValueError as exc:
                raise ConfigError(f"engine setting {key!r}: {exc}", where("engine", key), path) from None
    try:
        engine = EngineConfig(**eng_kwargs)
    except Exception as exc:
        raise ConfigError(f"invalid engine settings: {exc}", where("engine"), path) from None
    sweep = {}
    if cp.has_section("sweep"):
        for key, value in cp.items("sweep"):
            if key not in MODEL_PARAMS[model]:
                raise ConfigError(f"cannot sweep {key!r}: not a parameter of {model!r}", where("sweep", key), path)
            try:
                sweep[key] = parse_grid(value)
            except ValueError as exc:
                raise ConfigError(f"bad grid for {key!r}: {exc}", where("sweep", key), path) from None
    seed, workers, out = 0, None, "out"
    if cp.has_section("run"):
        for key, value in cp.items("run"):
            try:
                if key == "seed":
                    seed = int(value)
                elif key == "workers":
                    workers = int(value)
                    if workers < 1:
                        raise ValueError("must be at least 1")
                elif key == "out":
                    out = value.strip()
                else:
                    raise ConfigError(f"unknown run setting {key!r}", where("run", key), path)
            except ValueError as exc:
                raise ConfigError(f"run setting {key!r}: {exc}", where("run", key), path) from None
    return RunConfig(model, params, engine, sweep, seed, workers, out, text)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, str(p)) from None
    return parse_config(text, str(p))
