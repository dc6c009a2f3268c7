"""Flat ``key = value`` configuration files for experiment settings.

Every ExperimentSpec field is a key; fields of its nested ``transfer`` config
are addressed as ``transfer.<field>``.  Lines starting with ``#`` are
comments.  Unknown or repeated keys are errors.  Tuples are comma-separated
and ``none`` stands for an unset optional value.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path
from typing import Any, Mapping

NESTED = "transfer"


def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _parse_scalar(text: str, tp) -> Any:
    if tp is bool:
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes")
    if tp in (int, float, str):
        return tp(text)
    raise TypeError(f"unsupported config type {tp!r}")


def parse_value(text: str, tp) -> Any:
    """Convert ``text`` to the annotated type ``tp``."""
    text = text.strip()
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if type(None) in args and text.lower() == "none":
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return parse_value(text, inner)
    if origin is tuple:
        args = typing.get_args(tp)
        if not text:
            return ()
        return tuple(_parse_scalar(x.strip(), args[0]) for x in text.split(","))
    return _parse_scalar(text, tp)


def format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{n}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ValueError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_config(text: str, spec_cls, overrides: Mapping[str, str] | None = None, source: str = "<config>"):
    """Build ``spec_cls`` from config text; ``overrides`` win over the file."""
    pairs = parse_lines(text, source)
    pairs.update(overrides or {})
    hints = _hints(spec_cls)
    nested_cls = None
    if NESTED in hints:
        nested_cls = typing.get_args(hints[NESTED])[0] if typing.get_args(hints[NESTED]) else hints[NESTED]
    top: dict[str, Any] = {}
    nested: dict[str, Any] = {}
    for key, value in pairs.items():
        if key.startswith(NESTED + ".") and nested_cls is not None:
            name = key[len(NESTED) + 1:]
            nested_hints = _hints(nested_cls)
            if name not in nested_hints:
                raise ValueError(f"{source}: unknown key {key!r}")
            nested[name] = parse_value(value, nested_hints[name])
        elif key in hints and key != NESTED:
            top[key] = parse_value(value, hints[key])
        else:
            raise ValueError(f"{source}: unknown key {key!r}")
    if nested_cls is not None:
        default = next(f for f in dataclasses.fields(spec_cls) if f.name == NESTED).default_factory()
        top[NESTED] = dataclasses.replace(default, **nested)
    return spec_cls(**top)


def dump_config(spec) -> str:
    lines = []
    for f in dataclasses.fields(spec):
        value = getattr(spec, f.name)
        if dataclasses.is_dataclass(value):
            for g in dataclasses.fields(value):
                lines.append(f"{f.name}.{g.name} = {format_value(getattr(value, g.name))}")
        else:
            lines.append(f"{f.name} = {format_value(value)}")
    return "\n".join(lines) + "\n"


def write_config(spec, path: str | Path) -> None:
    Path(path).write_text(dump_config(spec), encoding="utf-8")
