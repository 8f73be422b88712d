"""Tiny TOML writer for config snapshots (tomllib/tomli handle reading).

Covers what run configs need: scalars, flat lists, lists of flat tables
(inline), and nested tables. Emitted text re-parses to an equal mapping.
"""

from __future__ import annotations

import json
from typing import Mapping


def _scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, str):
        return json.dumps(value)
    raise TypeError(f"cannot render {type(value).__name__} as a TOML scalar")


def _value(value) -> str:
    if isinstance(value, Mapping):
        return "{" + ", ".join(f"{k} = {_value(v)}" for k, v in value.items()) + "}"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_value(v) for v in value) + "]"
    return _scalar(value)


def dump_toml(data: Mapping, _prefix: str = "") -> str:
    lines: list[str] = []
    tables: list[tuple[str, Mapping]] = []
    for key, value in data.items():
        if isinstance(value, Mapping):
            tables.append((key, value))
        else:
            lines.append(f"{key} = {_value(value)}")
    out = "\n".join(lines)
    for key, table in tables:
        path = f"{_prefix}.{key}" if _prefix else key
        body = dump_toml(table, path)
        out += f"\n\n[{path}]\n{body}" if body else f"\n\n[{path}]"
    return out.strip() + "\n" if out.strip() else ""
