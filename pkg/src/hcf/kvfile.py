"""Flat ``key = value`` text files used for configs, scalers and reports."""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Mapping


def read_kv(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def write_kv(path, items: Mapping, header: str | None = None) -> None:
    lines = [f"# {header}"] if header else []
    lines += [f"{k} = {format_value(v)}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def config_hash(items: Mapping) -> str:
    text = "\n".join(f"{k}={format_value(items[k])}" for k in sorted(items))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def parse_floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]
