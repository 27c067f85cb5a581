"""Flat ``key = value`` config files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .tensor_core import ValidationError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(raw: str, typ, where: str):
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if raw.lower() in ("none", ""):
            return None
        typ = next(a for a in args if a is not type(None))
    try:
        if typ is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ValidationError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def parse_kv(text: str, cls, source="<config>", base=None):
    """Build ``cls`` from ``key = value`` lines; unknown keys are errors."""
    hints = typing.get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls) if not f.name.startswith("_")}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ValidationError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(raw, hints[key], f"{source}:{lineno}: field {key!r}")
    if base is not None:
        return dataclasses.replace(base, **values)
    return cls(**values)


def load_kv(path, cls, base=None):
    return parse_kv(Path(path).read_text(encoding="utf-8"), cls, str(path), base)


def dump_kv(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
