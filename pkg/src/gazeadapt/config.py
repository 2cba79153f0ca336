"""Flat ``key = value`` configuration files.

Format::

    # comment
    include base.cfg          # path relative to the including file
    adapt.lr = 0.0001
    selection = C3C5

Later assignments override earlier ones, so keys set after an ``include``
override the included file. Values are kept as strings here; typed schemas
live next to the code that consumes them (see :func:`coerce`).
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Any, Callable, Mapping

from .errors import ConfigurationError


def parse_text(text: str, base_dir: Path | None = None, _seen=None) -> dict[str, str]:
    base_dir = Path(base_dir or ".")
    seen = set() if _seen is None else _seen
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include ") or line.startswith("include\t"):
            inc = (base_dir / line.split(None, 1)[1].strip()).resolve()
            if inc in seen:
                raise ConfigurationError(f"include cycle at {inc}")
            out.update(load_file(inc, _seen=seen | {inc}))
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load_file(path, _seen=None) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    seen = {path.resolve()} if _seen is None else _seen
    return parse_text(path.read_text(), path.parent, seen)


def dump_text(values: Mapping[str, Any]) -> str:
    """Canonical snapshot: sorted keys, one per line, trailing newline."""
    return "".join(f"{k} = {_fmt(values[k])}\n" for k in sorted(values))


def config_hash(values: Mapping[str, Any]) -> str:
    return hashlib.sha256(dump_text(values).encode()).hexdigest()[:16]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_bool(s: str) -> bool:
    low = str(s).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {s!r}")


def coerce(values: Mapping[str, str], schema: Mapping[str, Callable[[str], Any]],
           defaults: Mapping[str, Any]) -> dict[str, Any]:
    """Type-convert ``values`` against ``schema``; unknown keys are errors."""
    unknown = sorted(set(values) - set(schema))
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
    out = dict(defaults)
    for key, raw in values.items():
        conv = schema[key]
        try:
            out[key] = conv(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"bad value for {key}: {raw!r} ({exc})") from None
    return out


SECTIONS = ("data", "stage1", "adapt", "grl", "ablate", "benchmark")


def section(values: Mapping[str, str], name: str) -> dict[str, str]:
    """Keys of one section with the ``name.`` prefix stripped.

    Unprefixed keys pass through; keys of the other sections are dropped, so
    one experiment file can drive every subcommand.
    """
    if name not in SECTIONS:
        raise ConfigurationError(f"unknown config section {name!r}")
    out = {}
    for key, value in values.items():
        head, _, rest = key.partition(".")
        if head == name and rest:
            out[rest] = value
        elif head not in SECTIONS or not rest:
            out.setdefault(key, value)
    return out


def section_only(values: Mapping[str, str], name: str) -> dict[str, str]:
    """Like :func:`section` but without the unprefixed keys."""
    prefix = name + "."
    section(values, name)  # validates the name
    return {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}
