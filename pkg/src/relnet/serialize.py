"""Byte-stable JSON and CSV emission.

Reports, checkpoints and relationship exports must reproduce identical
bytes across runs with the same seed.  The stdlib ``json`` module does
not let callers control float formatting, so a small recursive emitter
is used instead: floats are rendered with ``%.17g`` (shortest form that
round-trips a double), dict insertion order is preserved, and the
output layout is fixed.
"""

from __future__ import annotations

import json

import numpy as np

__all__ = ["format_float", "dumps_json", "dump_json", "load_json", "write_csv_rows"]


def format_float(x: float) -> str:
    """Render a finite float with 17 significant digits.

    ``-0.0`` is normalized to ``0`` so reload/re-emit cycles are stable.
    """
    x = float(x)
    if not np.isfinite(x):
        raise ValueError(f"cannot serialize non-finite value {x!r}")
    if x == 0.0:
        return "0"
    return format(x, ".17g")


def _emit(obj, parts, indent, level):
    pad = indent * level
    child = indent * (level + 1)
    if isinstance(obj, dict):
        if not obj:
            parts.append("{}")
            return
        parts.append("{\n")
        for i, (key, value) in enumerate(obj.items()):
            if not isinstance(key, str):
                raise TypeError(f"JSON object keys must be str, got {type(key)}")
            parts.append(child)
            parts.append(json.dumps(key))
            parts.append(": ")
            _emit(value, parts, indent, level + 1)
            parts.append(",\n" if i < len(obj) - 1 else "\n")
        parts.append(pad + "}")
    elif isinstance(obj, (list, tuple)):
        items = list(obj)
        if not items:
            parts.append("[]")
            return
        # Flat numeric lists stay on one line; nested structures wrap.
        if all(not isinstance(v, (dict, list, tuple)) for v in items):
            parts.append("[")
            parts.append(", ".join(_scalar(v) for v in items))
            parts.append("]")
        else:
            parts.append("[\n")
            for i, value in enumerate(items):
                parts.append(child)
                _emit(value, parts, indent, level + 1)
                parts.append(",\n" if i < len(items) - 1 else "\n")
            parts.append(pad + "]")
    else:
        parts.append(_scalar(obj))


def _scalar(obj) -> str:
    if isinstance(obj, bool) or isinstance(obj, np.bool_):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(obj)
    raise TypeError(f"cannot serialize {type(obj)} to JSON")


def dumps_json(obj) -> str:
    """Serialize ``obj`` to a deterministic JSON string (trailing newline)."""
    parts = []
    _emit(obj, parts, "  ", 0)
    parts.append("\n")
    return "".join(parts)


def dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_json(obj))


def load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_csv_rows(path, header, rows) -> None:
    """Write CSV with ``\\n`` newlines and ``%.17g`` floats.

    Cells that are floats are formatted with :func:`format_float`; other
    cells are written with ``str``.  Cells must not contain commas.
    """
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for cell in row:
            if isinstance(cell, (float, np.floating)):
                text = format_float(cell)
            else:
                text = str(cell)
            if "," in text:
                raise ValueError(f"CSV cell may not contain a comma: {text!r}")
            cells.append(text)
        lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
