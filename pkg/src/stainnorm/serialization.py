"""JSON writing with 17-significant-digit reals.

``json.dumps`` emits the shortest round-tripping repr; model files here use
a fixed ``%.17g`` rendering so that files written by different tools compare
byte-for-byte.  Non-finite reals become the strings ``"inf"``, ``"-inf"`` and
``"nan"``.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any

import numpy as np


def format_real(value: float) -> str:
    value = float(value)
    if math.isnan(value):
        return '"nan"'
    if math.isinf(value):
        return '"inf"' if value > 0 else '"-inf"'
    text = format(value, ".17g")
    if "." not in text and "e" not in text and "n" not in text:
        text += ".0"
    return text


def dumps(obj: Any, indent: int | None = 1, _level: int = 0) -> str:
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_real(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    pad = "" if indent is None else "\n" + " " * (indent * (_level + 1))
    end = "" if indent is None else "\n" + " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{" + ",".join(items) + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        # numeric leaves stay on one line
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(dumps(v, indent, _level + 1) for v in obj) + "]"
        items = [f"{pad}{dumps(v, indent, _level + 1)}" for v in obj]
        return "[" + ",".join(items) + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def parse_real(value: Any) -> float:
    """Inverse of :func:`format_real` for values read back with ``json.loads``."""
    return float(value)


def write_json(obj: Any, path: str | Path) -> None:
    Path(path).write_text(dumps(obj) + "\n")


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text())
