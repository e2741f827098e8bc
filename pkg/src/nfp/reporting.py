"""JSON report helpers: stable key order, numpy-safe values, atomic writes."""

from __future__ import annotations

import datetime as _dt
import json
import os
from pathlib import Path

import numpy as np


def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(jsonable(obj), indent=2, allow_nan=False) + "\n"


def write_json(obj, path) -> Path:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_text(dumps(obj))
    os.replace(tmp, path)
    return path


def meta(**extra) -> dict:
    d = {"timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}
    d.update(extra)
    return d


def strip_meta(obj):
    """Drop every ``meta`` key recursively (for determinism comparisons)."""
    if isinstance(obj, dict):
        return {k: strip_meta(v) for k, v in obj.items() if k != "meta"}
    if isinstance(obj, list):
        return [strip_meta(v) for v in obj]
    return obj
