"""CSV and JSON writers with a fixed, reproducible text format."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .errors import IoError, Malformed


def format_value(v):
    """Reals with 6 decimals, integers as-is, None as an empty field."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.6f}"
    return str(v)


def write_csv(path, header, rows):
    """Comma-delimited, header row first, ``\\n`` line endings."""
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                if isinstance(row, dict):
                    row = [row[h] for h in header]
                w.writerow([format_value(v) for v in row])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, obj):
    """Sorted keys, two-space indent; non-finite reals become null."""
    try:
        with open(path, "w") as fh:
            json.dump(_plain(obj), fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_reference_csv(path):
    """``layer,um`` rows as a list of (name, float)."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    out = []
    for i, row in enumerate(rows, start=2):
        try:
            out.append((row["layer"].strip(), float(row["um"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise Malformed(f"{path}:{i}: expected columns layer,um") from exc
    return out
