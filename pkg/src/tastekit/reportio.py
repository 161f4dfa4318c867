"""Deterministic file I/O: headered CSV, canonical JSON, checkpoints.

Floats are written with ``repr`` (shortest round-trip form) and JSON is
serialised with sorted keys, so re-running a seeded command reproduces
output files byte for byte.  Non-finite floats become ``null`` in JSON and
``nan``/``inf`` tokens in CSV.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import DataFormatError


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def jsonable(obj):
    """Recursively convert numpy containers and non-finite floats."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(jsonable(obj), sort_keys=True, indent=2)
    path.write_text(text + "\n", encoding="utf-8")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: cannot parse JSON: {exc}") from exc


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ValueError("row width does not match header")
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_samples_csv(path, points, labels=None) -> None:
    """Points as one row per sample with columns x0..x{d-1}[, label]."""
    pts = np.asarray(points, dtype=np.float64)
    header = [f"x{i}" for i in range(pts.shape[1])]
    rows: list[list] = [list(r) for r in pts]
    if labels is not None:
        header.append("label")
        for row, lab in zip(rows, np.asarray(labels)):
            row.append(int(lab))
    write_csv(path, header, rows)


def read_samples_csv(path):
    """Parse a samples CSV; returns (points, labels-or-None).

    Errors carry 1-based line numbers.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    if not lines:
        raise DataFormatError(f"{path}:1: empty file")
    header = [h.strip() for h in lines[0].split(",")]
    has_label = header and header[-1] == "label"
    feature_cols = header[:-1] if has_label else header
    if feature_cols != [f"x{i}" for i in range(len(feature_cols))] or not feature_cols:
        raise DataFormatError(
            f"{path}:1: expected header x0,...,x{{d-1}}[,label], got {lines[0]!r}")
    d = len(feature_cols)
    pts, labels = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != len(header):
            raise DataFormatError(
                f"{path}:{lineno}: expected {len(header)} fields, got {len(cells)}")
        try:
            vals = [float(c) for c in cells[:d]]
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: bad number: {exc}") from exc
        if not all(math.isfinite(v) for v in vals):
            raise DataFormatError(f"{path}:{lineno}: non-finite coordinate")
        pts.append(vals)
        if has_label:
            cell = cells[-1].strip()
            if cell not in ("0", "1"):
                raise DataFormatError(f"{path}:{lineno}: label must be 0 or 1")
            labels.append(cell == "1")
    if not pts:
        raise DataFormatError(f"{path}: no data rows")
    points = np.asarray(pts, dtype=np.float64)
    return points, (np.asarray(labels, dtype=bool) if has_label else None)


def save_checkpoint(path, payload: dict) -> None:
    write_json(path, payload)


def load_checkpoint(path) -> dict:
    payload = read_json(path)
    if not isinstance(payload, dict) or "kind" not in payload:
        raise DataFormatError(f"{path}: not a checkpoint (missing 'kind')")
    return payload


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
