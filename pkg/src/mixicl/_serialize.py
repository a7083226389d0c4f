"""Text rendering of floats with 17 significant digits (exact round-trip)."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def fmt_float(x) -> str:
    x = float(x)
    if np.isnan(x):
        return "NaN"
    if np.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def json_array(v) -> str:
    return "[" + ", ".join(fmt_float(x) for x in np.asarray(v).reshape(-1)) + "]"


def write_weights_jsonl(path, weights) -> None:
    """One component per line, each a JSON array of floats."""
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    with open(path, "w") as fh:
        for row in w:
            fh.write(json_array(row) + "\n")


def read_weights_jsonl(path) -> np.ndarray:
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        raise ValueError(f"{path}: no weight rows")
    w = np.array(rows, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"{path}: rows have inconsistent lengths")
    return w
