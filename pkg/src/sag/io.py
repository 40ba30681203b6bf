"""Small file helpers: atomic writes, JSON, point CSVs."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path

import numpy as np


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n"


def write_json(path, obj) -> None:
    atomic_write_text(path, dumps(obj))


def read_json(path):
    return json.loads(Path(path).read_text())


def _default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_points(path, points) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    lines = ["x,y"] + [f"{x!r},{y!r}" for x, y in points.tolist()]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_points(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["x", "y"]:
            raise ValueError(f"{path}: point CSV must start with header 'x,y'")
        rows = [(float(x), float(y)) for x, y in reader]
    return np.array(rows, dtype=np.float64).reshape(-1, 2)
