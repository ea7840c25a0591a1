"""CSV tables with a leading metadata comment line.

Every table starts with ``# rfqgate key=value ...`` followed by a header row.
Floats are written with ``repr`` so a round trip is exact.
"""

from __future__ import annotations

import csv
import os
import tempfile
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

MAGIC = "# rfqgate"


class TableError(ValueError):
    """A table is missing, empty or lacks a required column."""


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def format_meta(meta: Mapping[str, object]) -> str:
    parts = [f"{k}={_fmt(v)}" for k, v in meta.items()]
    return " ".join([MAGIC, *parts])


def parse_meta(line: str) -> dict[str, str]:
    if not line.startswith(MAGIC):
        raise TableError("missing metadata line")
    out = {}
    for tok in line[len(MAGIC):].split():
        key, _, val = tok.partition("=")
        out[key] = val
    return out


def write_table(path: str | Path, columns: Mapping[str, Sequence], meta: Mapping[str, object]) -> Path:
    """Write equal-length ``columns`` atomically (temp file + rename)."""
    path = Path(path)
    names = list(columns)
    cols = [list(columns[n]) for n in names]
    n = {len(c) for c in cols}
    if len(n) > 1:
        raise TableError(f"{path.name}: columns differ in length")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(format_meta(meta) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for row in zip(*cols):
                w.writerow([_fmt(x) for x in row])
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def read_table(path: str | Path, required: Sequence[str] = ()) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Read a table; numeric columns come back as float arrays, others as str arrays."""
    path = Path(path)
    if not path.is_file():
        raise TableError(f"{path}: no such file")
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        meta = parse_meta(first)
        rows = list(csv.reader(fh))
    if not rows:
        raise TableError(f"{path}: missing header row")
    header, body = rows[0], rows[1:]
    missing = [c for c in required if c not in header]
    if missing:
        raise TableError(f"{path.name}: missing column(s) {', '.join(missing)}")
    if not body:
        raise TableError(f"{path.name}: table is empty")
    cols: dict[str, np.ndarray] = {}
    for j, name in enumerate(header):
        raw = [r[j] for r in body]
        try:
            cols[name] = np.array([float(x) for x in raw])
        except ValueError:
            cols[name] = np.array(raw)
    return meta, cols
