"""Stable CSV serialization and the small statistical helpers shared by the
trainer (Spearman rank correlation, coefficient of variation, histogram
normalization)."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np


class CsvError(ValueError):
    """Malformed CSV content."""


def spearman(x, y) -> float:
    """Pearson correlation of rank vectors, average ranks on ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError(f"need two equal-length vectors of size >= 2, got {x.shape}, {y.shape}")
    rx, ry = _average_ranks(x), _average_ranks(y)
    sx, sy = rx.std(), ry.std()
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation undefined for constant input")
    return float(np.mean((rx - rx.mean()) * (ry - ry.mean())) / (sx * sy))


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def coeff_of_variation(counts) -> float:
    """Population standard deviation over mean."""
    c = np.asarray(counts, dtype=np.float64)
    m = c.mean()
    if m <= 0.0:
        raise ValueError("coefficient of variation needs a positive mean")
    return float(c.std() / m)


def normalize_histogram(counts) -> np.ndarray:
    c = np.asarray(counts, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        raise ValueError("cannot normalize an empty histogram")
    return c / total


@dataclass
class CsvTable:
    """Header plus homogeneous rows; numeric cells round-trip bit-exactly."""

    header: list[str]
    rows: list[list] = field(default_factory=list)

    def append(self, row: list):
        if len(row) != len(self.header):
            raise CsvError(f"row has {len(row)} cells, header has {len(self.header)}")
        self.rows.append(list(row))

    def column(self, name: str) -> list:
        idx = self.header.index(name)
        return [r[idx] for r in self.rows]

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        return (isinstance(other, CsvTable)
                and self.header == other.header and self.rows == other.rows)


def _format_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)  # shortest string that round-trips float64
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, np.floating):
        return repr(float(v))
    return str(v)


def _parse_cell(s: str):
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def write_table(table: CsvTable, path: str):
    """Atomic whole-file write (temp file then rename)."""
    lines = [",".join(table.header)]
    for row in table.rows:
        if len(row) != len(table.header):
            raise CsvError(f"row width {len(row)} != header width {len(table.header)}")
        lines.append(",".join(_format_cell(v) for v in row))
    payload = "\n".join(lines) + "\n"
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_table(path: str) -> CsvTable:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise CsvError("empty file, no header")
    header = lines[0].split(",")
    table = CsvTable(header)
    for i, line in enumerate(lines[1:], start=1):
        cells = line.split(",")
        if len(cells) != len(header):
            raise CsvError(f"row {i} has {len(cells)} cells, expected {len(header)}")
        table.rows.append([_parse_cell(c) for c in cells])
    return table
