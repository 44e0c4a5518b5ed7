"""Grouped binary-response data and its delimited-text format.

The text format has a header ``group,y,xF1,...,xFp,xR1,...,xRq``; ``group`` is
an opaque label and rows may arrive in any order.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataFormatError(ValueError):
    """Malformed input; ``line`` is the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Group:
    """Responses and design rows for one group."""

    y: np.ndarray
    xF: np.ndarray
    xR: np.ndarray
    label: str = ""

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        xF = np.atleast_2d(np.asarray(self.xF, dtype=float))
        xR = np.atleast_2d(np.asarray(self.xR, dtype=float))
        if xF.shape[0] != y.size or xR.shape[0] != y.size:
            raise ValueError("xF and xR must have one row per response")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("responses must be 0 or 1")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "xF", xF)
        object.__setattr__(self, "xR", xR)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def signs(self) -> np.ndarray:
        return 2.0 * self.y - 1.0


@dataclass
class GroupedDataset:
    groups: list[Group]
    dF: int = field(init=False)
    dR: int = field(init=False)

    def __post_init__(self):
        if not self.groups:
            raise ValueError("dataset needs at least one group")
        self.dF = self.groups[0].xF.shape[1]
        self.dR = self.groups[0].xR.shape[1]
        for g in self.groups:
            if g.n == 0:
                raise ValueError(f"group {g.label!r} is empty")
            if g.xF.shape[1] != self.dF or g.xR.shape[1] != self.dR:
                raise ValueError(f"group {g.label!r} has inconsistent design dimensions")

    @property
    def m(self) -> int:
        return len(self.groups)

    @property
    def n_obs(self) -> int:
        return sum(g.n for g in self.groups)

    def packed(self) -> "PackedData":
        return PackedData.from_dataset(self)


@dataclass(frozen=True)
class PackedData:
    """Contiguous arrays for the compiled kernels; group ``i`` owns rows
    ``offsets[i]:offsets[i+1]``."""

    y: np.ndarray
    XF: np.ndarray
    XR: np.ndarray
    offsets: np.ndarray

    @classmethod
    def from_dataset(cls, data: GroupedDataset) -> "PackedData":
        y = np.concatenate([g.y for g in data.groups])
        XF = np.ascontiguousarray(np.vstack([g.xF for g in data.groups]))
        XR = np.ascontiguousarray(np.vstack([g.xR for g in data.groups]))
        offsets = np.zeros(data.m + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([g.n for g in data.groups])
        return cls(y, XF, XR, offsets)

    @property
    def m(self) -> int:
        return self.offsets.size - 1


def _parse_header(header: list[str]) -> tuple[int, int]:
    if len(header) < 3 or header[0].strip() != "group" or header[1].strip() != "y":
        raise DataFormatError("header must start with 'group,y'", line=1)
    names = [h.strip() for h in header[2:]]
    p = sum(1 for h in names if h.startswith("xF"))
    q = sum(1 for h in names if h.startswith("xR"))
    expected = [f"xF{k}" for k in range(1, p + 1)] + [f"xR{k}" for k in range(1, q + 1)]
    if names != expected or p == 0 or q == 0:
        raise DataFormatError("header must be group,y,xF1..xFp,xR1..xRq with p, q >= 1", line=1)
    return p, q


def read_csv(source) -> GroupedDataset:
    """Read a grouped dataset from a path or a text stream."""
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return read_csv(fh)
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise DataFormatError("empty input", line=1) from None
    p, q = _parse_header(header)
    rows: dict[str, list[tuple[float, list[float], list[float]]]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 2 + p + q:
            raise DataFormatError(f"expected {2 + p + q} fields, found {len(row)}", line=lineno)
        label = row[0].strip()
        try:
            values = [float(cell) for cell in row[1:]]
        except ValueError:
            raise DataFormatError("non-numeric field", line=lineno) from None
        if not all(np.isfinite(values)):
            raise DataFormatError("non-finite value", line=lineno)
        y = values[0]
        if y not in (0.0, 1.0):
            raise DataFormatError(f"response must be 0 or 1, found {row[1].strip()}", line=lineno)
        rows.setdefault(label, []).append((y, values[1 : 1 + p], values[1 + p :]))
    if not rows:
        raise DataFormatError("no data rows")
    groups = []
    for label, recs in rows.items():
        groups.append(
            Group(
                y=np.array([r[0] for r in recs]),
                xF=np.array([r[1] for r in recs]),
                xR=np.array([r[2] for r in recs]),
                label=label,
            )
        )
    return GroupedDataset(groups)


def write_csv(data: GroupedDataset, dest) -> None:
    if isinstance(dest, (str, Path)):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            write_csv(data, fh)
        return
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow(
        ["group", "y"]
        + [f"xF{k}" for k in range(1, data.dF + 1)]
        + [f"xR{k}" for k in range(1, data.dR + 1)]
    )
    for i, g in enumerate(data.groups):
        label = g.label or str(i + 1)
        for j in range(g.n):
            writer.writerow(
                [label, int(g.y[j])] + [repr(float(v)) for v in g.xF[j]] + [repr(float(v)) for v in g.xR[j]]
            )


def to_csv_string(data: GroupedDataset) -> str:
    buf = io.StringIO()
    write_csv(data, buf)
    return buf.getvalue()
