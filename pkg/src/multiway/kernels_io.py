"""Long-format tables, level files and relationship kernels.

A long table has a header row, one column per array dimension, an optional
``sample`` column and a ``value`` column. Each data row fills one cell; level
combinations that never appear are missing cells.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import eigh

from .exceptions import DataError
from .missing import PartialSample

__all__ = [
    "Levels",
    "TableSchema",
    "Kernel",
    "load_long_table",
    "write_long_table",
    "array_to_long_table",
    "read_level_file",
    "marker_kernel",
    "load_kernel_matrix",
    "write_labeled_matrix",
    "align_kernel",
    "format_float",
]


def format_float(v: float) -> str:
    """Decimal text that reads back to the identical double."""
    return format(float(v), ".17g")


@dataclass
class Levels:
    """Axis labels of every dimension (and sample ids when there is a sample column)."""

    names: list
    labels: list
    samples: list | None = None

    @property
    def shape(self) -> tuple:
        return tuple(len(l) for l in self.labels)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown dimension {name!r}; have {self.names}") from None


@dataclass
class TableSchema:
    dims: Sequence[str] | None = None
    value_column: str = "value"
    sample_column: str = "sample"
    missing_token: str = "NA"
    delimiter: str = ","
    level_files: Mapping[str, str] = field(default_factory=dict)


def read_level_file(path) -> list:
    with open(path, encoding="utf-8") as fh:
        labels = [line.strip() for line in fh if line.strip()]
    if len(set(labels)) != len(labels):
        raise DataError("duplicate label in level file", path=path)
    return labels


def load_long_table(path, schema: TableSchema | None = None):
    """Read a long-format file into ``(PartialSample, Levels)``.

    Axis order follows first appearance in the file unless a level file fixes
    it; sample ids likewise. Blank fields and the missing token mark a missing
    value.
    """
    schema = schema or TableSchema()
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("empty file", path=path) from None
        rows = list(reader)

    if schema.value_column not in header:
        raise DataError(f"no {schema.value_column!r} column in header {header}", row=1, path=path)
    has_sample = schema.sample_column in header
    if schema.dims is None:
        dims = [h for h in header if h not in (schema.value_column, schema.sample_column)]
    else:
        dims = list(schema.dims)
        unknown = [d for d in dims if d not in header]
        if unknown:
            raise DataError(f"unknown column(s) {unknown}", row=1, path=path)
    if not dims:
        raise DataError("no dimension columns", row=1, path=path)
    col = {h: i for i, h in enumerate(header)}
    vi = col[schema.value_column]
    si = col[schema.sample_column] if has_sample else None
    di = [col[d] for d in dims]

    fixed = {d: read_level_file(p) for d, p in schema.level_files.items()}
    bad = [d for d in fixed if d not in dims]
    if bad:
        raise DataError(f"level file given for unknown dimension(s) {bad}", path=path)
    lookup = [{lab: i for i, lab in enumerate(fixed.get(d, []))} for d in dims]
    labels = [list(fixed.get(d, [])) for d in dims]
    sample_ids: dict = {}

    records = []
    seen = set()
    for lineno, row in enumerate(rows, start=2):
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != len(header):
            raise DataError(f"expected {len(header)} fields, found {len(row)}", row=lineno,
                            path=path)
        sid = row[si].strip() if has_sample else ""
        s = sample_ids.setdefault(sid, len(sample_ids))
        idx = []
        for k, d in enumerate(dims):
            lab = row[di[k]].strip()
            if lab not in lookup[k]:
                if d in fixed:
                    raise DataError(f"label {lab!r} of {d!r} not in its level file",
                                    row=lineno, path=path)
                lookup[k][lab] = len(labels[k])
                labels[k].append(lab)
            idx.append(lookup[k][lab])
        key = (s, *idx)
        if key in seen:
            raise DataError(f"duplicate cell {[sid] if has_sample else []}"
                            f"{[row[i].strip() for i in di]}", row=lineno, path=path)
        seen.add(key)
        text = row[vi].strip()
        if text == "" or text == schema.missing_token:
            continue
        try:
            value = float(text)
        except ValueError:
            raise DataError(f"non-numeric value {text!r}", row=lineno, path=path) from None
        if not np.isfinite(value):
            raise DataError(f"non-finite value {text!r}", row=lineno, path=path)
        records.append((key, value))

    shape = tuple(len(l) for l in labels)
    n = max(len(sample_ids), 1)
    values = np.full((n,) + shape, np.nan)
    for key, value in records:
        values[key] = value
    sample = PartialSample(values, ~np.isnan(values))
    levels = Levels(dims, labels, list(sample_ids) if has_sample else None)
    return sample, levels


def write_long_table(path, values: np.ndarray, levels: Levels, select: np.ndarray | None = None,
                     missing_token: str = "NA", delimiter: str = ",",
                     with_sample: bool | None = None) -> None:
    """Write a stack ``(N, *shape)`` of arrays in long format.

    Only cells where ``select`` is true are written; NaN values become the
    missing token. Rows follow sample order, then rvec cell order.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == len(levels.names):
        values = values[None]
    N = values.shape[0]
    if with_sample is None:
        with_sample = levels.samples is not None or N > 1
    samples = levels.samples if levels.samples is not None else [str(l + 1) for l in range(N)]
    if select is None:
        select = np.ones(values.shape, dtype=bool)
    shape = values.shape[1:]
    header = (["sample"] if with_sample else []) + list(levels.names) + ["value"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        for l in range(N):
            for flat in range(int(np.prod(shape))):
                idx = np.unravel_index(flat, shape, order="F")
                if not select[(l, *idx)]:
                    continue
                v = values[(l, *idx)]
                row = [samples[l]] if with_sample else []
                row += [levels.labels[k][i] for k, i in enumerate(idx)]
                row.append(missing_token if np.isnan(v) else format_float(v))
                w.writerow(row)


def array_to_long_table(sample: PartialSample, levels: Levels, path, skip_missing: bool = False,
                        missing_token: str = "NA", delimiter: str = ",") -> None:
    select = sample.mask if skip_missing else None
    write_long_table(path, sample.values, levels, select=select, missing_token=missing_token,
                     delimiter=delimiter, with_sample=levels.samples is not None)


def marker_kernel(W: np.ndarray, center: bool = True) -> np.ndarray:
    """Relationship kernel ``W_c W_c' / c`` scaled so that ``trace(K)`` equals the entity count."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] < 2 or W.shape[1] < 1:
        raise ValueError("marker matrix needs at least 2 entities and 1 marker")
    if not np.all(np.isfinite(W)):
        raise ValueError("marker matrix has non-finite entries")
    Wc = W - W.mean(axis=0) if center else W
    G = Wc @ Wc.T
    c = np.trace(G) / W.shape[0]
    if not c > 0:
        raise ValueError("markers carry no variance; kernel is degenerate")
    K = G / c
    return 0.5 * (K + K.T)


@dataclass
class Kernel:
    matrix: np.ndarray
    labels: list
    asymmetry: float = 0.0
    repair_delta: float = 0.0


def load_kernel_matrix(path, delimiter: str = ",", asym_tol: float = 1e-6,
                       repair_tol: float = 1e-6) -> Kernel:
    """Read a labelled square kernel; symmetrize and clamp small negative eigenvalues.

    Raises :class:`DataError` if the asymmetry exceeds ``asym_tol`` or the
    eigenvalue repair exceeds ``repair_tol * trace``.
    """
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter=delimiter) if r and any(f.strip() for f in r)]
    if not rows:
        raise DataError("empty kernel file", path=path)
    col_labels = [c.strip() for c in rows[0][1:]]
    n = len(col_labels)
    if len(rows) - 1 != n:
        raise DataError(f"kernel is not square: {len(rows) - 1} rows, {n} columns", path=path)
    row_labels, data = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != n + 1:
            raise DataError(f"expected {n + 1} fields, found {len(row)}", row=lineno, path=path)
        row_labels.append(row[0].strip())
        try:
            data.append([float(x) for x in row[1:]])
        except ValueError:
            raise DataError("non-numeric kernel entry", row=lineno, path=path) from None
    if row_labels != col_labels:
        raise DataError("row labels do not match column labels", path=path)
    if len(set(col_labels)) != n:
        raise DataError("duplicate kernel labels", path=path)
    K = np.array(data, dtype=float)
    if not np.all(np.isfinite(K)):
        raise DataError("non-finite kernel entry", path=path)
    asym = float(np.max(np.abs(K - K.T))) if n else 0.0
    if asym > asym_tol:
        raise DataError(f"kernel asymmetry {asym:.3g} exceeds {asym_tol:g}", path=path)
    K = 0.5 * (K + K.T)
    d, U = eigh(K)
    delta = float(-np.sum(d[d < 0]))
    if delta > repair_tol * max(float(np.trace(K)), 0.0):
        raise DataError(
            f"kernel needs an eigenvalue repair of {delta:.3g}, above the "
            f"{repair_tol:g}*trace threshold", path=path)
    if delta > 0:
        K = (U * np.clip(d, 0.0, None)) @ U.T
        K = 0.5 * (K + K.T)
    return Kernel(K, col_labels, asym, delta)


def write_labeled_matrix(path, M: np.ndarray, labels: Sequence[str], delimiter: str = ",") -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow([""] + list(labels))
        for lab, row in zip(labels, np.asarray(M, dtype=float)):
            w.writerow([lab] + [format_float(v) for v in row])


def read_labeled_matrix(path, delimiter: str = ","):
    """Plain reader for labelled matrices written by :func:`write_labeled_matrix`."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter=delimiter) if r]
    labels = [c.strip() for c in rows[0][1:]]
    try:
        M = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    except ValueError:
        raise DataError("non-numeric matrix entry", path=path) from None
    if M.shape != (len(labels), len(labels)):
        raise DataError("matrix is not square", path=path)
    return M, labels


def align_kernel(kernel: Kernel, labels: Sequence[str], extend: bool = True):
    """Reorder a kernel to the data's level order.

    Kernel labels absent from the data are appended as new levels when
    ``extend`` is true, so they can be predicted as all-missing slices.
    Returns ``(matrix, labels)``.
    """
    pos = {lab: i for i, lab in enumerate(kernel.labels)}
    missing = [lab for lab in labels if lab not in pos]
    if missing:
        raise DataError(f"kernel has no entry for level(s) {missing[:5]}"
                        f"{' ...' if len(missing) > 5 else ''}")
    order = list(labels)
    if extend:
        have = set(order)
        order += [lab for lab in kernel.labels if lab not in have]
    elif len(order) != len(kernel.labels):
        raise DataError("kernel and data levels differ")
    idx = [pos[lab] for lab in order]
    return kernel.matrix[np.ix_(idx, idx)], order
