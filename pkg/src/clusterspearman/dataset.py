"""
Two-level clustered paired observations, weighting schemes and CSV I/O.

Observations are stored flat and cluster-contiguous: every array is ordered
cluster by cluster (clusters in first-appearance order, rows within a
cluster in file order).  ``cluster_index[k]`` gives the cluster of row ``k``
and ``offsets[i]:offsets[i + 1]`` slices cluster ``i``.
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Sequence

import numpy as np

from .exceptions import DataError

__all__ = [
    "ValueKind",
    "ClusteredDataset",
    "WeightScheme",
    "WeightVector",
    "compute_weights",
    "load_csv",
    "parse_levels",
]


@dataclass(frozen=True)
class ValueKind:
    """Kind of an observed variable: numeric, or ordinal with ordered levels."""

    kind: str = "numeric"
    levels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("numeric", "ordinal"):
            raise DataError(f"unknown value kind {self.kind!r}")
        if self.kind == "ordinal":
            if not self.levels:
                raise DataError("ordinal kind needs a non-empty level list")
            if len(set(self.levels)) != len(self.levels):
                raise DataError(f"duplicate ordinal levels in {self.levels!r}")
        elif self.levels is not None:
            raise DataError("numeric kind cannot carry levels")

    @classmethod
    def numeric(cls) -> "ValueKind":
        return cls("numeric")

    @classmethod
    def ordinal(cls, levels: Sequence[str]) -> "ValueKind":
        return cls("ordinal", tuple(str(v) for v in levels))

    @property
    def is_ordinal(self) -> bool:
        return self.kind == "ordinal"

    def label(self, value: float) -> str:
        if self.is_ordinal:
            return self.levels[int(value)]
        return repr(float(value))


def _check_values(values: np.ndarray, kind: ValueKind, name: str) -> None:
    if not np.all(np.isfinite(values)):
        raise DataError(f"{name} contains non-finite values")
    if kind.is_ordinal:
        codes = values.astype(np.int64)
        if np.any(codes != values) or np.any(codes < 0) or np.any(codes >= len(kind.levels)):
            raise DataError(f"{name} ordinal codes must be integers in [0, {len(kind.levels) - 1}]")


@dataclass(frozen=True, eq=False)
class ClusteredDataset:
    """Clusters of paired orderable observations ``(x, y)``.

    Use :meth:`from_arrays` or :func:`load_csv` to build one; the raw
    constructor expects arrays already grouped cluster-contiguously.
    """

    cluster_ids: tuple[str, ...]
    sizes: np.ndarray
    x: np.ndarray
    y: np.ndarray
    x_kind: ValueKind = field(default_factory=ValueKind.numeric)
    y_kind: ValueKind = field(default_factory=ValueKind.numeric)

    def __post_init__(self):
        sizes = np.asarray(self.sizes, dtype=np.int64)
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 1 or x.shape != y.shape:
            raise DataError("x and y must be 1-D arrays of equal length")
        if len(self.cluster_ids) != len(sizes):
            raise DataError("one size per cluster id is required")
        if len(set(self.cluster_ids)) != len(self.cluster_ids):
            raise DataError("cluster ids must be unique")
        if len(sizes) == 0 or np.any(sizes < 1):
            raise DataError("every cluster needs at least one observation")
        if sizes.sum() != len(x):
            raise DataError("cluster sizes do not add up to the number of observations")
        _check_values(x, self.x_kind, "x")
        _check_values(y, self.y_kind, "y")
        for arr in (sizes, x, y):
            arr.setflags(write=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        index = np.repeat(np.arange(len(sizes)), sizes)
        offsets.setflags(write=False)
        index.setflags(write=False)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "cluster_index", index)

    @classmethod
    def from_arrays(cls, clusters, x, y, x_kind: ValueKind | None = None,
                    y_kind: ValueKind | None = None) -> "ClusteredDataset":
        """Group rows by cluster label (first-appearance order, stable within cluster)."""
        labels = [str(c) for c in clusters]
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if len(labels) != len(x) or len(x) != len(y):
            raise DataError("clusters, x and y must have equal length")
        first = {}
        for lab in labels:
            first.setdefault(lab, len(first))
        order_key = np.fromiter((first[lab] for lab in labels), dtype=np.int64, count=len(labels))
        order = np.argsort(order_key, kind="stable")
        ids = tuple(first)
        sizes = np.bincount(order_key, minlength=len(ids))
        return cls(ids, sizes, x[order], y[order],
                   x_kind or ValueKind.numeric(), y_kind or ValueKind.numeric())

    @property
    def n_clusters(self) -> int:
        return len(self.sizes)

    @property
    def n_obs(self) -> int:
        return len(self.x)

    def values(self, axis: str) -> np.ndarray:
        if axis == "x":
            return self.x
        if axis == "y":
            return self.y
        raise ValueError(f"axis must be 'x' or 'y', not {axis!r}")

    def kind(self, axis: str) -> ValueKind:
        return self.x_kind if axis == "x" else self.y_kind

    def groups(self, axis: str) -> list[np.ndarray]:
        """Per-cluster views of one variable."""
        v = self.values(axis)
        return [v[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]

    def __iter__(self) -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for i, cid in enumerate(self.cluster_ids):
            sl = slice(self.offsets[i], self.offsets[i + 1])
            yield cid, self.x[sl], self.y[sl]

    def __len__(self) -> int:
        return self.n_obs

    def __eq__(self, other):
        if not isinstance(other, ClusteredDataset):
            return NotImplemented
        return (self.cluster_ids == other.cluster_ids
                and np.array_equal(self.sizes, other.sizes)
                and np.array_equal(self.x, other.x)
                and np.array_equal(self.y, other.y)
                and self.x_kind == other.x_kind
                and self.y_kind == other.y_kind)

    __hash__ = None

    def take_clusters(self, indices: Sequence[int], relabel: bool = False) -> "ClusteredDataset":
        """Dataset made of the listed clusters (repeats allowed when ``relabel``)."""
        indices = np.asarray(indices, dtype=np.int64)
        if relabel:
            ids = tuple(f"{self.cluster_ids[i]}#{r}" for r, i in enumerate(indices))
        else:
            ids = tuple(self.cluster_ids[i] for i in indices)
        rows = np.concatenate([np.arange(self.offsets[i], self.offsets[i + 1]) for i in indices])
        return ClusteredDataset(ids, self.sizes[indices], self.x[rows], self.y[rows],
                                self.x_kind, self.y_kind)

    def replace(self, x=None, y=None, x_kind=None, y_kind=None) -> "ClusteredDataset":
        """Copy with new values for one or both variables (same clustering)."""
        return ClusteredDataset(self.cluster_ids, self.sizes,
                                self.x if x is None else x,
                                self.y if y is None else y,
                                x_kind or self.x_kind, y_kind or self.y_kind)

    def swapped(self) -> "ClusteredDataset":
        return ClusteredDataset(self.cluster_ids, self.sizes, self.y, self.x,
                                self.y_kind, self.x_kind)

    def to_csv(self, stream, cluster: str = "cluster", x: str = "x", y: str = "y") -> None:
        """Write as CSV text (ordinal values by level label) to a stream or path."""
        if isinstance(stream, (str, os.PathLike)):
            with open(stream, "w", encoding="utf-8", newline="") as fh:
                self.to_csv(fh, cluster, x, y)
            return
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow([cluster, x, y])
        for k in range(self.n_obs):
            writer.writerow([self.cluster_ids[self.cluster_index[k]],
                             self.x_kind.label(self.x[k]),
                             self.y_kind.label(self.y[k])])


class WeightScheme(str, Enum):
    EQUAL_OBSERVATION = "obs"
    EQUAL_CLUSTER = "cluster"
    CUSTOM = "custom"


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Per-observation weights ``w_ij`` summing to one, with cluster totals ``w_i.``."""

    scheme: WeightScheme
    weights: np.ndarray
    cluster_weights: np.ndarray

    def __post_init__(self):
        for arr in (self.weights, self.cluster_weights):
            arr.setflags(write=False)

    def __len__(self):
        return len(self.weights)


def compute_weights(ds: ClusteredDataset, scheme="cluster", custom=None) -> WeightVector:
    """Observation weights for ``ds``.

    ``scheme`` is ``"cluster"`` (``w_ij = 1/(n k_i)``), ``"obs"`` (``w_ij = 1/N``)
    or ``"custom"``, in which case ``custom`` supplies nonnegative weights that
    are renormalised to sum to one.
    """
    scheme = WeightScheme(scheme)
    n, N = ds.n_clusters, ds.n_obs
    if scheme is WeightScheme.EQUAL_CLUSTER:
        w = 1.0 / (n * ds.sizes[ds.cluster_index].astype(float))
    elif scheme is WeightScheme.EQUAL_OBSERVATION:
        w = np.full(N, 1.0 / N)
    else:
        if custom is None:
            raise DataError("custom weights requested but none supplied")
        w = np.asarray(custom, dtype=float)
        if w.shape != (N,) or np.any(~np.isfinite(w)) or np.any(w < 0) or w.sum() <= 0:
            raise DataError("custom weights must be N nonnegative finite numbers with positive sum")
        w = w / w.sum()
    cw = np.bincount(ds.cluster_index, weights=w, minlength=n)
    if scheme is WeightScheme.EQUAL_CLUSTER:
        cw = np.full(n, 1.0 / n)
    return WeightVector(scheme, w, cw)


def parse_levels(text: str | None) -> tuple[str, ...] | None:
    """Comma-separated ordered level list, e.g. ``"low,mid,high"``."""
    if text is None:
        return None
    levels = tuple(s.strip() for s in text.split(","))
    if not all(levels):
        raise DataError(f"empty level name in {text!r}")
    return levels


def _open_text(source):
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8", newline=""), True
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8"), newline=""), True
    if isinstance(source, io.TextIOBase):
        return source, False
    # binary stream
    return io.TextIOWrapper(source, encoding="utf-8", newline=""), False


def load_csv(source, cluster: str, x: str, y: str,
             x_levels: Sequence[str] | None = None,
             y_levels: Sequence[str] | None = None) -> ClusteredDataset:
    """Read a UTF-8 CSV with a header row into a :class:`ClusteredDataset`.

    Parameters
    ----------
    source : path, bytes, or text/binary stream
    cluster, x, y : str
        Column names of the cluster identifier and the two variables.
    x_levels, y_levels : sequence of str, optional
        Ordered level labels.  When given, the column is ordinal and each
        value is mapped to its position in the list.

    Raises
    ------
    DataError
        Missing column, empty file, empty cell, unparseable number or a
        value outside the declared levels.  Messages name row and column.
    """
    stream, owned = _open_text(source)
    try:
        reader = csv.reader(stream)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("empty CSV file") from None
        cols = {}
        for name in (cluster, x, y):
            if name not in header:
                raise DataError(f"missing column {name!r} (header: {header})")
            cols[name] = header.index(name)
        kinds = {x: ValueKind.ordinal(x_levels) if x_levels else ValueKind.numeric(),
                 y: ValueKind.ordinal(y_levels) if y_levels else ValueKind.numeric()}
        lookup = {name: {lab: i for i, lab in enumerate(k.levels)}
                  for name, k in kinds.items() if k.is_ordinal}
        labels, xs, ys = [], [], []
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise DataError(f"row {rowno}: expected {len(header)} fields, got {len(row)}")
            labels.append(row[cols[cluster]].strip())
            if not labels[-1]:
                raise DataError(f"row {rowno}, column {cluster!r}: empty cluster id")
            for name, out in ((x, xs), (y, ys)):
                raw = row[cols[name]].strip()
                if raw == "":
                    raise DataError(f"row {rowno}, column {name!r}: missing value")
                if name in lookup:
                    if raw not in lookup[name]:
                        raise DataError(f"row {rowno}, column {name!r}: {raw!r} is not a declared level")
                    out.append(float(lookup[name][raw]))
                else:
                    try:
                        val = float(raw)
                    except ValueError:
                        raise DataError(f"row {rowno}, column {name!r}: cannot parse {raw!r} as a number") from None
                    if not math.isfinite(val):
                        raise DataError(f"row {rowno}, column {name!r}: non-finite value {raw!r}")
                    out.append(val)
        if not labels:
            raise DataError("CSV file has a header but no data rows")
    finally:
        if owned:
            stream.close()
    return ClusteredDataset.from_arrays(labels, xs, ys, kinds[x], kinds[y])
