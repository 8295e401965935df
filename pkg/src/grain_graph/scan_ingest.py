"""Raster EBSD scan ingestion, grain segmentation and per-grain metrics."""

import io
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .errors import DanglingReferenceError, FormatError, GeometryError, ValidationError
from .orientation import (euler_to_quat, normalize_euler, quat_misorientation,
                          quat_to_euler, reduce_to_reference)

SCAN_COLUMNS = ("x", "y", "phi1", "Phi", "phi2")
GRAIN_COLUMNS = ("id", "size", "phi1", "Phi", "phi2", "perimeter")
ADJACENCY_COLUMNS = ("a", "b", "shared_length")
DEFAULT_THRESHOLD_DEG = 5.0


class ScanPoint(NamedTuple):
    x: float
    y: float
    euler: tuple
    phase: int


@dataclass(eq=False)
class ScanField:
    """Rectangular scan grid stored row-major.

    ``euler`` has shape ``(rows, cols, 3)`` in degrees, ``phase`` shape
    ``(rows, cols)``.  Point ``(r, c)`` sits at ``origin + (c, r) * step``.
    """

    rows: int
    cols: int
    step: float
    euler: np.ndarray
    phase: np.ndarray
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        self.euler = np.asarray(self.euler, dtype=np.float64)
        self.phase = np.asarray(self.phase, dtype=np.int64)
        if self.euler.shape != (self.rows, self.cols, 3):
            raise GeometryError(f"euler array shape {self.euler.shape} != ({self.rows}, {self.cols}, 3)")
        if self.phase.shape != (self.rows, self.cols):
            raise GeometryError(f"phase array shape {self.phase.shape} != ({self.rows}, {self.cols})")
        if not self.step > 0:
            raise GeometryError(f"step must be positive, got {self.step}")

    def __eq__(self, other):
        if not isinstance(other, ScanField):
            return NotImplemented
        return (self.rows == other.rows and self.cols == other.cols
                and self.step == other.step
                and tuple(self.origin) == tuple(other.origin)
                and np.array_equal(self.euler, other.euler)
                and np.array_equal(self.phase, other.phase))

    @property
    def n_points(self):
        return self.rows * self.cols

    def coordinates(self):
        """``(x, y)`` arrays of shape ``(rows, cols)``."""
        x = self.origin[0] + np.arange(self.cols) * self.step
        y = self.origin[1] + np.arange(self.rows) * self.step
        return np.broadcast_to(x, (self.rows, self.cols)), np.broadcast_to(y[:, None], (self.rows, self.cols))

    def point(self, r, c):
        x, y = self.coordinates()
        return ScanPoint(float(x[r, c]), float(y[r, c]), tuple(self.euler[r, c]), int(self.phase[r, c]))


@dataclass
class Grain:
    id: int
    size: float
    euler_mean: tuple
    perimeter: float
    pixel_count: Optional[int] = None
    centroid: Optional[tuple] = None


@dataclass
class AdjacencyRecord:
    grain_a: int
    grain_b: int
    shared_length: float


@dataclass
class GrainTable:
    grains: list
    adjacency: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [g.id for g in self.grains]
        if len(set(ids)) != len(ids):
            raise ValidationError("grain ids are not unique")
        known = set(ids)
        for rec in self.adjacency:
            for gid in (rec.grain_a, rec.grain_b):
                if gid not in known:
                    raise DanglingReferenceError(f"adjacency references unknown grain {gid}")
            if not rec.grain_a < rec.grain_b:
                raise ValidationError(f"adjacency ({rec.grain_a}, {rec.grain_b}) not in canonical order")
            if not rec.shared_length > 0:
                raise ValidationError(f"adjacency ({rec.grain_a}, {rec.grain_b}) has non-positive shared length")

    def __len__(self):
        return len(self.grains)

    @property
    def ids(self):
        return np.array([g.id for g in self.grains], dtype=np.int64)

    @property
    def sizes(self):
        return np.array([g.size for g in self.grains], dtype=np.float64)

    @property
    def eulers(self):
        return np.array([g.euler_mean for g in self.grains], dtype=np.float64).reshape(-1, 3)

    @property
    def perimeters(self):
        return np.array([g.perimeter for g in self.grains], dtype=np.float64)

    def adjacency_arrays(self):
        """Row indices (into ``grains``) of each adjacency pair and the shared lengths."""
        pos = {g.id: i for i, g in enumerate(self.grains)}
        a = np.array([pos[r.grain_a] for r in self.adjacency], dtype=np.int64)
        b = np.array([pos[r.grain_b] for r in self.adjacency], dtype=np.int64)
        length = np.array([r.shared_length for r in self.adjacency], dtype=np.float64)
        return a, b, length


def _is_path(source):
    return isinstance(source, os.PathLike) or (isinstance(source, str) and "\n" not in source)


def _read_csv(source):
    """Read CSV from a path, an open text stream, or literal ``str``/``bytes`` content."""
    if isinstance(source, bytes):
        source = io.StringIO(source.decode("utf-8"))
    elif isinstance(source, str) and not _is_path(source):
        source = io.StringIO(source)
    return pd.read_csv(source, skipinitialspace=True, float_precision="round_trip")


def _require_columns(df, columns, what):
    df.columns = [str(c).strip() for c in df.columns]
    for col in columns:
        if col not in df.columns:
            raise FormatError(f"{what}: missing column {col!r}")


def _infer_axis(values, what):
    """Unique sorted coordinates along one axis and their spacing (None if single)."""
    uniq = np.unique(values)
    if len(uniq) < 2:
        return uniq, None
    step = round(float(uniq[-1] - uniq[0]) / (len(uniq) - 1), 9)
    if step <= 0 or np.max(np.abs(np.diff(uniq) - step)) > 1e-6 * step:
        raise GeometryError(f"non-uniform {what} spacing")
    return uniq, step


def parse_scan(source, format="grid-csv"):
    """Parse a grid CSV scan (``x,y,phi1,Phi,phi2[,phase]``) into a :class:`ScanField`.

    ``source`` may be a path, a text stream, ``str`` or ``bytes``.  Point
    order in the file does not matter; rows follow ``y`` and columns ``x``.
    """
    if format != "grid-csv":
        raise FormatError(f"unsupported scan format {format!r}")
    try:
        df = _read_csv(source)
    except pd.errors.EmptyDataError as exc:
        raise FormatError("scan file is empty") from exc
    _require_columns(df, SCAN_COLUMNS, "scan")
    if len(df) == 0:
        raise FormatError("scan file has no points")
    try:
        data = df[list(SCAN_COLUMNS)].to_numpy(dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"non-numeric scan value: {exc}") from exc
    if not np.all(np.isfinite(data)):
        raise ValidationError("scan contains non-finite values")
    angles = data[:, 2:5]
    if np.any(angles < -360.0) or np.any(angles > 720.0):
        raise ValidationError("Euler angle outside [-360, 720] degrees")
    phase = df["phase"].to_numpy(dtype=np.int64) if "phase" in df.columns else np.zeros(len(df), np.int64)

    xs, step_x = _infer_axis(data[:, 0], "x")
    ys, step_y = _infer_axis(data[:, 1], "y")
    if step_x is None and step_y is None:
        raise GeometryError("cannot infer the step from a single scan point")
    if step_x is not None and step_y is not None and abs(step_x - step_y) > 1e-6 * step_x:
        raise GeometryError(f"x step {step_x} differs from y step {step_y}")
    step = step_x if step_x is not None else step_y
    rows, cols = len(ys), len(xs)
    if rows * cols != len(df):
        raise GeometryError(f"{len(df)} points do not fill a {rows}x{cols} grid")
    col = np.rint((data[:, 0] - xs[0]) / step).astype(np.int64)
    row = np.rint((data[:, 1] - ys[0]) / step).astype(np.int64)
    flat = row * cols + col
    if len(np.unique(flat)) != len(flat):
        raise GeometryError("duplicate scan coordinates")
    euler = np.empty((rows * cols, 3))
    euler[flat] = normalize_euler(angles)
    ph = np.empty(rows * cols, dtype=np.int64)
    ph[flat] = phase
    return ScanField(rows, cols, step, euler.reshape(rows, cols, 3), ph.reshape(rows, cols),
                     origin=(float(xs[0]), float(ys[0])))


def serialize_scan(scan):
    """Grid CSV text for a :class:`ScanField`; floats are written round-trip exact."""
    x, y = scan.coordinates()
    df = pd.DataFrame({
        "x": x.ravel(), "y": y.ravel(),
        "phi1": scan.euler[..., 0].ravel(), "Phi": scan.euler[..., 1].ravel(),
        "phi2": scan.euler[..., 2].ravel(), "phase": scan.phase.ravel(),
    })
    return df.to_csv(index=False, lineterminator="\n")


def write_scan(scan, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(serialize_scan(scan))


def _relabel_by_first_pixel(raw):
    """Dense labels 1..G ordered by the smallest linear pixel index in each component."""
    _, first, inverse = np.unique(raw, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return rank[inverse] + 1


def segment_grains(scan, threshold_deg=DEFAULT_THRESHOLD_DEG, symmetry="none"):
    """Label grains by 4-connected flood fill over low-misorientation neighbours.

    Two neighbouring pixels are joined when their misorientation is strictly
    below ``threshold_deg``.  Labels are dense ``1..G`` and numbered in order
    of each grain's first pixel in row-major order, so the result does not
    depend on how the scan file was ordered.
    """
    if scan.n_points == 0:
        raise ValidationError("empty scan field")
    if not threshold_deg > 0:
        raise ValidationError(f"threshold_deg must be positive, got {threshold_deg}")
    rows, cols = scan.rows, scan.cols
    q = euler_to_quat(scan.euler)
    idx = np.arange(rows * cols).reshape(rows, cols)
    join_h = quat_misorientation(q[:, :-1], q[:, 1:], symmetry) < threshold_deg
    join_v = quat_misorientation(q[:-1, :], q[1:, :], symmetry) < threshold_deg
    src = np.concatenate([idx[:, :-1][join_h], idx[:-1, :][join_v]])
    dst = np.concatenate([idx[:, 1:][join_h], idx[1:, :][join_v]])
    graph = sparse.coo_matrix((np.ones(len(src), dtype=np.int8), (src, dst)),
                              shape=(rows * cols, rows * cols)).tocsr()
    _, raw = connected_components(graph, directed=False)
    return _relabel_by_first_pixel(raw).reshape(rows, cols).astype(np.int64)


def label_pair_counts(labels):
    """Count 4-neighbour pixel pairs with differing labels, per unordered label pair.

    Returns ``(a, b, counts)`` with ``a < b``, sorted lexicographically.
    """
    labels = np.asarray(labels)
    pairs = []
    for u, v in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = u != v
        lo = np.minimum(u[diff], v[diff])
        hi = np.maximum(u[diff], v[diff])
        pairs.append(np.stack([lo, hi], axis=1))
    pairs = np.concatenate(pairs) if pairs else np.empty((0, 2), np.int64)
    if len(pairs) == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int64)
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    return uniq[:, 0], uniq[:, 1], counts


def grain_metrics(scan, labels, symmetry="none", provenance=None):
    """Per-grain size, mean orientation, perimeter and shared boundary lengths.

    Perimeter counts pixel edges: every 4-neighbour pair with differing labels
    adds one edge to both grains, and every pixel edge on the scan border
    adds one edge to its grain (a corner pixel contributes two).  Lengths are
    edge counts times the step, so ``shared_length / perimeter`` lies in
    ``[0, 1]``.
    """
    labels = np.asarray(labels)
    if labels.shape != (scan.rows, scan.cols):
        raise ValidationError(f"label grid shape {labels.shape} != scan shape {(scan.rows, scan.cols)}")
    flat = labels.ravel().astype(np.int64)
    n = int(flat.max()) if flat.size else 0
    present = np.unique(flat)
    if flat.size == 0 or present[0] != 1 or len(present) != n:
        raise ValidationError("labels must be dense 1..G")
    step = scan.step

    counts = np.bincount(flat, minlength=n + 1)[1:]
    sizes = 2.0 * np.sqrt(counts * step * step / math.pi)

    x, y = scan.coordinates()
    cx = np.bincount(flat, weights=x.ravel(), minlength=n + 1)[1:] / counts
    cy = np.bincount(flat, weights=y.ravel(), minlength=n + 1)[1:] / counts

    q = euler_to_quat(scan.euler.reshape(-1, 3))
    _, first = np.unique(flat, return_index=True)
    ref = q[first][flat - 1]
    q = reduce_to_reference(q, ref, symmetry)
    qsum = np.stack([np.bincount(flat, weights=q[:, k], minlength=n + 1)[1:] for k in range(4)], axis=1)
    qmean = qsum / np.linalg.norm(qsum, axis=1, keepdims=True)
    euler_mean = quat_to_euler(qmean)

    a, b, pair_counts = label_pair_counts(labels)
    edges = (np.bincount(a, weights=pair_counts, minlength=n + 1)
             + np.bincount(b, weights=pair_counts, minlength=n + 1))[1:]
    border = (np.bincount(labels[0, :], minlength=n + 1) + np.bincount(labels[-1, :], minlength=n + 1)
              + np.bincount(labels[:, 0], minlength=n + 1) + np.bincount(labels[:, -1], minlength=n + 1))[1:]
    perimeter = (edges + border) * step

    grains = [
        Grain(id=i + 1, size=float(sizes[i]), euler_mean=tuple(float(v) for v in euler_mean[i]),
              perimeter=float(perimeter[i]), pixel_count=int(counts[i]),
              centroid=(float(cx[i]), float(cy[i])))
        for i in range(n)
    ]
    adjacency = [AdjacencyRecord(int(u), int(v), float(c * step)) for u, v, c in zip(a, b, pair_counts)]
    prov = {"rows": scan.rows, "cols": scan.cols, "step": step, "symmetry": symmetry}
    prov.update(provenance or {})
    return GrainTable(grains, adjacency, prov)


def ingest_scan(source, threshold_deg=DEFAULT_THRESHOLD_DEG, symmetry="none"):
    """Parse, segment and measure a scan in one call."""
    scan = parse_scan(source)
    labels = segment_grains(scan, threshold_deg, symmetry)
    prov = {"threshold_deg": threshold_deg}
    if _is_path(source):
        prov["source"] = os.path.basename(os.fspath(source))
    return grain_metrics(scan, labels, symmetry, prov)


def load_grain_table(grains_csv, adjacency_csv):
    """Load a pre-segmented grain table from a pair of CSV files.

    Grain columns ``id,size,phi1,Phi,phi2,perimeter`` (``pixel_count``, ``cx``
    and ``cy`` are read when present); adjacency columns ``a,b,shared_length``.
    """
    gdf = _read_csv(grains_csv)
    _require_columns(gdf, GRAIN_COLUMNS, "grain table")
    try:
        adf = _read_csv(adjacency_csv)
    except pd.errors.EmptyDataError:
        adf = pd.DataFrame(columns=list(ADJACENCY_COLUMNS))
    _require_columns(adf, ADJACENCY_COLUMNS, "adjacency table")

    grains = []
    for row in gdf.itertuples(index=False):
        size, perimeter = float(row.size), float(row.perimeter)
        if not (size > 0 and perimeter > 0):
            raise ValidationError(f"grain {row.id}: size and perimeter must be positive")
        euler = normalize_euler([row.phi1, row.Phi, row.phi2])
        pixel_count = int(row.pixel_count) if "pixel_count" in gdf.columns else None
        centroid = (float(row.cx), float(row.cy)) if {"cx", "cy"} <= set(gdf.columns) else None
        grains.append(Grain(int(row.id), size, tuple(float(v) for v in euler), perimeter, pixel_count, centroid))
    perimeter_of = {g.id: g.perimeter for g in grains}

    adjacency = []
    for row in adf.itertuples(index=False):
        a, b, length = int(row.a), int(row.b), float(row.shared_length)
        for gid in (a, b):
            if gid not in perimeter_of:
                raise DanglingReferenceError(f"adjacency references grain {gid}, absent from the grain table")
        if a == b:
            raise ValidationError(f"self-adjacency for grain {a}")
        if length > min(perimeter_of[a], perimeter_of[b]):
            raise ValidationError(f"shared length {length} between {a} and {b} exceeds a grain perimeter")
        adjacency.append(AdjacencyRecord(min(a, b), max(a, b), length))
    adjacency.sort(key=lambda r: (r.grain_a, r.grain_b))
    return GrainTable(grains, adjacency, {"source": "grain-table-csv"})


def save_grain_table(table, grains_csv, adjacency_csv):
    rows = []
    for g in table.grains:
        row = {"id": g.id, "size": g.size, "phi1": g.euler_mean[0], "Phi": g.euler_mean[1],
               "phi2": g.euler_mean[2], "perimeter": g.perimeter}
        if g.pixel_count is not None:
            row["pixel_count"] = g.pixel_count
        if g.centroid is not None:
            row["cx"], row["cy"] = g.centroid
        rows.append(row)
    pd.DataFrame(rows).to_csv(grains_csv, index=False, lineterminator="\n")
    pd.DataFrame([{"a": r.grain_a, "b": r.grain_b, "shared_length": r.shared_length} for r in table.adjacency],
                 columns=list(ADJACENCY_COLUMNS)).to_csv(adjacency_csv, index=False, lineterminator="\n")
