"""Heterogeneous grain knowledge graph.

Node types
    ``Grain`` (one per grain), ``Size`` (one per observed size category) and
    ``Orientation`` (one per observed orientation category).
Edge types
    ``Strong`` / ``Weak`` between neighbouring grains, ``HasSize`` and
    ``HasOri`` from grains to their attribute nodes, ``SizeOf`` and ``OriOf``
    as exact reverses.

Size and orientation are binned on ``(value - min) / width`` and clamped to
``[1, n]`` so every grain lands in exactly one category.  A grain-grain edge
``A -> B`` is Strong when the shared boundary covers at least ``lambda`` of
A's perimeter, so the two directions of one boundary can differ.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import FormatError, ValidationError

NODE_TYPES = ("Grain", "Size", "Orientation")
EDGE_TYPES = ("Strong", "Weak", "HasSize", "SizeOf", "HasOri", "OriOf")
EDGE_ENDPOINTS = {
    "Strong": ("Grain", "Grain"),
    "Weak": ("Grain", "Grain"),
    "HasSize": ("Grain", "Size"),
    "SizeOf": ("Size", "Grain"),
    "HasOri": ("Grain", "Orientation"),
    "OriOf": ("Orientation", "Grain"),
}
GRAIN_FEATURE_DIM = 8
SCHEMA_VERSION = 1
FIXED_PHI_RANGE = ((0.0, 0.0, 0.0), (360.0, 180.0, 360.0))


@dataclass
class DiscretizationConfig:
    n_size: int
    size_min: float
    size_max: float
    n_phi: int
    phi_min: tuple
    phi_max: tuple
    lam: float
    phi_range_mode: str = "fitted"

    def __post_init__(self):
        self.phi_min = tuple(float(v) for v in self.phi_min)
        self.phi_max = tuple(float(v) for v in self.phi_max)
        if not self.size_max > self.size_min:
            raise ValidationError(f"degenerate size range: size_max={self.size_max} <= size_min={self.size_min}")
        if self.n_size < 1 or self.n_phi < 1:
            raise ValidationError("n_size and n_phi must be >= 1")
        if any(hi <= lo for lo, hi in zip(self.phi_min, self.phi_max)):
            raise ValidationError(f"degenerate Euler range {self.phi_min} .. {self.phi_max}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError(f"lambda must lie in [0, 1], got {self.lam}")

    @property
    def n_orientation(self):
        return self.n_phi ** 3

    def to_dict(self):
        return asdict(self)

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


def fit_discretization(tables, n_size=10, n_phi=4, lam=0.2, phi_range_mode="fitted"):
    """Fit bin ranges on the grains of ``tables`` (the training set).

    Size limits are the global min/max grain size.  Euler ranges are the
    per-axis min/max over all grains (``fitted``) or the full crystallographic
    ranges ``(0,360), (0,180), (0,360)`` (``fixed``).
    """
    sizes = np.concatenate([t.sizes for t in tables]) if tables else np.empty(0)
    if sizes.size == 0:
        raise ValidationError("need at least one grain to fit the discretization")
    if phi_range_mode == "fixed":
        phi_min, phi_max = FIXED_PHI_RANGE
    elif phi_range_mode == "fitted":
        eulers = np.concatenate([t.eulers for t in tables])
        phi_min, phi_max = eulers.min(axis=0), eulers.max(axis=0)
    else:
        raise ValidationError(f"unknown phi_range_mode {phi_range_mode!r}")
    return DiscretizationConfig(n_size=n_size, size_min=float(sizes.min()), size_max=float(sizes.max()),
                                n_phi=n_phi, phi_min=phi_min, phi_max=phi_max, lam=lam,
                                phi_range_mode=phi_range_mode)


def _bin(values, lo, hi, n):
    width = (hi - lo) / n
    cat = np.ceil((np.asarray(values, dtype=np.float64) - lo) / width)
    return np.clip(cat, 1, n).astype(np.int64)


def size_category(size, cfg):
    """Size category in ``1..n_size`` (scalar or array input)."""
    cat = _bin(size, cfg.size_min, cfg.size_max, cfg.n_size)
    return int(cat) if np.ndim(cat) == 0 else cat


def orientation_category(euler, cfg):
    """Per-axis categories ``(i, j, k)`` and flat index ``(i-1) n^2 + (j-1) n + k``.

    Accepts one triple or an ``(m, 3)`` array; returns ``((i, j, k), flat)``
    with matching shapes.
    """
    e = np.asarray(euler, dtype=np.float64)
    cats = np.stack([_bin(e[..., a], cfg.phi_min[a], cfg.phi_max[a], cfg.n_phi) for a in range(3)], axis=-1)
    n = cfg.n_phi
    flat = (cats[..., 0] - 1) * n * n + (cats[..., 1] - 1) * n + cats[..., 2]
    if e.ndim == 1:
        return tuple(int(c) for c in cats), int(flat)
    return cats, flat


def classify_edge(bound_length, perimeter, lam):
    """``"Strong"`` when ``bound_length / perimeter >= lam``, else ``"Weak"``."""
    if not perimeter > 0:
        raise ValidationError(f"perimeter must be positive, got {perimeter}")
    return "Strong" if bound_length / perimeter >= lam else "Weak"


@dataclass(eq=False)
class GrainGraph:
    """Typed nodes with per-type feature matrices and typed edge index arrays.

    ``edges[t]`` is a ``(src, dst)`` pair of int arrays indexing into the
    node lists of ``EDGE_ENDPOINTS[t]``.
    """

    features: dict
    edges: dict
    label: Optional[float] = None
    meta: dict = field(default_factory=dict)

    @property
    def grain_count(self):
        return len(self.features["Grain"])

    @property
    def size_node_count(self):
        return len(self.features["Size"])

    @property
    def ori_node_count(self):
        return len(self.features["Orientation"])

    def node_count(self, node_type):
        return len(self.features[node_type])

    def edge_count(self, edge_type=None):
        if edge_type is None:
            return sum(len(self.edges[t][0]) for t in EDGE_TYPES)
        return len(self.edges[edge_type][0])

    def __eq__(self, other):
        if not isinstance(other, GrainGraph):
            return NotImplemented
        return (all(np.array_equal(self.features[t], other.features[t]) for t in NODE_TYPES)
                and all(np.array_equal(self.edges[t][0], other.edges[t][0])
                        and np.array_equal(self.edges[t][1], other.edges[t][1]) for t in EDGE_TYPES)
                and self.label == other.label and self.meta == other.meta)


def _sorted_edges(src, dst):
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    order = np.lexsort((dst, src))
    return src[order], dst[order]


def grain_features(table, cfg):
    """``[1, size_norm, sin/cos phi1, sin/cos Phi, sin/cos phi2]`` per grain."""
    sizes = table.sizes
    size_norm = np.clip((sizes - cfg.size_min) / (cfg.size_max - cfg.size_min), 0.0, 1.0)
    rad = np.radians(table.eulers)
    cols = [np.ones(len(sizes)), size_norm]
    for a in range(3):
        cols += [np.sin(rad[:, a]), np.cos(rad[:, a])]
    return np.stack(cols, axis=1)


def build_graph(table, cfg, label=None, source_id=None):
    """Build the grain knowledge graph of one grain table."""
    if len(table) == 0:
        raise ValidationError("cannot build a graph from an empty grain table")
    n = len(table)
    grain_idx = np.arange(n)

    size_cat = size_category(table.sizes, cfg)
    size_levels, size_node = np.unique(size_cat, return_inverse=True)
    size_feat = np.zeros((len(size_levels), cfg.n_size))
    size_feat[np.arange(len(size_levels)), size_levels - 1] = 1.0

    _, ori_cat = orientation_category(table.eulers, cfg)
    ori_levels, ori_node = np.unique(ori_cat, return_inverse=True)
    ori_feat = np.zeros((len(ori_levels), cfg.n_orientation))
    ori_feat[np.arange(len(ori_levels)), ori_levels - 1] = 1.0

    a, b, length = table.adjacency_arrays()
    perim = table.perimeters
    if np.any(perim <= 0):
        raise ValidationError("grain perimeters must be positive")
    src = np.concatenate([a, b])
    dst = np.concatenate([b, a])
    lp = np.concatenate([length, length]) / perim[src]
    strong = lp >= cfg.lam

    edges = {
        "Strong": _sorted_edges(src[strong], dst[strong]),
        "Weak": _sorted_edges(src[~strong], dst[~strong]),
        "HasSize": (grain_idx, size_node.astype(np.int64)),
        "SizeOf": _sorted_edges(size_node, grain_idx),
        "HasOri": (grain_idx, ori_node.astype(np.int64)),
        "OriOf": _sorted_edges(ori_node, grain_idx),
    }
    meta = {
        "source": source_id,
        "discretization": cfg.fingerprint(),
        "grain_ids": [int(i) for i in table.ids],
        "size_categories": [int(c) for c in size_levels],
        "orientation_categories": [int(c) for c in ori_levels],
    }
    features = {"Grain": grain_features(table, cfg), "Size": size_feat, "Orientation": ori_feat}
    return GrainGraph(features, edges, None if label is None else float(label), meta)


def _check_one_hot(mat, width, what):
    if mat.ndim != 2 or mat.shape[1] != width:
        raise ValidationError(f"{what} features must have width {width}, got shape {mat.shape}")
    ok = np.all((mat == 0.0) | (mat == 1.0), axis=1) & (mat.sum(axis=1) == 1.0)
    if not np.all(ok):
        raise ValidationError(f"{what} feature rows must be one-hot")


def validate_graph(g, table=None):
    """Raise :class:`ValidationError` unless ``g`` satisfies the graph invariants.

    With ``table`` given, also checks that Strong and Weak together cover
    exactly the table's adjacency in both directions.
    """
    for t in NODE_TYPES:
        if t not in g.features:
            raise ValidationError(f"missing features for node type {t}")
    for t in EDGE_TYPES:
        if t not in g.edges:
            raise ValidationError(f"missing edge type {t}")
        s, d = g.edges[t]
        if len(s) != len(d):
            raise ValidationError(f"{t}: src/dst length mismatch")
        st, dt = EDGE_ENDPOINTS[t]
        if len(s) and (s.min() < 0 or s.max() >= g.node_count(st) or d.min() < 0 or d.max() >= g.node_count(dt)):
            raise ValidationError(f"{t}: node index out of range")
    n = g.grain_count
    if g.features["Grain"].ndim != 2 or g.features["Grain"].shape[1] != GRAIN_FEATURE_DIM:
        raise ValidationError(f"grain features must have width {GRAIN_FEATURE_DIM}")
    if not np.all(np.isfinite(g.features["Grain"])):
        raise ValidationError("grain features must be finite")
    _check_one_hot(g.features["Size"], g.features["Size"].shape[1], "Size")
    _check_one_hot(g.features["Orientation"], g.features["Orientation"].shape[1], "Orientation")
    if len(np.unique(g.features["Size"].argmax(1))) != g.size_node_count:
        raise ValidationError("two Size nodes share a category")
    if len(np.unique(g.features["Orientation"].argmax(1))) != g.ori_node_count:
        raise ValidationError("two Orientation nodes share a category")

    for has, rev, attr in (("HasSize", "SizeOf", "Size"), ("HasOri", "OriOf", "Orientation")):
        s, d = g.edges[has]
        if not np.array_equal(np.bincount(s, minlength=n), np.ones(n, np.int64)):
            raise ValidationError(f"every grain needs exactly one {has} edge")
        if len(np.unique(d)) != g.node_count(attr):
            raise ValidationError(f"every {attr} node needs at least one grain")
        rs, rd = g.edges[rev]
        if sorted(zip(s.tolist(), d.tolist())) != sorted(zip(rd.tolist(), rs.tolist())):
            raise ValidationError(f"{rev} is not the exact reverse of {has}")

    strong = set(zip(*(x.tolist() for x in g.edges["Strong"])))
    weak = set(zip(*(x.tolist() for x in g.edges["Weak"])))
    if len(strong) != g.edge_count("Strong") or len(weak) != g.edge_count("Weak"):
        raise ValidationError("duplicate grain-grain edges")
    if strong & weak:
        raise ValidationError("Strong and Weak edge sets overlap")
    union = strong | weak
    if any(u == v for u, v in union):
        raise ValidationError("grain self-loop")
    if any((v, u) not in union for u, v in union):
        raise ValidationError("grain-grain edges are not symmetric")
    if table is not None:
        a, b, _ = table.adjacency_arrays()
        expected = set(zip(a.tolist(), b.tolist())) | set(zip(b.tolist(), a.tolist()))
        if union != expected:
            raise ValidationError("grain-grain edges differ from the table adjacency")
    if g.label is not None and not np.isfinite(g.label):
        raise ValidationError("label must be finite")
    return g


def permute_graph(g, perms):
    """Relabel nodes: ``perms[type][old] = new``.  Types absent from ``perms`` keep their order."""
    perms = {t: np.asarray(perms.get(t, np.arange(g.node_count(t))), dtype=np.int64) for t in NODE_TYPES}
    features = {}
    for t in NODE_TYPES:
        feat = np.empty_like(g.features[t])
        feat[perms[t]] = g.features[t]
        features[t] = feat
    edges = {}
    for t in EDGE_TYPES:
        st, dt = EDGE_ENDPOINTS[t]
        s, d = g.edges[t]
        edges[t] = _sorted_edges(perms[st][s], perms[dt][d])
    meta = dict(g.meta)
    if "grain_ids" in meta:
        ids = np.empty(g.grain_count, np.int64)
        ids[perms["Grain"]] = meta["grain_ids"]
        meta["grain_ids"] = ids.tolist()
    for t, key in (("Size", "size_categories"), ("Orientation", "orientation_categories")):
        if key in meta:
            cats = np.empty(g.node_count(t), np.int64)
            cats[perms[t]] = meta[key]
            meta[key] = cats.tolist()
    return GrainGraph(features, edges, g.label, meta)


def export_graph(g):
    """Versioned JSON text; node ids are global (Grain, then Size, then Orientation)."""
    offset, start = {}, 0
    for t in NODE_TYPES:
        offset[t] = start
        start += g.node_count(t)
    nodes = [{"id": offset[t] + i, "type": t, "feature": row.tolist()}
             for t in NODE_TYPES for i, row in enumerate(g.features[t])]
    edges = []
    for t in EDGE_TYPES:
        st, dt = EDGE_ENDPOINTS[t]
        s, d = g.edges[t]
        edges += [{"src": offset[st] + int(u), "dst": offset[dt] + int(v), "type": t} for u, v in zip(s, d)]
    doc = {"version": SCHEMA_VERSION, "meta": g.meta, "nodes": nodes, "edges": edges, "label": g.label}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def import_graph(text):
    """Parse :func:`export_graph` output and validate the graph invariants."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"graph JSON does not parse: {exc}") from exc
    if doc.get("version") != SCHEMA_VERSION:
        raise FormatError(f"unknown graph schema version {doc.get('version')!r}")
    for key in ("meta", "nodes", "edges"):
        if key not in doc:
            raise FormatError(f"graph JSON lacks {key!r}")
    by_type = {t: [] for t in NODE_TYPES}
    local = {}
    for node in sorted(doc["nodes"], key=lambda nd: nd["id"]):
        if node["type"] not in by_type:
            raise FormatError(f"unknown node type {node['type']!r}")
        local[node["id"]] = (node["type"], len(by_type[node["type"]]))
        by_type[node["type"]].append(node["feature"])
    widths = {"Grain": GRAIN_FEATURE_DIM}
    features = {}
    for t in NODE_TYPES:
        rows = by_type[t]
        width = len(rows[0]) if rows else widths.get(t, 0)
        if any(len(r) != width for r in rows):
            raise ValidationError(f"ragged {t} feature rows")
        features[t] = np.array(rows, dtype=np.float64).reshape(len(rows), width)
    lists = {t: ([], []) for t in EDGE_TYPES}
    for e in doc["edges"]:
        t = e["type"]
        if t not in lists:
            raise FormatError(f"unknown edge type {t!r}")
        try:
            (st, su), (dt, dv) = local[e["src"]], local[e["dst"]]
        except KeyError as exc:
            raise ValidationError(f"edge references unknown node {exc}") from exc
        if (st, dt) != EDGE_ENDPOINTS[t]:
            raise ValidationError(f"{t} edge joins {st} -> {dt}")
        lists[t][0].append(su)
        lists[t][1].append(dv)
    edges = {t: (np.array(s, dtype=np.int64), np.array(d, dtype=np.int64)) for t, (s, d) in lists.items()}
    label = doc.get("label")
    g = GrainGraph(features, edges, None if label is None else float(label), doc["meta"])
    return validate_graph(g)
