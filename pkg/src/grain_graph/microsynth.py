"""Synthetic polycrystal scans with known grain partitions and property labels.

Grain maps are discrete Voronoi tessellations; orientations follow either a
uniform (random) texture or a fibre texture about a sample axis.  Labels come
from a Hall-Petch plus texture oracle evaluated on the ground-truth grains.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import ValidationError
from .orientation import euler_to_quat, quat_from_axis_angle, quat_mult, quat_to_euler
from .scan_ingest import ScanField, _relabel_by_first_pixel, grain_metrics, write_scan

_BRUTE_FORCE_LIMIT = 4_000_000


@dataclass
class SynthConfig:
    grid: tuple = (64, 64)
    n_grains: int = 40
    step: float = 1.0
    texture: str = "uniform"
    fiber_axis: tuple = (0.0, 0.0, 1.0)
    spread_deg: float = 10.0
    orientation_noise_deg: float = 0.0
    seed: int = 0

    def __post_init__(self):
        rows, cols = self.grid
        if self.n_grains < 1:
            raise ValidationError("n_grains must be >= 1")
        if self.n_grains > rows * cols:
            raise ValidationError(f"n_grains={self.n_grains} exceeds the {rows * cols} pixels of the grid")
        if self.texture not in ("uniform", "fiber"):
            raise ValidationError(f"unknown texture {self.texture!r}")
        if self.texture == "fiber" and not self.spread_deg > 0:
            raise ValidationError("fiber texture needs spread_deg > 0")
        if not self.step > 0:
            raise ValidationError("step must be positive")
        if self.orientation_noise_deg < 0:
            raise ValidationError("orientation_noise_deg must be >= 0")


@dataclass
class OracleConfig:
    sigma0: float = 100.0
    k_hp: float = 300.0
    texture_coeff: float = 40.0
    noise_sd: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_sd < 0:
            raise ValidationError("noise_sd must be >= 0")


@dataclass
class DatasetRanges:
    """Per-sample parameter ranges for :func:`gen_dataset`.

    Grain counts are drawn log-uniformly so mean grain sizes spread evenly;
    a ``fiber_fraction`` share of samples gets a fibre texture with a spread
    drawn from ``spread_deg``.
    """

    grid: tuple = (48, 48)
    n_grains: tuple = (10, 100)
    step: float = 1.0
    fiber_fraction: float = 0.6
    fiber_axis: tuple = (0.0, 0.0, 1.0)
    spread_deg: tuple = (10.0, 40.0)
    orientation_noise_deg: float = 0.5
    seed: int = 0


def voronoi_labels(shape, sites):
    """Label each pixel centre ``(col, row)`` by its nearest site, 1-based.

    Distance ties go to the lowest site index.
    """
    rows, cols = shape
    sites = np.asarray(sites, dtype=np.float64).reshape(-1, 2)
    yy, xx = np.mgrid[0:rows, 0:cols]
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)
    if len(pts) * len(sites) <= _BRUTE_FORCE_LIMIT:
        d2 = ((pts[:, None, :] - sites[None, :, :]) ** 2).sum(-1)
        nearest = np.argmin(d2, axis=1)  # argmin keeps the first minimum
    else:
        k = min(2, len(sites))
        dist, idx = cKDTree(sites).query(pts, k=k)
        if k == 1:
            nearest = idx
        else:
            tie = dist[:, 0] == dist[:, 1]
            nearest = np.where(tie, np.minimum(idx[:, 0], idx[:, 1]), idx[:, 0])
    return nearest.reshape(rows, cols).astype(np.int64) + 1


def _label_components(labels):
    """4-connected components of equal-label regions, numbered by first pixel."""
    rows, cols = labels.shape
    idx = np.arange(rows * cols).reshape(rows, cols)
    same_h = labels[:, :-1] == labels[:, 1:]
    same_v = labels[:-1, :] == labels[1:, :]
    src = np.concatenate([idx[:, :-1][same_h], idx[:-1, :][same_v]])
    dst = np.concatenate([idx[:, 1:][same_h], idx[1:, :][same_v]])
    graph = sparse.coo_matrix((np.ones(len(src), np.int8), (src, dst)), shape=(rows * cols,) * 2).tocsr()
    n, comp = connected_components(graph, directed=False)
    return n, (_relabel_by_first_pixel(comp) - 1).reshape(rows, cols)


def merge_fragments(labels):
    """Make every label region 4-connected.

    Each label keeps its largest component (ties: the one containing the
    lowest pixel index); other fragments join the neighbouring label they
    share the most pixel edges with (ties: lowest label).  Digital Voronoi
    cells can be only 8-connected, which a 4-neighbourhood segmentation
    would split.
    """
    labels = np.array(labels, dtype=np.int64)
    for _ in range(100):
        n_comp, comp = _label_components(labels)
        n_labels = labels.max()
        if n_comp == n_labels:
            return labels
        flat_comp, flat_lab = comp.ravel(), labels.ravel()
        sizes = np.bincount(flat_comp, minlength=n_comp)
        comp_label = np.zeros(n_comp, np.int64)
        comp_label[flat_comp] = flat_lab
        # components are numbered by first pixel, so a stable sort on -size keeps the earliest on ties
        order = np.lexsort((np.arange(n_comp), -sizes))
        keeper = {}
        for c in order:
            keeper.setdefault(comp_label[c], c)
        fragment = np.ones(n_comp, bool)
        fragment[list(keeper.values())] = False

        pairs = []
        for u, v, lu, lv in ((comp[:, :-1], comp[:, 1:], labels[:, :-1], labels[:, 1:]),
                             (comp[:-1, :], comp[1:, :], labels[:-1, :], labels[1:, :])):
            diff = u != v
            pairs.append(np.stack([u[diff], lv[diff]], 1))
            pairs.append(np.stack([v[diff], lu[diff]], 1))
        pairs = np.concatenate(pairs)
        pairs = pairs[fragment[pairs[:, 0]]]
        uniq, counts = np.unique(pairs, axis=0, return_counts=True)
        # best neighbour per fragment: most shared edges, then lowest label
        order = np.lexsort((uniq[:, 1], -counts, uniq[:, 0]))
        uniq = uniq[order]
        first = np.r_[True, uniq[1:, 0] != uniq[:-1, 0]]
        target = dict(zip(uniq[first, 0], uniq[first, 1]))
        new_label = comp_label.copy()
        for c, lab in target.items():
            new_label[c] = lab
        labels = new_label[comp]
    raise RuntimeError("fragment merging did not converge")


def gen_voronoi(cfg):
    """Voronoi grain map of ``cfg.n_grains`` grains.

    Returns ``(labels, sites)``: labels are 1-based site indices on a
    ``cfg.grid`` array and ``sites`` the final ``(n, 2)`` site coordinates
    in pixel units ``(col, row)``.  Sites whose cell would be empty are moved
    onto a random pixel centre until every grain owns at least one pixel.
    """
    rows, cols = cfg.grid
    if cfg.n_grains > rows * cols:
        raise ValidationError(f"n_grains={cfg.n_grains} exceeds the {rows * cols} pixels of the grid")
    rng = np.random.default_rng([cfg.seed, 0])
    sites = rng.uniform(0.0, 1.0, size=(cfg.n_grains, 2)) * [cols, rows] - 0.5
    labels = voronoi_labels((rows, cols), sites)
    for _ in range(1000):
        counts = np.bincount(labels.ravel(), minlength=cfg.n_grains + 1)[1:]
        empty = np.flatnonzero(counts == 0)
        if len(empty) == 0:
            break
        taken = set()
        for s in empty:
            while True:
                p = int(rng.integers(rows * cols))
                owner = labels.flat[p]
                if counts[owner - 1] > 1 and p not in taken:
                    break
            taken.add(p)
            counts[owner - 1] -= 1
            sites[s] = (p % cols, p // cols)
        labels = voronoi_labels((rows, cols), sites)
    else:
        raise RuntimeError("could not populate every Voronoi site")
    return merge_fragments(labels), sites


def _random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _fiber_quats(rng, n, axis, spread_deg):
    """Orientations whose crystal c-axis lies near ``axis``.

    The tilt away from the axis is Rayleigh distributed with scale
    ``spread_deg`` (an isotropic 2-D Gaussian on the tangent plane); the
    tilt azimuth and the rotation about c are uniform.
    """
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    z = np.array([0.0, 0.0, 1.0])
    cross = np.cross(z, axis)
    if np.linalg.norm(cross) < 1e-12:
        align = np.array([1.0, 0.0, 0.0, 0.0]) if axis[2] > 0 else np.array([0.0, 1.0, 0.0, 0.0])
    else:
        align = quat_from_axis_angle(cross, math.degrees(math.acos(np.clip(axis @ z, -1, 1))))
    tilt = spread_deg * np.sqrt(-2.0 * np.log1p(-rng.uniform(size=n)))
    azimuth = rng.uniform(0.0, 360.0, size=n)
    spin = rng.uniform(0.0, 360.0, size=n)
    local = euler_to_quat(np.stack([azimuth, tilt, spin], axis=1))
    return quat_mult(align, local)


def assign_orientations(labels, cfg):
    """Scan field with one base orientation per grain plus per-pixel jitter.

    The jitter is a rotation about a random axis by an angle drawn from
    ``N(0, orientation_noise_deg)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = int(labels.max())
    rng = np.random.default_rng([cfg.seed, 1])
    if cfg.texture == "uniform":
        base = _random_quats(rng, n)
    else:
        base = _fiber_quats(rng, n, cfg.fiber_axis, cfg.spread_deg)
    rows, cols = labels.shape
    if cfg.orientation_noise_deg > 0:
        q = base[labels.ravel() - 1]
        axes = rng.normal(size=(rows * cols, 3))
        angles = rng.normal(0.0, cfg.orientation_noise_deg, size=rows * cols)
        q = quat_mult(q, quat_from_axis_angle(axes, angles))
        euler = quat_to_euler(q)
    else:
        euler = quat_to_euler(base)[labels.ravel() - 1]
    return ScanField(rows, cols, float(cfg.step), euler.reshape(rows, cols, 3),
                     np.ones((rows, cols), np.int64))


def texture_fraction(table, cutoff_deg=45.0):
    """Fraction of grains whose mean ``Phi`` is below ``cutoff_deg``."""
    return float(np.mean(table.eulers[:, 1] < cutoff_deg))


def oracle_property(table, ocfg):
    """Yield strength in MPa of a grain table under the synthetic oracle.

    ``sigma0 + k_hp / sqrt(mean size) + texture_coeff * f + N(0, noise_sd)``
    where ``f`` is the fraction of grains with ``Phi < 45``.  The noise draw
    depends only on ``ocfg.seed``.
    """
    if len(table) == 0:
        raise ValidationError("oracle needs a non-empty grain table")
    value = (ocfg.sigma0 + ocfg.k_hp / math.sqrt(float(np.mean(table.sizes)))
             + ocfg.texture_coeff * texture_fraction(table))
    if ocfg.noise_sd > 0:
        value += float(np.random.default_rng(ocfg.seed).normal(0.0, ocfg.noise_sd))
    return value


def sample_config(ranges, index):
    """Deterministic :class:`SynthConfig` for sample ``index`` of a dataset."""
    rng = np.random.default_rng([ranges.seed, index, 2])
    lo, hi = ranges.n_grains
    n_grains = int(round(math.exp(rng.uniform(math.log(lo), math.log(hi)))))
    fiber = rng.uniform() < ranges.fiber_fraction
    spread = float(rng.uniform(*ranges.spread_deg))
    return SynthConfig(grid=tuple(ranges.grid), n_grains=n_grains, step=ranges.step,
                       texture="fiber" if fiber else "uniform", fiber_axis=tuple(ranges.fiber_axis),
                       spread_deg=spread, orientation_noise_deg=ranges.orientation_noise_deg,
                       seed=int(np.random.SeedSequence([ranges.seed, index]).generate_state(1)[0]))


def gen_sample(ranges, ocfg, index):
    """Scan, ground-truth grain table and label for one dataset sample."""
    cfg = sample_config(ranges, index)
    labels, _ = gen_voronoi(cfg)
    scan = assign_orientations(labels, cfg)
    truth = grain_metrics(scan, labels)
    sample_oracle = OracleConfig(**{**asdict(ocfg), "seed": cfg.seed})
    return cfg, scan, truth, oracle_property(truth, sample_oracle)


def gen_dataset(n_samples, ranges, ocfg, out_dir):
    """Write ``n_samples`` scan CSVs plus ``manifest.csv`` (``sample_id,ys``).

    A ``dataset.json`` next to them records the generator settings.  Returns
    the manifest as a DataFrame.
    """
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i in range(n_samples):
        cfg, scan, truth, ys = gen_sample(ranges, ocfg, i)
        sample_id = f"sample_{i:03d}"
        write_scan(scan, os.path.join(out_dir, f"{sample_id}.csv"))
        rows.append({"sample_id": sample_id, "ys": ys})
    manifest = pd.DataFrame(rows, columns=["sample_id", "ys"])
    manifest.to_csv(os.path.join(out_dir, "manifest.csv"), index=False, lineterminator="\n")
    with open(os.path.join(out_dir, "dataset.json"), "w", encoding="utf-8") as fh:
        json.dump({"n_samples": n_samples, "ranges": asdict(ranges), "oracle": asdict(ocfg)},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
