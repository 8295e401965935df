"""Dataset directories: manifest plus scans, turned into grain tables and graphs."""

import os

import numpy as np

from .errors import FormatError, ValidationError
from .graph_build import build_graph, fit_discretization
from .scan_ingest import DEFAULT_THRESHOLD_DEG, _read_csv, ingest_scan

MANIFEST = "manifest.csv"


def read_manifest(dataset_dir, target="ys"):
    """``(sample_id, label)`` pairs from ``manifest.csv`` in ``dataset_dir``."""
    path = os.path.join(dataset_dir, MANIFEST)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no {MANIFEST} in {dataset_dir}")
    df = _read_csv(path)
    if "sample_id" not in df.columns or target not in df.columns:
        raise FormatError(f"{MANIFEST} needs columns sample_id,{target}")
    ids = [str(s) for s in df["sample_id"]]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate sample ids in manifest")
    labels = df[target].to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(labels)):
        raise ValidationError("manifest labels must be finite")
    return list(zip(ids, labels.tolist()))


def load_dataset(dataset_dir, threshold_deg=DEFAULT_THRESHOLD_DEG, symmetry="none", target="ys"):
    """Ingest every scan listed in the manifest.

    Returns a list of ``(sample_id, GrainTable, label)`` in manifest order;
    scan files are ``<sample_id>.csv`` next to the manifest.
    """
    out = []
    for sid, label in read_manifest(dataset_dir, target):
        table = ingest_scan(os.path.join(dataset_dir, f"{sid}.csv"), threshold_deg, symmetry)
        out.append((sid, table, label))
    if not out:
        raise ValidationError("dataset is empty")
    return out


def build_dataset_graphs(samples, n_size=10, n_phi=4, lam=0.2, phi_range_mode="fitted", disc=None):
    """Discretisation fitted on all tables, then one labelled graph per sample.

    Returns ``(disc, [(sample_id, GrainGraph), ...])``.  Fitting the bins
    uses only grain attributes, never labels.
    """
    if disc is None:
        disc = fit_discretization([t for _, t, _ in samples], n_size, n_phi, lam, phi_range_mode)
    graphs = [(sid, build_graph(t, disc, label, source_id=sid)) for sid, t, label in samples]
    return disc, graphs
