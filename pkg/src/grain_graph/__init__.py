"""Grain knowledge graphs from orientation scans and a heterogeneous
graph attention model for predicting bulk properties from them."""

from .errors import (DanglingReferenceError, FormatError, GeometryError, GrainGraphError, NumericError,
                     ShapeError, UsageError, ValidationError)
from .graph_build import DiscretizationConfig, GrainGraph, build_graph, fit_discretization
from .model import HeteroGAT, ModelConfig
from .scan_ingest import GrainTable, ScanField, ingest_scan, parse_scan, segment_grains
from .train_eval import EvalReport, TrainConfig, loocv, metrics, train

__version__ = "0.1.0"
