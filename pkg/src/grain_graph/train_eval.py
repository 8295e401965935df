"""Training loop, optimisers, leave-one-out evaluation and regression metrics."""

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import NumericError, ValidationError
from .model import HeteroGAT, PreparedGraph, forward, graph_input_dims

log = logging.getLogger(__name__)
REPORT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    weight_decay: float = 0.0
    seed: int = 0
    early_stop_patience: int = 50
    batch_size: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")


def fingerprint(obj):
    """Short stable hash of a JSON-serialisable config."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class Adam:
    """Adam with bias correction over a flat parameter vector; ``weight_decay`` is an L2 term."""

    def __init__(self, size, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grad):
        if self.weight_decay:
            grad = grad + self.weight_decay * params
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    def __init__(self, size, lr=1e-2, momentum=0.0, weight_decay=0.0):
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = np.zeros(size)

    def step(self, params, grad):
        if self.weight_decay:
            grad = grad + self.weight_decay * params
        self.velocity = self.momentum * self.velocity + grad
        params -= self.lr * self.velocity


def make_optimizer(train_cfg, size):
    if train_cfg.optimizer == "adam":
        return Adam(size, train_cfg.learning_rate, train_cfg.beta1, train_cfg.beta2, train_cfg.eps,
                    train_cfg.weight_decay)
    return SGD(size, train_cfg.learning_rate, train_cfg.momentum, train_cfg.weight_decay)


@dataclass
class TrainResult:
    model: HeteroGAT
    loss_trace: list
    best_epoch: int


def train(graphs, model_cfg, train_cfg):
    """Fit a :class:`HeteroGAT` to labelled graphs by minimising squared error.

    Targets are standardised with the training mean and standard deviation
    (stored in the model, so predictions come back in label units).  Each
    epoch visits the graphs in a seeded random order in mini-batches of
    ``batch_size``.  The epoch loss is the mean squared error, in label
    units squared, of the predictions made during that epoch.  The returned
    model holds the parameters at the end of the epoch with the lowest
    loss; training stops early after ``early_stop_patience`` epochs without
    improvement.
    """
    if len(graphs) < 2:
        raise ValidationError("training needs at least two labelled graphs")
    if any(g.label is None for g in graphs):
        raise ValidationError("every training graph needs a label")
    dims = graph_input_dims(graphs[0])
    if any(graph_input_dims(g) != dims for g in graphs):
        raise ValidationError("training graphs have inconsistent feature widths")

    y = np.array([g.label for g in graphs], dtype=np.float64)
    shift = float(y.mean())
    scale = float(y.std()) or 1.0
    y_std = (y - shift) / scale
    model = HeteroGAT.create(model_cfg, dims, shift, scale)
    prepared = [PreparedGraph.from_graph(g) for g in graphs]
    store = model.params
    opt = make_optimizer(train_cfg, store.size)
    rng = np.random.default_rng(train_cfg.seed)

    trace, best_loss, best_epoch, best_flat = [], np.inf, 0, store.flat.copy()
    n = len(graphs)
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(n)
        sq_err = 0.0
        for start in range(0, n, train_cfg.batch_size):
            batch = order[start:start + train_cfg.batch_size]
            grad = np.zeros(store.size)
            for i in batch:
                try:
                    with dc.Tape() as tape:
                        P = store.leaves()
                        pred = forward(prepared[i], P, model_cfg, mode="train", rng=rng)
                        loss = dc.mul(dc.square(dc.sub(pred, y_std[i])), 1.0 / len(batch))
                    grad += store.flatten(tape.backward(loss))
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch}: {exc}") from exc
                sq_err += float((pred.data - y_std[i]) ** 2)
            opt.step(store.flat, grad)
        epoch_loss = sq_err / n * scale * scale
        if not np.isfinite(epoch_loss):
            raise NumericError(f"epoch {epoch}: non-finite training loss")
        trace.append(epoch_loss)
        if epoch_loss < best_loss:
            best_loss, best_epoch, best_flat = epoch_loss, epoch, store.flat.copy()
        elif epoch - best_epoch >= train_cfg.early_stop_patience:
            log.debug("early stop at epoch %d (best %d)", epoch, best_epoch)
            break
    store.flat[:] = best_flat
    model.meta = {"best_epoch": best_epoch, "epochs_run": len(trace)}
    return TrainResult(model, trace, best_epoch)


def metrics(y_true, y_pred):
    """MSE, MAE and R^2 (``1 - SS_res / SS_tot`` about the mean of ``y_true``)."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1 or len(y_true) == 0:
        raise ValidationError("metrics need two equal-length non-empty 1-D arrays")
    resid = y_true - y_pred
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValidationError("R^2 is undefined for constant y_true")
    return {
        "mse": float(np.mean(resid ** 2)),
        "mae": float(np.mean(np.abs(resid))),
        "r2": 1.0 - float(np.sum(resid ** 2)) / ss_tot,
    }


@dataclass
class EvalReport:
    """Held-out predictions plus the metrics computed from them.

    ``wall_time`` is kept on the object but left out of the JSON so that
    reports from identical runs are byte-identical.
    """

    rows: list
    metrics: dict
    config: dict
    seed: int
    method: str = "hetero_gat"
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows, config, seed, method, wall_time=0.0, extra=None):
        rows = sorted(rows, key=lambda r: r["id"])
        m = metrics([r["y_true"] for r in rows], [r["y_pred"] for r in rows])
        return cls(rows, m, config, seed, method, wall_time, extra or {})

    def to_dict(self):
        return {
            "version": REPORT_VERSION,
            "method": self.method,
            "seed": self.seed,
            "config": self.config,
            "fingerprint": fingerprint(self.config),
            "metrics": self.metrics,
            "rows": self.rows,
            "extra": self.extra,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("version") != REPORT_VERSION:
            raise ValidationError(f"unknown report version {doc.get('version')!r}")
        report = cls(doc["rows"], doc["metrics"], doc["config"], doc["seed"], doc["method"],
                     extra=doc.get("extra", {}))
        report.check_consistency()
        return report

    def check_consistency(self, tol=1e-12):
        if not self.rows:
            raise ValidationError("report has no rows")
        again = metrics([r["y_true"] for r in self.rows], [r["y_pred"] for r in self.rows])
        for key, value in again.items():
            if abs(value - self.metrics[key]) > tol * max(1.0, abs(value)):
                raise ValidationError(f"stored {key}={self.metrics[key]} disagrees with rows ({value})")


def _run_fold(args):
    fold, held, train_graphs, model_cfg, train_cfg = args
    try:
        result = train(train_graphs, model_cfg, train_cfg)
    except Exception as exc:
        raise type(exc)(f"fold {fold}: {exc}") from exc
    rows = [{"id": sid, "y_true": float(g.label), "y_pred": result.model.predict(g), "fold": fold}
            for sid, g in held]
    return rows, result.loss_trace


def fold_assignment(n, k_folds=None):
    """Fold index per sample (in sample-id order): leave-one-out, or ``i mod k``."""
    if k_folds is None:
        return np.arange(n)
    if not 2 <= k_folds <= n:
        raise ValidationError(f"k_folds must be in [2, {n}]")
    return np.arange(n) % k_folds


def loocv(dataset, model_cfg, train_cfg, threads=1, config_extra=None, k_folds=None):
    """Cross-validated evaluation of the graph model, leave-one-out by default.

    ``dataset`` is a list of ``(sample_id, graph)`` with labelled graphs.
    Each fold trains on the remaining samples in sample-id order with the
    same seeds, so the report does not depend on the order of ``dataset``.
    Folds run in ``threads`` worker processes when ``threads > 1``; each
    fold is self-contained so the result is the same either way.
    """
    if len(dataset) < 3:
        raise ValidationError("cross-validation needs at least three samples")
    ordered = sorted(dataset, key=lambda item: item[0])
    if len({sid for sid, _ in ordered}) != len(ordered):
        raise ValidationError("sample ids must be unique")
    assign = fold_assignment(len(ordered), k_folds)
    jobs = []
    for fold in range(int(assign.max()) + 1):
        held = [item for item, f in zip(ordered, assign) if f == fold]
        rest = [g for (_, g), f in zip(ordered, assign) if f != fold]
        jobs.append((fold, held, rest, model_cfg, train_cfg))
    start = time.perf_counter()
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = [_run_fold(job) for job in jobs]
    wall = time.perf_counter() - start
    rows = [row for fold_rows, _ in results for row in fold_rows]
    protocol = "loocv" if k_folds is None else f"{k_folds}-fold"
    config = {"model": asdict(model_cfg), "train": asdict(train_cfg), "protocol": protocol}
    config.update(config_extra or {})
    traces = {str(fold): trace for fold, (_, trace) in enumerate(results)}
    report = EvalReport.from_rows(rows, config, train_cfg.seed, "hetero_gat", wall, {"loss_traces": traces})
    log.info("%s %s: r2=%.4f mse=%.3f (%.1fs)", protocol, fingerprint(config), report.metrics["r2"],
             report.metrics["mse"], wall)
    return report


def constant_predictor_report(dataset, value=None):
    """Report for a predictor that ignores its input (the training-fold mean by default)."""
    ordered = sorted(dataset, key=lambda item: item[0])
    labels = np.array([g.label for _, g in ordered])
    rows = []
    for fold, (sid, g) in enumerate(ordered):
        pred = float(value) if value is not None else float(np.delete(labels, fold).mean())
        rows.append({"id": sid, "y_true": float(g.label), "y_pred": pred, "fold": fold})
    return EvalReport.from_rows(rows, {"protocol": "loocv", "method": "constant"}, 0, "constant")


def loss_trace_csv(trace):
    """``epoch,loss`` CSV text, epochs counted from 1."""
    lines = ["epoch,loss"] + [f"{e},{float(v)!r}" for e, v in enumerate(trace, start=1)]
    return "\n".join(lines) + "\n"


def read_loss_trace(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "epoch,loss":
            raise ValidationError(f"{path}: expected header 'epoch,loss'")
        return [float(line.split(",")[1]) for line in fh if line.strip()]
