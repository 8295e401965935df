"""Descriptor-based ridge and nearest-neighbour baselines."""

import time
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .graph_build import orientation_category, size_category
from .train_eval import EvalReport


def descriptor_names(cfg):
    return (["mean_size", "sd_size", "grain_count", "mean_lp", "frac_strong"]
            + [f"size_hist_{i}" for i in range(1, cfg.n_size + 1)]
            + [f"ori_hist_{i}" for i in range(1, cfg.n_orientation + 1)])


def descriptors(table, cfg):
    """Fixed-length summary of a grain table.

    Layout: mean size, size standard deviation, grain count, mean
    shared-length fraction ``lp`` over both directions of every adjacency,
    fraction of those directions that are strong, then the normalised
    size-category and orientation-category histograms.
    """
    sizes = table.sizes
    if len(sizes) == 0:
        raise ValidationError("descriptors need a non-empty table")
    ia, ib, length = table.adjacency_arrays()
    perim = table.perimeters
    if len(ia):
        lp = np.concatenate([length / perim[ia], length / perim[ib]])
        mean_lp, frac_strong = float(lp.mean()), float(np.mean(lp >= cfg.lam))
    else:
        mean_lp, frac_strong = 0.0, 0.0
    size_cats = size_category(sizes, cfg)
    _, ori_flat = orientation_category(table.eulers, cfg)
    size_hist = np.bincount(size_cats - 1, minlength=cfg.n_size) / len(sizes)
    ori_hist = np.bincount(ori_flat - 1, minlength=cfg.n_orientation) / len(sizes)
    head = [sizes.mean(), sizes.std(), len(sizes), mean_lp, frac_strong]
    return np.concatenate([np.array(head, dtype=np.float64), size_hist, ori_hist])


@dataclass
class RidgeModel:
    """Ridge weights on z-scored features; ``coef_original`` maps raw features."""

    mean: np.ndarray
    scale: np.ndarray
    coef: np.ndarray
    intercept: float

    @property
    def coef_original(self):
        return self.coef / self.scale


def _standardizer(X):
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    return mean, scale


def ridge_fit(X, y, alpha=1.0):
    """Solve ``(Z^T Z + alpha I) w = Z^T (y - mean y)`` with ``Z`` the z-scored ``X``.

    The intercept is the training mean of ``y`` and is not penalised.
    """
    if alpha < 0:
        raise ValidationError("alpha must be non-negative")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != len(y) or len(y) == 0:
        raise ValidationError("ridge_fit needs X of shape (n, d) and y of length n")
    mean, scale = _standardizer(X)
    Z = (X - mean) / scale
    intercept = float(y.mean())
    A = Z.T @ Z + alpha * np.eye(Z.shape[1])
    rhs = Z.T @ (y - intercept)
    try:
        coef = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        coef = np.linalg.lstsq(A, rhs, rcond=None)[0]
    return RidgeModel(mean, scale, coef, intercept)


ALPHA_GRID = tuple(10.0 ** np.arange(-2, 4.5, 0.5))


def select_alpha(X, y, alphas=ALPHA_GRID):
    """Alpha with the lowest leave-one-out error on ``(X, y)``, standardisation held fixed.

    Uses the ridge hat matrix ``H = 11^T/n + Z (Z^T Z + alpha I)^-1 Z^T``
    and the identity ``e_loo = (y - H y) / (1 - diag H)``.  Ties go to the
    larger alpha.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mean, scale = _standardizer(X)
    U, s, _ = np.linalg.svd((X - mean) / scale, full_matrices=False)
    yc = y - y.mean()
    uty = U.T @ yc
    best, best_err = None, np.inf
    for alpha in sorted(alphas, reverse=True):
        shrink = s * s / (s * s + alpha)
        fitted = U @ (shrink * uty)
        lev = (U * U) @ shrink + 1.0 / len(y)
        err = float(np.mean(((yc - fitted) / (1.0 - lev)) ** 2))
        if err < best_err:
            best, best_err = float(alpha), err
    return best


def ridge_predict(model, X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return model.intercept + ((X - model.mean) / model.scale) @ model.coef


def knn_predict(X_train, y_train, x_query, k=5):
    """Mean label of the ``k`` nearest training rows in z-scored feature space.

    Standardisation is fitted on ``X_train``.  Equal distances are ordered
    by training index.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    if not 1 <= k <= len(y_train):
        raise ValidationError(f"k={k} outside [1, {len(y_train)}]")
    mean, scale = _standardizer(X_train)
    Z = (X_train - mean) / scale
    q = np.atleast_2d((np.asarray(x_query, dtype=np.float64) - mean) / scale)
    d2 = ((q[:, None, :] - Z[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    out = y_train[nearest].mean(axis=1)
    return out if np.ndim(x_query) == 2 else float(out[0])


def baseline_loocv(samples, method="ridge", alpha=None, k=5):
    """Leave-one-out report for a descriptor baseline.

    ``samples`` is a list of ``(sample_id, descriptor_vector, label)``.
    With ``alpha=None`` each ridge fold picks its own alpha by
    :func:`select_alpha` on its training rows.
    """
    if method not in ("ridge", "knn"):
        raise ValidationError(f"unknown baseline {method!r}")
    if len(samples) < 3:
        raise ValidationError("LOOCV needs at least three samples")
    ordered = sorted(samples, key=lambda s: s[0])
    X = np.array([s[1] for s in ordered], dtype=np.float64)
    y = np.array([s[2] for s in ordered], dtype=np.float64)
    start = time.perf_counter()
    rows, chosen = [], []
    for fold, (sid, x, label) in enumerate(ordered):
        keep = np.arange(len(y)) != fold
        if method == "ridge":
            a = select_alpha(X[keep], y[keep]) if alpha is None else alpha
            chosen.append(a)
            pred = float(ridge_predict(ridge_fit(X[keep], y[keep], a), x)[0])
        else:
            pred = knn_predict(X[keep], y[keep], x, k)
        rows.append({"id": sid, "y_true": float(label), "y_pred": pred, "fold": fold})
    if method == "ridge":
        params = {"alpha": "loo-selected" if alpha is None else alpha, "alpha_grid": list(ALPHA_GRID)}
    else:
        params = {"k": k}
    config = {"protocol": "loocv", "baseline": method, **params}
    extra = {"alpha_per_fold": chosen} if method == "ridge" else {}
    return EvalReport.from_rows(rows, config, 0, method, time.perf_counter() - start, extra)
