"""Minimal reverse-mode autodiff over float64 numpy arrays.

Operations run eagerly.  Inside a ``with Tape() as tape:`` block every op
whose inputs need gradients is appended to the tape; ``tape.backward(loss)``
then walks the tape once in reverse.  Outside a tape nothing is recorded,
which is how evaluation runs.

Broadcasting is never implicit except against scalars: row and column
broadcasts have their own ops (``add_bias``, ``mul_row``, ``scale_rows``).
Every op output is checked for NaN/Inf.
"""

import contextvars
import math

import numpy as np

from .errors import NumericError, ShapeError, UsageError

_ACTIVE_TAPE = contextvars.ContextVar("grain_graph_tape", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records op nodes in execution order (which is a topological order)."""

    def __init__(self):
        self.nodes = []
        self.stochastic = False
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        return False

    def backward(self, output, store=None):
        """Gradients of scalar ``output`` keyed by leaf name.

        With ``store`` given, every name in it is present in the result and
        parameters that did not take part get zeros.
        """
        output = as_tensor(output)
        if output.data.size != 1:
            raise UsageError(f"backward needs a scalar output, got shape {output.shape}")
        grads = {id(output): np.ones_like(output.data)}
        leaves = {}
        for out, inputs, rule in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, rule(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp.name is not None:
                    leaves[key] = inp
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        result = {}
        for key, leaf in leaves.items():
            if key in grads:
                result[leaf.name] = grads[key]
        if output.name is not None and id(output) in grads:
            result[output.name] = grads[id(output)]
        if store is not None:
            for name in store.names():
                if name not in result:
                    result[name] = np.zeros(store[name].shape)
        return result


def _finite(data, op):
    # NaN and Inf survive a sum; the full scan only runs to rule out overflow of the sum itself
    if not math.isfinite(np.sum(data)) and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from {op}")
    return data


def record(data, op, inputs, rule):
    """Wrap ``data`` as the output of op ``op`` and tape it when any input needs gradients.

    ``rule(grad_out)`` must return one gradient (or ``None``) per input.
    Models use this to define fused ops with hand-written backward passes.
    """
    out = Tensor(_finite(data, op))
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append((out, inputs, rule))
    return out


_record = record


def _same_or_scalar(a, b, op):
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.full(shape, g.sum()) if shape else np.asarray(g.sum())


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_or_scalar(a, b, "add")
    return _record(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_or_scalar(a, b, "sub")
    return _record(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_or_scalar(a, b, "mul")
    return _record(a.data * b.data, "mul", (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def square(a):
    return _record(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def tanh(a):
    y = np.tanh(a.data)
    return _record(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def leaky_relu(a, slope=0.2):
    if not slope > 0:
        raise ValueError("leaky_relu slope must be positive")
    pos = a.data > 0
    return _record(np.where(pos, a.data, slope * a.data), "leaky_relu", (a,),
                   lambda g: (np.where(pos, g, slope * g),))


def dropout(a, p, train, rng=None):
    """Inverted dropout: kept entries scale by ``1 / (1 - p)``; identity when not training."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return a
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.stochastic = True
    if rng is None:
        raise UsageError("dropout in training mode needs an rng")
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _record(a.data * mask, "dropout", (a,), lambda g: (g * mask,))


# ---------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def rule(g):
        if b.data.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return _record(a.data @ b.data, "matmul", (a, b), rule)


def add_bias(a, bias):
    """``a + bias`` with ``bias`` of shape ``(d,)`` added to every row of ``(n, d)`` ``a``."""
    if a.data.ndim != 2 or bias.shape != (a.shape[1],):
        raise ShapeError(f"add_bias: shapes {a.shape} and {bias.shape} are incompatible")
    return _record(a.data + bias.data, "add_bias", (a, bias), lambda g: (g, g.sum(axis=0)))


def mul_row(a, gain):
    """``a * gain`` with ``gain`` of shape ``(d,)`` multiplying every row."""
    if a.data.ndim != 2 or gain.shape != (a.shape[1],):
        raise ShapeError(f"mul_row: shapes {a.shape} and {gain.shape} are incompatible")
    return _record(a.data * gain.data, "mul_row", (a, gain),
                   lambda g: (g * gain.data, (g * a.data).sum(axis=0)))


def scale_rows(a, w):
    """``a * w[:, None]`` for ``(n, d)`` ``a`` and ``(n,)`` ``w``."""
    if a.data.ndim != 2 or w.shape != (a.shape[0],):
        raise ShapeError(f"scale_rows: shapes {a.shape} and {w.shape} are incompatible")
    return _record(a.data * w.data[:, None], "scale_rows", (a, w),
                   lambda g: (g * w.data[:, None], (g * a.data).sum(axis=1)))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {exc}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(data, "concat", tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack_scalars(tensors):
    """Stack scalar tensors into a 1-D tensor."""
    tensors = [as_tensor(t) for t in tensors]
    if any(t.data.size != 1 for t in tensors):
        raise ShapeError("stack_scalars takes scalar tensors")
    shapes = [t.shape for t in tensors]
    return _record(np.array([t.data.reshape(()) for t in tensors]), "stack_scalars", tuple(tensors),
                   lambda g: tuple(np.reshape(gi, s) for gi, s in zip(g, shapes)))


def reduce_sum(a, axis=None):
    shape = a.shape

    def rule(g):
        if axis is None:
            return (np.full(shape, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(a.data.sum(axis=axis), "reduce_sum", (a,), rule)


def reduce_mean(a, axis=None):
    count = a.data.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError("reduce_mean over an empty axis")
    shape = a.shape

    def rule(g):
        if axis is None:
            return (np.full(shape, g / count),)
        return (np.broadcast_to(np.expand_dims(g / count, axis), shape).copy(),)

    return _record(a.data.mean(axis=axis), "reduce_mean", (a,), rule)


def layer_norm(a, eps=1e-5):
    """Normalise each row of ``(n, d)`` ``a`` to zero mean and unit variance (no affine)."""
    if not eps > 0:
        raise ValueError("layer_norm eps must be positive")
    if a.data.ndim != 2:
        raise ShapeError(f"layer_norm expects a 2-D tensor, got {a.shape}")
    mu = a.data.mean(axis=1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    y = xc * inv

    def rule(g):
        d = a.shape[1]
        gy = g - g.mean(axis=1, keepdims=True)
        return (inv * (gy - y * (g * y).sum(axis=1, keepdims=True) / d),)

    return _record(y, "layer_norm", (a,), rule)


def weighted_sum(tensors, weights):
    """``sum_k weights[k] * tensors[k]`` for same-shape tensors and a 1-D weight tensor."""
    tensors = [as_tensor(t) for t in tensors]
    if weights.shape != (len(tensors),) or len({t.shape for t in tensors}) != 1:
        raise ShapeError("weighted_sum: need equal-shape tensors and one weight each")
    w = weights.data
    out = sum(wk * t.data for wk, t in zip(w, tensors))

    def rule(g):
        return tuple(wk * g for wk in w) + (np.array([(g * t.data).sum() for t in tensors]),)

    return _record(out, "weighted_sum", tuple(tensors) + (weights,), rule)


# ------------------------------------------------------------ segment ops

class Segments:
    """Segment ids of ``length`` items over ``n`` segments (some may be empty)."""

    def __init__(self, ids, n):
        ids = np.asarray(ids, dtype=np.int64)
        if len(ids) and (ids.min() < 0 or ids.max() >= n):
            raise ShapeError("segment id out of range")
        self.ids = ids
        self.n = int(n)
        self.order = None if np.all(ids[1:] >= ids[:-1]) else np.argsort(ids, kind="stable")
        sorted_ids = ids if self.order is None else ids[self.order]
        if len(ids):
            self.starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
            self.present = sorted_ids[self.starts]
        else:
            self.starts = np.empty(0, np.int64)
            self.present = np.empty(0, np.int64)
        self.counts = np.bincount(ids, minlength=self.n)
        self.complete = len(self.present) == self.n
        self.identity = self.complete and len(ids) == self.n and self.order is None

    def __len__(self):
        return len(self.ids)

    def _reduce(self, ufunc, values, fill):
        if self.identity:
            return values.copy()
        v = values if self.order is None else values[self.order]
        if self.complete and len(self.ids):
            return ufunc.reduceat(v, self.starts, axis=0)
        out = np.full((self.n,) + values.shape[1:], fill, dtype=np.float64)
        if len(self.ids):
            out[self.present] = ufunc.reduceat(v, self.starts, axis=0)
        return out

    def sum(self, values):
        return self._reduce(np.add, values, 0.0)

    def max(self, values):
        return self._reduce(np.maximum, values, -np.inf)


def gather_rows(a, idx):
    """``a[idx]`` along the first axis.  ``idx`` is an int array or :class:`Segments`."""
    seg = idx if isinstance(idx, Segments) else None
    ids = seg.ids if seg is not None else np.asarray(idx, dtype=np.int64)
    n = a.shape[0]

    def rule(g):
        if seg is not None and seg.n == n:
            return (seg.sum(g),)
        out = np.zeros(a.shape)
        np.add.at(out, ids, g)
        return (out,)

    return _record(a.data[ids], "gather_rows", (a,), rule)


def segment_sum(a, segments):
    """Sum rows of ``a`` into ``segments.n`` output rows."""
    if a.shape[0] != len(segments):
        raise ShapeError(f"segment_sum: {a.shape[0]} rows vs {len(segments)} segment ids")
    return _record(segments.sum(a.data), "segment_sum", (a,), lambda g: (g[segments.ids],))


def segment_softmax(logits, segments):
    """Softmax of 1-D ``logits`` within each segment (max-subtracted)."""
    if not isinstance(segments, Segments):
        ids = np.asarray(segments, dtype=np.int64)
        segments = Segments(ids, int(ids.max()) + 1 if len(ids) else 0)
    if logits.data.ndim != 1 or logits.shape[0] != len(segments):
        raise ShapeError(f"segment_softmax: logits {logits.shape} vs {len(segments)} segment ids")
    x = logits.data
    ex = np.exp(x - segments.max(x)[segments.ids])
    y = ex / segments.sum(ex)[segments.ids]

    def rule(g):
        return (y * (g - segments.sum(g * y)[segments.ids]),)

    return _record(y, "segment_softmax", (logits,), rule)


def softmax(logits):
    x = logits.data
    ex = np.exp(x - x.max())
    y = ex / ex.sum()
    return _record(y, "softmax", (logits,), lambda g: (y * (g - (g * y).sum()),))


# --------------------------------------------------------------- params

class ParamStore:
    """Named float64 parameters backed by one contiguous buffer.

    ``store[name]`` is a view into ``store.flat``; optimisers update ``flat``
    in place.
    """

    def __init__(self, seed=0):
        self.seed = seed
        self._slots = {}
        self.flat = np.empty(0)

    def add(self, name, value):
        if name in self._slots:
            raise ValueError(f"parameter {name!r} already registered")
        value = np.asarray(value, dtype=np.float64)
        offset = self.flat.size
        self.flat = np.concatenate([self.flat, value.ravel()])
        self._slots[name] = (offset, value.shape)

    def __getitem__(self, name):
        offset, shape = self._slots[name]
        return self.flat[offset:offset + math.prod(shape)].reshape(shape)

    def __contains__(self, name):
        return name in self._slots

    def __len__(self):
        return len(self._slots)

    def names(self):
        return list(self._slots)

    @property
    def size(self):
        return self.flat.size

    def leaves(self, requires_grad=True):
        """Fresh named leaf tensors viewing the current values."""
        return {name: Tensor(self[name], requires_grad=requires_grad, name=name) for name in self._slots}

    def flatten(self, grads):
        """Pack a name -> array map into a vector aligned with ``flat``; missing names are zero."""
        out = np.zeros_like(self.flat)
        for name, (offset, shape) in self._slots.items():
            g = grads.get(name)
            if g is not None:
                out[offset:offset + math.prod(shape)] = np.ravel(g)
        return out

    def copy(self):
        other = ParamStore(self.seed)
        other._slots = dict(self._slots)
        other.flat = self.flat.copy()
        return other

    def to_dict(self):
        return {name: {"shape": list(self[name].shape), "data": self[name].ravel().tolist()}
                for name in self._slots}

    @classmethod
    def from_dict(cls, tensors, seed=0):
        store = cls(seed)
        for name, spec in tensors.items():
            store.add(name, np.array(spec["data"], dtype=np.float64).reshape(spec["shape"]))
        return store

    def __eq__(self, other):
        return (isinstance(other, ParamStore) and self._slots == other._slots
                and np.array_equal(self.flat, other.flat))


def grad_check(f, store, eps=1e-5, samples_per_tensor=100, rng=None, atol=1e-6):
    """Largest relative error between tape gradients and central differences.

    ``f`` maps a name -> Tensor dict to a scalar Tensor and must be
    deterministic.  Tensors larger than ``samples_per_tensor`` elements are
    checked on a random subset of that many elements.  The relative error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, atol)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    with Tape() as tape:
        out = f(store.leaves())
    if tape.stochastic:
        raise UsageError("grad_check needs a deterministic function (dropout is active)")
    analytic = tape.backward(out, store)

    def value():
        return float(f(store.leaves(requires_grad=False)).data)

    worst = 0.0
    for name in store.names():
        view = store[name].reshape(-1)
        n = view.size
        picks = np.arange(n) if n <= samples_per_tensor else rng.choice(n, samples_per_tensor, replace=False)
        ga = np.reshape(analytic[name], -1)
        for i in picks:
            orig = view[i]
            view[i] = orig + eps
            up = value()
            view[i] = orig - eps
            down = value()
            view[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(ga[i] - numeric) / max(abs(ga[i]), abs(numeric), atol)
            worst = max(worst, err)
    return worst
