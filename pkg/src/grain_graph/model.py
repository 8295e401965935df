"""Heterogeneous graph attention regressor for grain graphs.

Each layer runs node-level attention separately on every edge type, then
fuses the per-edge-type embeddings of each destination node type with
path-level attention.  After ``K`` layers a small head maps every grain
embedding to a scalar and the prediction is the mean over grains.

Notes on choices the formulas leave open:

* messages aggregate the projected *neighbour* features ``z_j``;
* the output nonlinearity of node-level attention is LeakyReLU with the
  same slope as the attention logits;
* the path score averages ``q . tanh(W h + b)`` over all nodes of the type;
* the head is ``linear2(dropout(leaky(linear1(layer_norm(h)))))``.
"""

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import diffcore as dc
from .errors import FormatError, ShapeError
from .graph_build import EDGE_ENDPOINTS, EDGE_TYPES, NODE_TYPES

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    layers: int = 2
    hidden_dim: int = 32
    dropout_p: float = 0.1
    leaky_slope: float = 0.2
    head_hidden: int = 16
    seed: int = 0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.layers < 1 or self.hidden_dim < 1 or self.head_hidden < 1:
            raise ValueError("layers, hidden_dim and head_hidden must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if not self.leaky_slope > 0:
            raise ValueError("leaky_slope must be positive")


@dataclass
class EdgeView:
    """One edge type of a graph, with edges ordered by destination."""

    edge_type: str
    src_type: str
    dst_type: str
    src: np.ndarray
    dst: dc.Segments
    n_src: int
    n_dst: int
    src_segments: Optional[dc.Segments] = None
    mask: Optional[np.ndarray] = None

    @property
    def n_edges(self):
        return len(self.src)

    @property
    def present(self):
        return self.n_edges > 0


def split_by_edge_type(g):
    """Per-edge-type views of ``g`` (index arrays are shared, not copied, when already sorted)."""
    views = {}
    for t in EDGE_TYPES:
        st, dt = EDGE_ENDPOINTS[t]
        src, dst = g.edges[t]
        if len(dst) > 1 and np.any(dst[1:] < dst[:-1]):
            order = np.argsort(dst, kind="stable")
            src, dst = src[order], dst[order]
        views[t] = EdgeView(t, st, dt, src, dc.Segments(dst, g.node_count(dt)), g.node_count(st), g.node_count(dt),
                            dc.Segments(src, g.node_count(st)))
    return views


@dataclass
class PreparedGraph:
    graph: object
    features: dict
    views: dict
    grain_count: int

    @classmethod
    def from_graph(cls, g):
        feats = {t: dc.Tensor(g.features[t]) for t in NODE_TYPES}
        return cls(g, feats, split_by_edge_type(g), g.grain_count)


def _prepare(g):
    return g if isinstance(g, PreparedGraph) else PreparedGraph.from_graph(g)


def node_level_attention(view, h_src, h_dst, W_src, W_dst, a_src, a_dst, slope=0.2):
    """Attention-weighted neighbour messages for every destination node of one edge type.

    ``z = h W``; ``e_ij = leaky(a_dst . z_i + a_src . z_j)`` (the split form
    of ``a . [z_i || z_j]``); ``alpha`` is the softmax of ``e`` over each
    destination's in-edges; the output row ``i`` is
    ``leaky(sum_j alpha_ij z_j)``.  ``W_dst`` may be the same tensor as
    ``W_src``.  Destinations without in-edges get a zero row.

    Returns ``(messages, alpha)``.
    """
    if h_src.shape[1] != W_src.shape[0] or h_dst.shape[1] != W_dst.shape[0]:
        raise ShapeError(f"{view.edge_type}: feature widths {h_src.shape[1]}/{h_dst.shape[1]} "
                         f"do not match W {W_src.shape}/{W_dst.shape}")
    z_src = dc.matmul(h_src, W_src)
    z_dst = z_src if (W_dst is W_src and h_dst is h_src) else dc.matmul(h_dst, W_dst)
    score_src = dc.matmul(z_src, a_src)
    score_dst = dc.matmul(z_dst, a_dst)
    logits = dc.leaky_relu(dc.add(dc.gather_rows(score_dst, view.dst), dc.gather_rows(score_src, view.src)), slope)
    alpha = dc.segment_softmax(logits, view.dst)
    weighted = dc.scale_rows(dc.gather_rows(z_src, view.src), alpha)
    return dc.leaky_relu(dc.segment_sum(weighted, view.dst), slope), alpha


def path_level_attention(embeddings, q, W_sem, b):
    """Fuse per-edge-type embeddings of one node type.

    ``embeddings`` is a list of ``(n, d)`` tensors, one per present path.
    Path score ``s_p = mean_i q . tanh(h_i^p W + b)``; ``beta`` is the
    softmax of the scores and the result ``sum_p beta_p h^p``.  Returns
    ``(fused, beta)``.
    """
    if not embeddings:
        raise ValueError("path_level_attention needs at least one present path")
    if len(embeddings) == 1:
        return embeddings[0], dc.Tensor(np.ones(1))
    n = embeddings[0].shape[0]
    stacked = dc.concat(embeddings, axis=0)
    proj = dc.matmul(dc.tanh(dc.add_bias(dc.matmul(stacked, W_sem), b)), q)
    path_ids = dc.Segments(np.repeat(np.arange(len(embeddings)), n), len(embeddings))
    scores = dc.mul(dc.segment_sum(proj, path_ids), 1.0 / n)
    beta = dc.softmax(scores)
    return dc.weighted_sum(embeddings, beta), beta


def dense_node_attention(view, h_src, h_dst, W_src, W_dst, a_src, a_dst, slope=0.2):
    """Same result as :func:`node_level_attention` as one taped op over a dense mask.

    The attention logits live in an ``(n_dst, n_src)`` matrix with
    non-edges masked out, which replaces gathers and segment reductions by a
    handful of small dense products.  Returns ``(messages, alpha)`` where
    ``alpha`` is listed per edge in the view's edge order.
    """
    if h_src.shape[1] != W_src.shape[0] or h_dst.shape[1] != W_dst.shape[0]:
        raise ShapeError(f"{view.edge_type}: feature widths {h_src.shape[1]}/{h_dst.shape[1]} "
                         f"do not match W {W_src.shape}/{W_dst.shape}")
    tied = W_dst is W_src and h_dst is h_src
    if view.mask is None:
        view.mask = np.zeros((view.n_dst, view.n_src), dtype=bool)
        view.mask[view.dst.ids, view.src] = True
    mask = view.mask
    Hs, Ws, As, Ad = h_src.data, W_src.data, a_src.data, a_dst.data
    Zs = Hs @ Ws
    Hd, Wd = h_dst.data, W_dst.data
    Zd = Zs if tied else Hd @ Wd
    X = (Zd @ Ad)[:, None] + (Zs @ As)[None, :]
    pos_x = X > 0
    E = np.where(mask, np.where(pos_x, X, slope * X), -np.inf)
    row_max = E.max(axis=1, keepdims=True)
    row_max[~np.isfinite(row_max)] = 0.0
    A = np.exp(E - row_max)
    denom = A.sum(axis=1, keepdims=True)
    denom[denom == 0.0] = 1.0
    A /= denom
    M = A @ Zs
    pos_m = M > 0
    out = np.where(pos_m, M, slope * M)

    def rule(g):
        gM = np.where(pos_m, g, slope * g)
        gA = gM @ Zs.T
        gZs = A.T @ gM
        gX = A * (gA - (gA * A).sum(axis=1, keepdims=True))
        gX = np.where(pos_x, gX, slope * gX)
        g_sd = gX.sum(axis=1)
        g_ss = gX.sum(axis=0)
        gZs += np.outer(g_ss, As)
        gZd = np.outer(g_sd, Ad)
        g_as = Zs.T @ g_ss
        g_ad = Zd.T @ g_sd
        if tied:
            gZs += gZd
            return gZs @ Ws.T, Hs.T @ gZs, g_as, g_ad
        return gZs @ Ws.T, Hs.T @ gZs, g_as, g_ad, gZd @ Wd.T, Hd.T @ gZd

    inputs = (h_src, W_src, a_src, a_dst) if tied else (h_src, W_src, a_src, a_dst, h_dst, W_dst)
    messages = dc.record(out, "dense_node_attention", inputs, rule)
    alpha = dc.Tensor(A[view.dst.ids, view.src])
    return messages, alpha


def sparse_node_attention(view, h_src, h_dst, W_src, W_dst, a_src, a_dst, slope=0.2):
    """Same result as :func:`node_level_attention` as one taped op over the edge list."""
    if h_src.shape[1] != W_src.shape[0] or h_dst.shape[1] != W_dst.shape[0]:
        raise ShapeError(f"{view.edge_type}: feature widths {h_src.shape[1]}/{h_dst.shape[1]} "
                         f"do not match W {W_src.shape}/{W_dst.shape}")
    tied = W_dst is W_src and h_dst is h_src
    dst, src, by_src = view.dst, view.src, view.src_segments
    Hs, Ws, As, Ad = h_src.data, W_src.data, a_src.data, a_dst.data
    Hd, Wd = h_dst.data, W_dst.data
    Zs = Hs @ Ws
    Zd = Zs if tied else Hd @ Wd
    x = (Zd @ Ad)[dst.ids] + (Zs @ As)[src]
    pos_x = x > 0
    e = np.where(pos_x, x, slope * x)
    ex = np.exp(e - dst.max(e)[dst.ids])
    alpha = ex / dst.sum(ex)[dst.ids]
    Zs_edge = Zs[src]
    M = dst.sum(Zs_edge * alpha[:, None])
    pos_m = M > 0
    out = np.where(pos_m, M, slope * M)

    def rule(g):
        gM_edge = np.where(pos_m, g, slope * g)[dst.ids]
        g_alpha = (gM_edge * Zs_edge).sum(axis=1)
        ge = alpha * (g_alpha - dst.sum(g_alpha * alpha)[dst.ids])
        gx = np.where(pos_x, ge, slope * ge)
        g_sd = dst.sum(gx)
        g_ss = by_src.sum(gx)
        gZs = by_src.sum(gM_edge * alpha[:, None]) + np.outer(g_ss, As)
        gZd = np.outer(g_sd, Ad)
        g_as = Zs.T @ g_ss
        g_ad = Zd.T @ g_sd
        if tied:
            gZs += gZd
            return gZs @ Ws.T, Hs.T @ gZs, g_as, g_ad
        return gZs @ Ws.T, Hs.T @ gZs, g_as, g_ad, gZd @ Wd.T, Hd.T @ gZd

    inputs = (h_src, W_src, a_src, a_dst) if tied else (h_src, W_src, a_src, a_dst, h_dst, W_dst)
    return dc.record(out, "sparse_node_attention", inputs, rule), dc.Tensor(alpha)


def fused_path_attention(embeddings, q, W_sem, b):
    """Same result as :func:`path_level_attention` as one taped op."""
    if not embeddings:
        raise ValueError("path_level_attention needs at least one present path")
    if len(embeddings) == 1:
        return embeddings[0], dc.Tensor(np.ones(1))
    H = np.stack([e.data for e in embeddings])  # (P, n, d)
    n = H.shape[1]
    T = np.tanh(H @ W_sem.data + b.data)
    scores = (T @ q.data).mean(axis=1)
    ex = np.exp(scores - scores.max())
    beta = ex / ex.sum()
    out = np.tensordot(beta, H, axes=1)

    def rule(g):
        g_beta = np.einsum("pnd,nd->p", H, g)
        g_scores = beta * (g_beta - beta @ g_beta)
        g_T = (g_scores / n)[:, None, None] * q.data  # (P, 1, d) broadcast over nodes
        g_pre = g_T * (1.0 - T * T)
        g_H = beta[:, None, None] * g + g_pre @ W_sem.data.T
        g_q = np.einsum("p,pnd->d", g_scores / n, T)
        g_W = np.einsum("pnd,pne->de", H, g_pre)
        g_b = g_pre.sum(axis=(0, 1))
        return tuple(g_H) + (g_q, g_W, g_b)

    fused = dc.record(out, "fused_path_attention", tuple(embeddings) + (q, W_sem, b), rule)
    return fused, dc.Tensor(beta)


ATTENTION_ROUTES = {
    "sparse": sparse_node_attention,
    "dense": dense_node_attention,
    "reference": node_level_attention,
}


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def param_names(cfg):
    """Parameter names in registration order."""
    names = []
    for k in range(cfg.layers):
        for t in EDGE_TYPES:
            st, dt = EDGE_ENDPOINTS[t]
            names.append(f"l{k}.{t}.W_src")
            if st != dt:
                names.append(f"l{k}.{t}.W_dst")
            names += [f"l{k}.{t}.a_src", f"l{k}.{t}.a_dst"]
        for nt in NODE_TYPES:
            names += [f"l{k}.{nt}.W_sem", f"l{k}.{nt}.b", f"l{k}.{nt}.q"]
    names += ["head.ln_gain", "head.ln_shift", "head.W1", "head.b1", "head.W2", "head.b2"]
    return names


def init_params(cfg, input_dims, rng=None):
    """Glorot-uniform matrices and attention vectors, zero biases, unit layer-norm gain.

    ``input_dims`` maps node type to its input feature width.  The draw
    order is fixed, so the store is a pure function of ``cfg.seed`` (or of
    ``rng`` when given).
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    d, hh = cfg.hidden_dim, cfg.head_hidden
    store = dc.ParamStore(seed=cfg.seed)
    for k in range(cfg.layers):
        dims = {nt: (input_dims[nt] if k == 0 else d) for nt in NODE_TYPES}
        for t in EDGE_TYPES:
            st, dt = EDGE_ENDPOINTS[t]
            store.add(f"l{k}.{t}.W_src", _glorot(rng, dims[st], d, (dims[st], d)))
            if st != dt:
                store.add(f"l{k}.{t}.W_dst", _glorot(rng, dims[dt], d, (dims[dt], d)))
            store.add(f"l{k}.{t}.a_src", _glorot(rng, 2 * d, 1, (d,)))
            store.add(f"l{k}.{t}.a_dst", _glorot(rng, 2 * d, 1, (d,)))
        for nt in NODE_TYPES:
            store.add(f"l{k}.{nt}.W_sem", _glorot(rng, d, d, (d, d)))
            store.add(f"l{k}.{nt}.b", np.zeros(d))
            store.add(f"l{k}.{nt}.q", _glorot(rng, d, 1, (d,)))
    store.add("head.ln_gain", np.ones(d))
    store.add("head.ln_shift", np.zeros(d))
    store.add("head.W1", _glorot(rng, d, hh, (d, hh)))
    store.add("head.b1", np.zeros(hh))
    store.add("head.W2", _glorot(rng, hh, 1, (hh,)))
    store.add("head.b2", np.zeros(()))
    return store


def graph_input_dims(g):
    return {t: int(g.features[t].shape[1]) for t in NODE_TYPES}


def encode(pg, P, cfg, trace=None, route="sparse"):
    """Run the ``K`` attention layers; returns the final grain embeddings.

    In the last layer only views ending at grain nodes are evaluated, since
    attribute-node outputs of that layer never reach the readout.
    ``trace``, when a dict, collects ``alpha`` (with segment ids) and
    ``beta`` arrays keyed by ``(layer, type)``.  ``route`` picks the node
    attention implementation: ``sparse`` and ``dense`` are single fused ops,
    ``reference`` composes primitive ops (slow, used to cross-check).
    """
    h = dict(pg.features)
    for k in range(cfg.layers):
        last = k == cfg.layers - 1
        per_type = {nt: [] for nt in NODE_TYPES}
        for t in EDGE_TYPES:
            view = pg.views[t]
            if not view.present or (last and view.dst_type != "Grain"):
                continue
            W_src = P[f"l{k}.{t}.W_src"]
            W_dst = P.get(f"l{k}.{t}.W_dst", W_src)
            attend = ATTENTION_ROUTES[route]
            msg, alpha = attend(view, h[view.src_type], h[view.dst_type], W_src, W_dst,
                                P[f"l{k}.{t}.a_src"], P[f"l{k}.{t}.a_dst"], cfg.leaky_slope)
            per_type[view.dst_type].append(msg)
            if trace is not None:
                trace[("alpha", k, t)] = (alpha.data.copy(), view.dst.ids.copy())
        new_h = {}
        for nt in NODE_TYPES:
            if not per_type[nt]:
                continue
            fuse = path_level_attention if route == "reference" else fused_path_attention
            new_h[nt], beta = fuse(per_type[nt], P[f"l{k}.{nt}.q"], P[f"l{k}.{nt}.W_sem"], P[f"l{k}.{nt}.b"])
            if trace is not None:
                trace[("beta", k, nt)] = beta.data.copy()
        h = new_h
    return h["Grain"]


def head(h, P, cfg, train=False, rng=None):
    """Per-grain scalar outputs of the feature mapping network."""
    x = dc.add_bias(dc.mul_row(dc.layer_norm(h, cfg.ln_eps), P["head.ln_gain"]), P["head.ln_shift"])
    x = dc.leaky_relu(dc.add_bias(dc.matmul(x, P["head.W1"]), P["head.b1"]), cfg.leaky_slope)
    x = dc.dropout(x, cfg.dropout_p, train, rng)
    return dc.add(dc.matmul(x, P["head.W2"]), P["head.b2"])


def forward(g, P, cfg, mode="eval", rng=None, target_shift=0.0, target_scale=1.0, trace=None, route="sparse"):
    """Predicted property of graph ``g`` as a scalar tensor.

    ``P`` maps parameter names to tensors (``store.leaves()`` while
    training).  The mean head output over grains is mapped back to property
    units with ``target_shift + target_scale * mean``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    pg = _prepare(g)
    dims = {t: pg.features[t].shape[1] for t in NODE_TYPES}
    for nt, width in dims.items():
        key = f"l0.{_first_edge_from(nt)}.W_src"
        if P[key].shape[0] != width:
            raise ShapeError(f"{nt} features have width {width}, parameters expect {P[key].shape[0]}")
    h = encode(pg, P, cfg, trace, route)
    out = dc.reduce_mean(head(h, P, cfg, train=(mode == "train"), rng=rng))
    if target_scale != 1.0:
        out = dc.mul(out, target_scale)
    if target_shift != 0.0:
        out = dc.add(out, target_shift)
    return out


def _first_edge_from(node_type):
    return next(t for t in EDGE_TYPES if EDGE_ENDPOINTS[t][0] == node_type)


@dataclass
class HeteroGAT:
    """Configuration, trained parameters and target scaling bundled together."""

    cfg: ModelConfig
    params: dc.ParamStore
    input_dims: dict
    target_shift: float = 0.0
    target_scale: float = 1.0
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg, input_dims, target_shift=0.0, target_scale=1.0):
        return cls(cfg, init_params(cfg, input_dims), dict(input_dims), target_shift, target_scale)

    def forward(self, g, P=None, mode="eval", rng=None, trace=None):
        P = P if P is not None else self.params.leaves(requires_grad=False)
        return forward(g, P, self.cfg, mode, rng, self.target_shift, self.target_scale, trace)

    def predict(self, g):
        return float(self.forward(g).data)

    def to_json(self):
        doc = {
            "version": CHECKPOINT_VERSION,
            "model_cfg": asdict(self.cfg),
            "input_dims": self.input_dims,
            "target_shift": self.target_shift,
            "target_scale": self.target_scale,
            "meta": self.meta,
            "tensors": self.params.to_dict(),
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"unknown checkpoint version {doc.get('version')!r}")
        cfg = ModelConfig(**doc["model_cfg"])
        # json key order is alphabetical; restore the canonical flat layout
        tensors = doc["tensors"]
        order = [n for n in param_names(cfg) if n in tensors] + sorted(set(tensors) - set(param_names(cfg)))
        store = dc.ParamStore.from_dict({n: tensors[n] for n in order}, seed=cfg.seed)
        return cls(cfg, store, doc["input_dims"], doc["target_shift"], doc["target_scale"], doc.get("meta", {}))
