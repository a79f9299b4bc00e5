"""Dynamic-graph edge-convolution descriptor network and triplet pretraining.

The network maps an ``(N, 3)`` point set to ``(N, descriptor_dim)`` unit-norm
descriptors. Each edge convolution rebuilds its kNN graph in the feature
space it receives; the outputs of all edge convolutions are concatenated
before a fully connected head.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .pointcloud import Graph, knn_from_sq_dists, pairwise_sq_dists

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2


@dataclass
class Layer:
    kind: str  # "edge_conv" or "fully_connected"
    weight: np.ndarray  # (out, in); edge_conv takes in = 2 * feature width
    bias: np.ndarray  # (out,)


@dataclass
class NetworkParams:
    k: int
    layers: list
    descriptor_dim: int = 16
    dynamic: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        width, concat_width, in_head = 3, 0, False
        for i, layer in enumerate(self.layers):
            rows, cols = layer.weight.shape
            if layer.bias.shape != (rows,):
                raise ValueError(f"layer {i}: bias shape {layer.bias.shape} != ({rows},)")
            if layer.kind == "edge_conv":
                if in_head:
                    raise ValueError(f"layer {i}: edge_conv after the fully connected head")
                if cols != 2 * width:
                    raise ValueError(f"layer {i}: edge_conv expects {2 * width} inputs, has {cols}")
                width = rows
                concat_width += rows
            elif layer.kind == "fully_connected":
                # the first head layer consumes the concatenation of all edge_conv outputs
                expected = width if in_head else (concat_width or 3)
                if cols != expected:
                    raise ValueError(f"layer {i}: fully_connected expects {expected} inputs, has {cols}")
                in_head = True
                width = rows
            else:
                raise ValueError(f"layer {i}: unknown kind {layer.kind!r}")
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise ValueError(f"layer {i}: non-finite parameters")
        if not in_head or self.layers[-1].kind != "fully_connected":
            raise ValueError("network must end with a fully_connected layer")
        if width != self.descriptor_dim:
            raise ValueError(f"final width {width} != descriptor_dim {self.descriptor_dim}")

    def arrays(self):
        """Flat list ``[W0, b0, W1, b1, ...]``."""
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def with_arrays(self, arrays):
        layers = [Layer(l.kind, np.array(arrays[2 * i], dtype=np.float64),
                        np.array(arrays[2 * i + 1], dtype=np.float64))
                  for i, l in enumerate(self.layers)]
        return NetworkParams(self.k, layers, self.descriptor_dim, self.dynamic)

    @property
    def min_points(self):
        return self.k + 1


def init_params(seed=0, k=20, conv_widths=(32, 64, 128), head_widths=(128,),
                descriptor_dim=16, dynamic=True):
    """Seeded Glorot-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)

    def glorot(rows, cols):
        bound = np.sqrt(6.0 / (rows + cols))
        return rng.uniform(-bound, bound, size=(rows, cols))

    layers, width = [], 3
    for w in conv_widths:
        layers.append(Layer("edge_conv", glorot(w, 2 * width), np.zeros(w)))
        width = w
    width = int(sum(conv_widths))
    for w in (*head_widths, descriptor_dim):
        layers.append(Layer("fully_connected", glorot(w, width), np.zeros(w)))
        width = w
    return NetworkParams(k, layers, descriptor_dim, dynamic)


def save_params(params, path):
    doc = {"k": params.k, "descriptor_dim": params.descriptor_dim, "layers": [
        {"kind": l.kind, "rows": int(l.weight.shape[0]), "cols": int(l.weight.shape[1]),
         "weight": l.weight.ravel().tolist(), "bias": l.bias.tolist()}
        for l in params.layers]}
    Path(path).write_text(json.dumps(doc))


def load_params(path, dynamic=True):
    doc = json.loads(Path(path).read_text())
    layers = []
    for entry in doc["layers"]:
        weight = np.array(entry["weight"], dtype=np.float64).reshape(entry["rows"], entry["cols"])
        layers.append(Layer(entry["kind"], weight, np.array(entry["bias"], dtype=np.float64)))
    return NetworkParams(int(doc["k"]), layers, int(doc["descriptor_dim"]), dynamic)


# -- forward pass -------------------------------------------------------------

def edge_conv_forward(features, graph, weight, bias):
    """Edge convolution with max aggregation.

    ``out_i = max_j leaky_relu(weight @ [h_i, h_j - h_i] + bias)`` over the
    neighbours ``j`` of ``i``. Inputs may be tape tensors.
    """
    F = ad.value_of(features).shape[1]
    rows, cols = ad.value_of(weight).shape
    if cols != 2 * F or ad.value_of(bias).shape != (rows,):
        raise ValueError(f"edge_conv shape mismatch: features width {F}, weight {rows}x{cols}")
    if len(graph) != len(ad.value_of(features)):
        raise ValueError("graph and features disagree on the number of nodes")
    w_self = weight[:, :F]
    w_edge = weight[:, F:]
    # W [h_i, h_j - h_i] = (W_self - W_edge) h_i + W_edge h_j
    centre = features @ (w_self - w_edge).T + bias
    neighbour = features @ w_edge.T
    pre = ad.reshape(centre, (-1, 1, rows)) + neighbour[graph.neighbors]
    return ad.max_reduce(ad.leaky_relu(pre, LEAKY_SLOPE), axis=1)


def feature_graph(features, k):
    h = ad.value_of(features)
    if h.shape[1] <= 3:
        return knn_from_sq_dists(pairwise_sq_dists(h, h), k)
    # Gram-matrix distances for wide features; exact differences cost O(N^2 F) memory traffic
    sq = (h * h).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (h @ h.T), 0.0)
    return knn_from_sq_dists(d2, k)


def network_forward(points, params, arrays=None):
    """Descriptors for ``points``; ``arrays`` optionally replaces the weights
    (e.g. with tape variables) in ``params.arrays()`` order."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < params.min_points:
        raise ValueError(f"need at least {params.min_points} points for k={params.k}, got {len(points)}")
    if arrays is None:
        arrays = params.arrays()
    h = points
    coord_graph = None
    conv_outputs = []
    x = None
    for i, layer in enumerate(params.layers):
        W, b = arrays[2 * i], arrays[2 * i + 1]
        if layer.kind == "edge_conv":
            if params.dynamic or coord_graph is None:
                graph = feature_graph(h, params.k)
                if coord_graph is None:
                    coord_graph = graph
            else:
                graph = coord_graph
            h = edge_conv_forward(h, graph, W, b)
            conv_outputs.append(h)
        else:
            if x is None:
                x = ad.concat(conv_outputs, axis=1) if conv_outputs else h
            x = x @ ad.transpose(W) + b
            if i < len(params.layers) - 1:
                x = ad.leaky_relu(x, LEAKY_SLOPE)
    return ad.l2_normalize(x, axis=1)


def descriptor_forward(points, params):
    """Unit-norm descriptors as a plain ``(N, descriptor_dim)`` array."""
    return ad.value_of(network_forward(points, params))


# -- metric learning ----------------------------------------------------------

def triplet_loss(anchor, positive, negative, margin=0.2):
    """Mean hinge ``max(0, |a-p|^2 - |a-n|^2 + margin)`` over rows."""
    n = len(ad.value_of(anchor))
    if len(ad.value_of(positive)) != n or len(ad.value_of(negative)) != n:
        raise ValueError("triplet inputs must have equal row counts")
    dp = ((anchor - positive) ** 2).sum(axis=1)
    dn = ((anchor - negative) ** 2).sum(axis=1)
    return ad.mean(ad.maximum(dp - dn + margin, 0.0))


@dataclass
class TrainingCase:
    """Point sets plus index pairs ``fixed[fixed_idx[i]] <-> moving[moving_idx[i]]``."""

    fixed: np.ndarray
    moving: np.ndarray
    fixed_idx: np.ndarray
    moving_idx: np.ndarray

    def __post_init__(self):
        self.fixed_idx = np.asarray(self.fixed_idx, dtype=np.int64)
        self.moving_idx = np.asarray(self.moving_idx, dtype=np.int64)
        if len(self.fixed_idx) != len(self.moving_idx):
            raise ValueError("correspondence index lists differ in length")
        if len(self.fixed_idx) < 2:
            raise ValueError("a training case needs at least 2 correspondence pairs")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 200
    margin: float = 0.2
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")


class Adam:
    def __init__(self, arrays, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads):
        self.t += 1
        b1, b2 = self.betas
        out = []
        for i, (a, g) in enumerate(zip(arrays, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            out.append(a - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


def derangement(n, rng):
    """Seeded permutation without fixed points (identity only when n == 1)."""
    if n < 2:
        return np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def case_triplet_loss(case, params, arrays, negatives, margin):
    df = network_forward(case.fixed, params, arrays)
    dm = network_forward(case.moving, params, arrays)
    anchor = df[case.fixed_idx]
    positive = dm[case.moving_idx]
    negative = dm[case.moving_idx[negatives]]
    return triplet_loss(anchor, positive, negative, margin)


def train_triplet(cases, init, cfg):
    """Adam on the triplet loss; negatives come from a fresh seeded derangement
    of the moving-side correspondences every epoch. Per-epoch mean losses are
    appended to ``cfg.history``."""
    if not cases:
        raise ValueError("no training cases")
    rng = np.random.default_rng(cfg.seed)
    arrays = [a.copy() for a in init.arrays()]
    opt = Adam(arrays, cfg.lr, cfg.betas, cfg.eps)
    for epoch in range(cfg.epochs):
        losses = []
        for case in cases:
            negatives = derangement(len(case.moving_idx), rng)
            tape = [ad.variable(a) for a in arrays]
            loss = case_triplet_loss(case, init, tape, negatives, cfg.margin)
            grads = ad.grad(loss, tape)
            arrays = opt.step(arrays, grads)
            losses.append(float(ad.value_of(loss)))
        cfg.history.append(float(np.mean(losses)))
        if epoch % 25 == 0:
            log.debug("epoch %d triplet loss %.5f", epoch, cfg.history[-1])
    return init.with_arrays(arrays)


def triplet_loss_on(cases, params, margin=0.2, seed=0):
    """Triplet loss averaged over cases, with deterministic negatives."""
    rng = np.random.default_rng(seed)
    vals = [float(ad.value_of(case_triplet_loss(
        c, params, None, derangement(len(c.moving_idx), rng), margin))) for c in cases]
    return float(np.mean(vals))


# -- gradient verification ----------------------------------------------------

def gradient_check(loss_fn, arrays, step=1e-5, entries=None):
    """Largest relative disagreement between tape and central-difference gradients.

    ``loss_fn`` maps a list of arrays or tape tensors to a scalar. ``entries``
    optionally restricts each array to a list of flat indices. The error of an
    array is ``max|g_tape - g_fd| / max(max|g_tape|, 1e-8)``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tape = [ad.variable(a) for a in arrays]
    analytic = ad.grad(loss_fn(tape), tape)
    worst = 0.0
    for i, a in enumerate(arrays):
        if not np.all(np.isfinite(analytic[i])):
            raise FloatingPointError(f"non-finite gradient for input {i}")
        idx = range(a.size) if entries is None else entries[i]
        diffs = []
        for j in idx:
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i].flat[j] += step
            minus[i].flat[j] -= step
            fd = (float(ad.value_of(loss_fn(plus))) - float(ad.value_of(loss_fn(minus)))) / (2 * step)
            diffs.append(abs(analytic[i].flat[j] - fd))
        if diffs:
            worst = max(worst, max(diffs) / max(np.abs(analytic[i]).max(), 1e-8))
    return worst
