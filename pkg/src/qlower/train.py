"""Quantization-aware training of fully-connected networks.

The forward pass uses fake-quantized weights and activations; the backward
pass uses the straight-through rules from :mod:`qlower.pact`. Clip bounds
stay frozen at their calibrated values.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, PassOrderError, UnsupportedOpError
from .graph import FQ, Graph, Op
from .pact import (
    ActQuantParams,
    WeightQuantParams,
    act_params,
    fq_act_forward,
    fq_weight_forward,
    ste_act_backward,
    ste_weight_backward,
    weight_params,
)
from .tensor import as_real, read_blob, write_blob

log = logging.getLogger(__name__)


@dataclass
class Dense:
    node: str
    weight: np.ndarray
    bias: np.ndarray
    quant: WeightQuantParams


@dataclass
class Act:
    node: str
    quant: ActQuantParams


def mlp_layers(g: Graph) -> list[Dense | Act]:
    """The graph's FullyConnected and Activation nodes in order; rejects anything
    that is not a single chain of those."""
    if g.representation != FQ:
        raise PassOrderError(f"training needs a FakeQuantized graph, got {g.representation.value}")
    layers: list[Dense | Act] = []
    prev = None
    for n in g:
        if n.op not in (Op.INPUT, Op.FULLY_CONNECTED, Op.ACTIVATION, Op.OUTPUT):
            raise UnsupportedOpError(f"the trainer handles fully-connected networks; found {n.op.value}")
        if prev is not None and n.inputs != (prev,):
            raise UnsupportedOpError("the trainer handles a single chain of layers")
        prev = n.id
        if n.op == Op.FULLY_CONNECTED:
            w = np.array(n.attrs["weight"], dtype=np.float64)
            b = n.attrs.get("bias")
            b = np.zeros(w.shape[0]) if b is None else np.array(b, dtype=np.float64)
            layers.append(Dense(n.id, w, b, weight_params(n)))
        elif n.op == Op.ACTIVATION:
            layers.append(Act(n.id, act_params(n)))
    return layers


def with_layers(g: Graph, layers) -> Graph:
    nodes = dict(g.nodes)
    for layer in layers:
        if isinstance(layer, Dense):
            nodes[layer.node] = nodes[layer.node].with_attrs(weight=as_real(layer.weight),
                                                             bias=as_real(layer.bias))
    return g.evolve(nodes.values())


def _clip(u, lo, hi):
    return np.clip(u, lo, hi)


def forward(layers, x: np.ndarray, anchors: dict | None = None):
    """Batched forward pass. Returns ``(logits, cache)``.

    With ``anchors`` (the cache of an earlier pass) every quantizer ``q(u)`` is
    replaced by ``q(u0) + clip(u) - clip(u0)``: the straight-through surrogate,
    whose value at ``u0`` is the quantized forward and whose slope is the clip
    indicator.
    """
    cache: dict = {"inputs": []}
    h = x
    for i, layer in enumerate(layers):
        cache["inputs"].append(h)
        if isinstance(layer, Dense):
            p = layer.quant
            wq = fq_weight_forward(layer.weight, p)
            if anchors is not None:
                w0 = anchors[("w", i)]
                wq = anchors[("wq", i)] + _clip(layer.weight, p.alpha_w, p.beta_w) - _clip(w0, p.alpha_w, p.beta_w)
            cache[("w", i)] = layer.weight
            cache[("wq", i)] = wq
            h = h @ wq.T + layer.bias
        else:
            p = layer.quant
            y = fq_act_forward(h, p)
            if anchors is not None:
                u0 = anchors[("u", i)]
                y = anchors[("y", i)] + _clip(h, 0.0, p.beta_y) - _clip(u0, 0.0, p.beta_y)
            cache[("u", i)] = h
            cache[("y", i)] = y
            h = y
    return h, cache


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    prob = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = -np.mean(np.log(prob[np.arange(n), labels]))
    grad = prob.copy()
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def loss_and_grads(layers, x: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its straight-through gradients ``{layer index: (dW, db)}``."""
    logits, cache = forward(layers, x)
    loss, delta = softmax_xent(logits, labels)
    grads = {}
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if isinstance(layer, Dense):
            h_in = cache["inputs"][i]
            d_wq = delta.T @ h_in
            grads[i] = (ste_weight_backward(d_wq, layer.weight, layer.quant), delta.sum(axis=0))
            delta = delta @ cache[("wq", i)]
        else:
            delta = ste_act_backward(delta, cache[("u", i)], layer.quant)
    return loss, grads


def accuracy(layers, x, labels) -> float:
    logits, _ = forward(layers, x)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass
class EpochLog:
    epoch: int
    loss: float
    accuracy: float


def train(g: Graph, xs, labels, epochs: int = 200, lr: float = 0.5, batch: int = 32,
          seed: int = 0) -> tuple[Graph, list[EpochLog]]:
    """Minibatch SGD; the sample order is drawn from ``seed``."""
    layers = mlp_layers(g)
    x = np.stack([np.asarray(v, dtype=np.float64).reshape(-1) for v in xs])
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"{x.shape[0]} samples but {y.shape[0]} labels")
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch):
            idx = order[start:start + batch]
            _, grads = loss_and_grads(layers, x[idx], y[idx])
            if lr == 0:
                continue
            for i, (dw, db) in grads.items():
                layers[i].weight = layers[i].weight - lr * dw
                layers[i].bias = layers[i].bias - lr * db
        loss, _ = softmax_xent(forward(layers, x)[0], y)
        history.append(EpochLog(epoch, loss, accuracy(layers, x, y)))
        log.debug("epoch %d loss %.4f acc %.3f", epoch, loss, history[-1].accuracy)
    return with_layers(g, layers), history


# -- datasets -----------------------------------------------------------------

def two_clusters(n: int = 200, seed: int = 0, spread: float = 0.12):
    """Two Gaussian clusters in the unit square, labels 0 and 1."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    centres = np.array([[0.3, 0.65], [0.7, 0.35]])
    pts = centres[labels] + rng.normal(0.0, spread, (n, 2))
    return [as_real(p) for p in np.clip(pts, 0.0, 0.999)], labels.tolist()


def write_dataset(root, xs, labels) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, x in enumerate(xs):
        write_blob(root / f"{i:05d}.qlt", x)
    (root / "labels.txt").write_text("".join(f"{int(v)}\n" for v in labels))
    return root


def read_blobs(root) -> list[np.ndarray]:
    return [read_blob(p) for p in sorted(Path(root).glob("*.qlt"))]


def read_dataset(root):
    root = Path(root)
    xs = read_blobs(root)
    path = root / "labels.txt"
    labels = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            labels.append(int(line))
        except ValueError:
            raise ParseError(f"{path}: not an integer label: {line!r}", line=lineno) from None
    if len(labels) != len(xs):
        raise ParseError(f"{path}: {len(labels)} labels for {len(xs)} samples")
    return xs, labels
