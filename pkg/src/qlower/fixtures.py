"""Deterministic desk-scale fixture networks.

``python -m qlower.fixtures OUT_DIR`` regenerates the shipped fixtures:
``lenet_tiny`` (an FP manifest plus calibration inputs) and ``mlp2`` (a
FakeQuantized MLP plus a labelled dataset).
"""
from __future__ import annotations

import argparse
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .build import GraphBuilder
from .graph import Graph, save
from .tensor import as_real, write_blob

LENET_INPUT = (1, 16, 16)
N_CLASSES = 10


def _he(rng, shape, zero_mean=False):
    fan_in = int(np.prod(shape[1:]))
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    if zero_mean:
        # edge-like filters respond to structure, not overall brightness
        w = w - w.reshape(shape[0], -1).mean(axis=1).reshape((-1,) + (1,) * (len(shape) - 1))
    return w


def _bn_stats(rng, c):
    return dict(gamma=rng.uniform(0.8, 1.25, c), sigma=rng.uniform(0.5, 1.5, c),
                mu=rng.normal(0.0, 0.1, c), beta=rng.normal(0.1, 0.05, c))


def lenet_tiny(seed: int = 0) -> Graph:
    """Conv-BN-ReLU-MaxPool, Conv-BN-ReLU-AvgPool, FC over 10 classes."""
    rng = np.random.default_rng(seed)
    b = GraphBuilder(LENET_INPUT)
    x = b.conv(b.input, _he(rng, (4, 1, 3, 3), zero_mean=True), padding=1, node_id="conv1")
    x = b.bn(x, **_bn_stats(rng, 4), node_id="bn1")
    x = b.act(x, node_id="relu1")
    x = b.maxpool(x, 2, node_id="pool1")
    x = b.conv(x, _he(rng, (8, 4, 3, 3), zero_mean=True), padding=1, node_id="conv2")
    x = b.bn(x, **_bn_stats(rng, 8), node_id="bn2")
    x = b.act(x, node_id="relu2")
    x = b.avgpool(x, 2, node_id="pool2")
    # placeholder weights; _fit_classifier replaces them
    x = b.fc(x, np.zeros((N_CLASSES, 128)), np.zeros(N_CLASSES), node_id="fc")
    b.output(x)
    g = b.build()
    xs, ys = labelled_inputs(500, seed + 100, proto_seed=seed)
    return _fit_classifier(g, xs, ys)


def _fit_classifier(g: Graph, xs, ys) -> Graph:
    """Nearest-centroid classifier on the pooled features: ``w_c = mu_c``,
    ``b_c = -|mu_c|^2/2``. Stands in for a trained last layer, so decisions
    carry real margins instead of sitting near ties."""
    from .interpreter import run

    feats = np.array([run(g, x)[1].outputs["pool2"].reshape(-1) for x in xs])
    ys = np.asarray(ys)
    mu = np.array([feats[ys == c].mean(axis=0) for c in range(N_CLASSES)])
    nodes = dict(g.nodes)
    nodes["fc"] = g.nodes["fc"].with_attrs(weight=as_real(mu),
                                           bias=as_real(-0.5 * np.sum(mu * mu, axis=1)))
    return g.evolve(nodes.values())


def prototypes(seed: int = 0, shape=LENET_INPUT) -> np.ndarray:
    """One coarse 4x4 pattern per class."""
    rng = np.random.default_rng([seed, 7])
    return rng.uniform(0.0, 1.0, (N_CLASSES, shape[0], 4, 4))


def labelled_inputs(n: int, seed: int, proto_seed: int = 0, shape=LENET_INPUT):
    """Images in ``[0, 1)``: a class prototype blended with a random coarse
    pattern, pixel noise and random contrast. Returns ``(images, labels)``."""
    rng = np.random.default_rng(seed)
    protos = prototypes(proto_seed, shape)
    c, h, w = shape
    up = np.ones((1, h // 4, w // 4))
    xs, ys = [], []
    for _ in range(n):
        y = int(rng.integers(N_CLASSES))
        coarse = 0.7 * protos[y] + 0.3 * rng.uniform(0.0, 1.0, (c, 4, 4))
        img = 0.85 * np.kron(coarse, up) + 0.15 * rng.uniform(0.0, 1.0, shape)
        lo = rng.uniform(0.0, 0.2)
        img = lo + (rng.uniform(0.7, 1.0) - lo) * img
        xs.append(as_real(np.clip(img, 0.0, 0.999)))
        ys.append(y)
    return xs, ys


def random_inputs(n: int, seed: int, shape=LENET_INPUT) -> list[np.ndarray]:
    return labelled_inputs(n, seed, shape=shape)[0]


def mlp(sizes=(2, 16, 2), seed: int = 0) -> Graph:
    """FullyConnected/Activation chain; no activation after the last layer."""
    rng = np.random.default_rng(seed)
    b = GraphBuilder((sizes[0],))
    x = b.input
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:]), 1):
        x = b.fc(x, _he(rng, (n_out, n_in)), np.zeros(n_out), node_id=f"fc{i}")
        if i < len(sizes) - 1:
            x = b.act(x, node_id=f"relu{i}")
    b.output(x)
    return b.build()


@dataclass
class RandomNet:
    """A randomized FullPrecision graph and which BN nodes to threshold-merge."""
    graph: Graph
    threshold_acts: frozenset
    kinds: tuple


def random_graph(seed: int, input_shape=(2, 16, 16), max_channels: int = 8) -> RandomNet:
    """2 to 4 layers drawn from conv+BN+act, conv+act and two-branch residual
    blocks, with optional max/avg pooling, closed by a small classifier."""
    rng = np.random.default_rng(seed)
    b = GraphBuilder(input_shape)
    c, h = input_shape[0], input_shape[1]
    x = b.input
    merge, kinds = set(), []

    def conv_bn_act(x, c_in, c_out):
        k = int(rng.choice([1, 3]))
        y = b.conv(x, _he(rng, (c_out, c_in, k, k)), rng.normal(0, 0.1, c_out),
                   padding=k // 2)
        y = b.bn(y, **_bn_stats(rng, c_out))
        a = b.act(y)
        if rng.random() < 0.5:
            merge.add(a)
        return a

    n_layers = int(rng.integers(2, 5))
    after_act = False  # branches may only start at an activation
    for i in range(n_layers):
        kind = "residual" if (after_act and rng.random() < 0.45) else str(
            rng.choice(["conv_bn_act", "conv_act"]))
        c_out = int(rng.integers(2, max_channels + 1))
        if kind == "conv_bn_act":
            x = conv_bn_act(x, c, c_out)
            c = c_out
        elif kind == "conv_act":
            x = b.conv(x, _he(rng, (c_out, c, 3, 3)), rng.normal(0, 0.1, c_out), padding=1)
            x = b.act(x)
            c = c_out
        else:
            branch = conv_bn_act(x, c, c)
            x = b.act(b.add(branch, x) if rng.random() < 0.5 else b.add(x, branch))
        kinds.append(kind)
        after_act = True
        if h >= 4 and rng.random() < 0.5:
            after_act = False
            pool = str(rng.choice(["max", "avg"]))
            x = b.maxpool(x, 2) if pool == "max" else b.avgpool(x, 2)
            kinds.append(pool + "pool")
            h //= 2
    n_cls = int(rng.integers(2, 6))
    x = b.fc(x, _he(rng, (n_cls, c * h * h)), rng.normal(0, 0.1, n_cls))
    b.output(x)
    return RandomNet(b.build(), frozenset(merge), tuple(kinds))


def write_lenet_tiny(root, seed: int = 0, n_calib: int = 32) -> Path:
    root = Path(root)
    save(lenet_tiny(seed), root / "model" / "manifest.json")
    calib = root / "calib"
    calib.mkdir(parents=True, exist_ok=True)
    for i, x in enumerate(random_inputs(n_calib, seed + 1)):
        write_blob(calib / f"{i:04d}.qlt", x)
    return root


def write_mlp2(root, seed: int = 0, bits: int = 4) -> Path:
    """A calibrated FakeQuantized 2-16-2 MLP plus its two-cluster dataset."""
    from .pact import calibrate, to_fakequantized
    from .train import two_clusters, write_dataset

    root = Path(root)
    xs, ys = two_clusters(200, seed)
    write_dataset(root / "data", xs, ys)
    g = to_fakequantized(calibrate(mlp(seed=seed), xs), bits, bits)
    save(g, root / "model" / "manifest.json")
    return root


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description="Regenerate the shipped fixtures.")
    ap.add_argument("out", type=Path, help="fixtures directory")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    write_lenet_tiny(args.out / "lenet_tiny", args.seed)
    write_mlp2(args.out / "mlp2", args.seed)


if __name__ == "__main__":
    main()
