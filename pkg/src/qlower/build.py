"""Small helper for assembling graphs in code."""
from __future__ import annotations

import numpy as np

from .graph import Graph, Node, Op
from .tensor import as_real


class GraphBuilder:
    """Append-only graph assembly; each method returns the new node's id.

    >>> b = GraphBuilder((1, 4, 4))
    >>> x = b.conv(b.input, np.ones((2, 1, 3, 3)), padding=1)
    >>> b.output(b.act(x))
    'output'
    """

    def __init__(self, input_shape, input_id: str = "input"):
        self._nodes: list[Node] = []
        self._count: dict[str, int] = {}
        self.input = self._add(Op.INPUT, (), dict(shape=list(input_shape)), input_id)

    def _add(self, op: Op, inputs, attrs, node_id=None) -> str:
        if node_id is None:
            stem = op.value.lower()
            self._count[stem] = self._count.get(stem, 0) + 1
            node_id = f"{stem}{self._count[stem]}"
        self._nodes.append(Node(node_id, op, tuple(inputs), attrs))
        return node_id

    def conv(self, x, weight, bias=None, stride=1, padding=0, node_id=None) -> str:
        attrs = dict(weight=as_real(weight), stride=stride, padding=padding)
        if bias is not None:
            attrs["bias"] = as_real(bias)
        return self._add(Op.CONV2D, (x,), attrs, node_id)

    def fc(self, x, weight, bias=None, node_id=None) -> str:
        attrs = dict(weight=as_real(weight))
        if bias is not None:
            attrs["bias"] = as_real(bias)
        return self._add(Op.FULLY_CONNECTED, (x,), attrs, node_id)

    def bn(self, x, gamma, sigma, mu, beta, node_id=None) -> str:
        attrs = {k: as_real(np.atleast_1d(v)) for k, v in
                 dict(gamma=gamma, sigma=sigma, mu=mu, beta=beta).items()}
        return self._add(Op.BATCH_NORM, (x,), attrs, node_id)

    def act(self, x, node_id=None, **attrs) -> str:
        return self._add(Op.ACTIVATION, (x,), attrs, node_id)

    def add(self, *xs, node_id=None) -> str:
        return self._add(Op.ADD, xs, {}, node_id)

    def maxpool(self, x, kernel=2, stride=None, node_id=None) -> str:
        attrs = dict(kernel=kernel)
        if stride is not None:
            attrs["stride"] = stride
        return self._add(Op.MAX_POOL, (x,), attrs, node_id)

    def avgpool(self, x, kernel=2, stride=None, node_id=None) -> str:
        attrs = dict(kernel=kernel)
        if stride is not None:
            attrs["stride"] = stride
        return self._add(Op.AVG_POOL, (x,), attrs, node_id)

    def output(self, x, node_id: str = "output") -> str:
        return self._add(Op.OUTPUT, (x,), {}, node_id)

    def build(self) -> Graph:
        return Graph.from_nodes(self._nodes)
