import json

import numpy as np
import pytest

from qlower.build import GraphBuilder
from qlower.errors import KindMismatchError, MissingBlobError, NonCanonicalError, ParseError
from qlower.fixtures import lenet_tiny
from qlower.graph import ID, Graph, Node, Op, load, save, segment_layers, validate
from qlower.tensor import as_real


def chain():
    b = GraphBuilder((1, 4, 4))
    x = b.conv(b.input, np.ones((2, 1, 3, 3)), padding=1, node_id="conv")
    x = b.bn(x, [1.0, 1.0], [1.0, 1.0], [0.0, 0.0], [0.0, 0.0], node_id="bn")
    b.output(b.act(x, node_id="act"))
    return b.build()


def rules(g):
    return [(v.rule, v.node) for v in validate(g)]


class TestValidate:
    def test_canonical_chain(self):
        assert validate(chain()) == []

    def test_branch_from_conv(self):
        b = GraphBuilder((1, 4, 4))
        c = b.conv(b.input, np.ones((1, 1, 1, 1)), node_id="conv")
        x = b.add(b.act(c), b.act(c))
        b.output(x)
        assert ("BranchFromNonActivation", "conv") in rules(b.build())

    def test_cycle(self):
        g = Graph.from_nodes([
            Node("in", Op.INPUT),
            Node("a", Op.ADD, ("in", "b")),
            Node("b", Op.ACTIVATION, ("a",)),
            Node("out", Op.OUTPUT, ("b",)),
        ])
        assert ("CycleDetected", None) in rules(g)

    def test_nonpositive_gamma(self):
        g = chain()
        nodes = dict(g.nodes, bn=g["bn"].with_attrs(gamma=as_real([1.0, 0.0])))
        assert ("NonPositiveBnParam", "bn") in rules(g.evolve(nodes.values()))


class TestSegmentLayers:
    def test_two_layers(self):
        b = GraphBuilder((1, 4, 4))
        x = b.conv(b.input, np.ones((1, 1, 1, 1)), node_id="c1")
        x = b.act(b.bn(x, 1.0, 1.0, 0.0, 0.0, node_id="bn1"), node_id="a1")
        x = b.act(b.conv(x, np.ones((1, 1, 1, 1)), node_id="c2"), node_id="a2")
        b.output(x)
        spans = segment_layers(b.build())
        assert [s.nodes for s in spans if not s.tail] == [("c1", "bn1", "a1"), ("c2", "a2")]

    def test_tail(self):
        b = GraphBuilder((1, 4, 4))
        x = b.act(b.conv(b.input, np.ones((1, 1, 1, 1)), node_id="c"), node_id="a")
        b.output(b.avgpool(x, node_id="pool"))
        spans = segment_layers(b.build())
        assert [(s.nodes, s.tail) for s in spans] == [(("c", "a"), False), (("pool",), True)]

    def test_residual(self):
        # a0 branches to a conv chain and to the Add; the Add joins the span
        # that consumes both branches
        b = GraphBuilder((1, 4, 4))
        a0 = b.act(b.conv(b.input, np.ones((1, 1, 1, 1)), node_id="c0"), node_id="a0")
        c1 = b.conv(a0, np.ones((1, 1, 1, 1)), node_id="c1")
        s = b.add(c1, a0, node_id="sum")
        b.output(b.act(s, node_id="a1"))
        spans = [s.nodes for s in segment_layers(b.build())]
        assert spans == [("c0", "a0"), ("c1", "sum", "a1")]

    def test_rejects_noncanonical(self):
        b = GraphBuilder((1, 4, 4))
        c = b.conv(b.input, np.ones((1, 1, 1, 1)))
        b.output(b.add(b.act(c), b.act(c)))
        with pytest.raises(NonCanonicalError):
            segment_layers(b.build())


class TestManifest:
    def test_round_trip(self, tmp_path):
        g = lenet_tiny(0)
        save(g, tmp_path / "manifest.json")
        assert load(tmp_path / "manifest.json") == g

    def test_topological_order_is_deterministic(self):
        g = lenet_tiny(0)
        shuffled = Graph.from_nodes(reversed(list(g.nodes.values())))
        assert shuffled.topo_order == g.topo_order

    def test_missing_blob(self, tmp_path):
        save(chain(), tmp_path / "manifest.json")
        (tmp_path / "blobs" / "conv.weight.qlt").unlink()
        with pytest.raises(MissingBlobError):
            load(tmp_path / "manifest.json")

    def test_real_weights_in_integer_graph(self, tmp_path):
        save(chain().evolve(representation=ID), tmp_path / "manifest.json")
        with pytest.raises(KindMismatchError):
            load(tmp_path / "manifest.json")

    def test_parse_error_line(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text('{\n  "version": 1,\n  "nodes": [,]\n}\n')
        with pytest.raises(ParseError) as e:
            load(path)
        assert e.value.line == 3

    def test_parse_error_field(self, tmp_path):
        save(chain(), tmp_path / "manifest.json")
        doc = json.loads((tmp_path / "manifest.json").read_text())
        del doc["nodes"][1]["op"]
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(ParseError) as e:
            load(tmp_path / "manifest.json")
        assert e.value.field == "nodes[1].op"

    def test_nonpositive_gamma_rejected_on_load(self, tmp_path):
        save(chain(), tmp_path / "manifest.json")
        doc = json.loads((tmp_path / "manifest.json").read_text())
        for n in doc["nodes"]:
            if n["id"] == "bn":
                n["attrs"]["gamma"] = 0.0  # scalars are allowed in manifests
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(NonCanonicalError):
            load(tmp_path / "manifest.json")
