"""Graph IR: typed operator nodes, the representation tag, validation,
layer segmentation and manifest (de)serialization."""
from __future__ import annotations

import enum
import heapq
import json
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (
    KindMismatchError,
    MissingBlobError,
    NonCanonicalError,
    ParseError,
    ShapeMismatchError,
)
from .requant import RequantParams
from .tensor import REAL, QuantSpec, kind_of, read_blob, write_blob

MANIFEST_VERSION = 1


class Representation(enum.Enum):
    FULL_PRECISION = "FullPrecision"
    FAKE_QUANTIZED = "FakeQuantized"
    QUANTIZED_DEPLOYABLE = "QuantizedDeployable"
    INTEGER_DEPLOYABLE = "IntegerDeployable"

    @property
    def stage(self) -> int:
        return list(Representation).index(self)

    def __lt__(self, other):
        return self.stage < other.stage

    def __le__(self, other):
        return self.stage <= other.stage


FP = Representation.FULL_PRECISION
FQ = Representation.FAKE_QUANTIZED
QD = Representation.QUANTIZED_DEPLOYABLE
ID = Representation.INTEGER_DEPLOYABLE


class Op(str, enum.Enum):
    INPUT = "Input"
    CONV2D = "Conv2d"
    FULLY_CONNECTED = "FullyConnected"
    BATCH_NORM = "BatchNorm"
    ACTIVATION = "Activation"
    THRESHOLD_ACTIVATION = "ThresholdActivation"
    ADD = "Add"
    MAX_POOL = "MaxPool2d"
    AVG_POOL = "AvgPool2d"
    OUTPUT = "Output"


LINEAR_OPS = frozenset({Op.CONV2D, Op.FULLY_CONNECTED})
ACTIVATION_OPS = frozenset({Op.ACTIVATION, Op.THRESHOLD_ACTIVATION})


def _attr_equal(a, b) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return (
            isinstance(a, np.ndarray)
            and isinstance(b, np.ndarray)
            and a.dtype == b.dtype
            and a.shape == b.shape
            and a.tobytes() == b.tobytes()
        )
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        return len(a) == len(b) and all(_attr_equal(x, y) for x, y in zip(a, b))
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_attr_equal(a[k], b[k]) for k in a)
    return type(a) is type(b) and a == b


@dataclass(frozen=True, eq=False)
class Node:
    id: str
    op: Op
    inputs: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)
    out_spec: QuantSpec | None = None

    def __eq__(self, other):
        if not isinstance(other, Node):
            return NotImplemented
        return (
            self.id == other.id
            and self.op == other.op
            and self.inputs == other.inputs
            and self.out_spec == other.out_spec
            and _attr_equal(self.attrs, other.attrs)
        )

    def with_attrs(self, **changes) -> "Node":
        attrs = dict(self.attrs)
        for k, v in changes.items():
            if v is None:
                attrs.pop(k, None)
            else:
                attrs[k] = v
        return replace(self, attrs=attrs)

    @property
    def is_linear(self) -> bool:
        return self.op in LINEAR_OPS

    @property
    def is_activation(self) -> bool:
        return self.op in ACTIVATION_OPS


@dataclass(eq=False)
class Graph:
    nodes: dict[str, Node]
    representation: Representation = FP
    eps_in: float | None = None
    passes: tuple[str, ...] = ()

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.representation == other.representation
            and self.eps_in == other.eps_in
            and self.passes == other.passes
            and list(self.nodes) == list(other.nodes)
            and all(self.nodes[k] == other.nodes[k] for k in self.nodes)
        )

    @classmethod
    def from_nodes(cls, nodes: Iterable[Node], **kw) -> "Graph":
        d = {}
        for n in nodes:
            if n.id in d:
                raise ValueError(f"duplicate node id {n.id!r}")
            d[n.id] = n
        return cls(d, **kw)

    def __getitem__(self, node_id: str) -> Node:
        return self.nodes[node_id]

    def __iter__(self):
        return (self.nodes[i] for i in self.topo_order)

    def evolve(self, nodes: Iterable[Node] | None = None, **changes) -> "Graph":
        """New graph with some fields replaced (graphs are treated as immutable)."""
        kw = dict(representation=self.representation, eps_in=self.eps_in, passes=self.passes)
        kw.update(changes)
        if nodes is None:
            nodes = self.nodes.values()
        return Graph.from_nodes(nodes, **kw)

    def with_pass(self, name: str, nodes=None, **changes) -> "Graph":
        # a pass is recorded once, so re-running an idempotent pass is a no-op
        passes = self.passes if name in self.passes else self.passes + (name,)
        return self.evolve(nodes, passes=passes, **changes)

    @cached_property
    def consumers(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {k: [] for k in self.nodes}
        for n in sorted(self.nodes.values(), key=lambda n: n.id):
            for i in n.inputs:
                if i in out:
                    out[i].append(n.id)
        return {k: tuple(v) for k, v in out.items()}

    @cached_property
    def topo_order(self) -> tuple[str, ...]:
        """Kahn's algorithm, ties broken by lexicographic node id."""
        indeg = {k: 0 for k in self.nodes}
        for n in self.nodes.values():
            for i in n.inputs:
                if i in self.nodes:
                    indeg[n.id] += 1
        heap = [k for k, v in indeg.items() if v == 0]
        heapq.heapify(heap)
        order = []
        while heap:
            k = heapq.heappop(heap)
            order.append(k)
            for c in self.consumers[k]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(heap, c)
        if len(order) != len(self.nodes):
            raise NonCanonicalError("graph contains a cycle")
        return tuple(order)

    def nodes_of(self, *ops: Op) -> list[Node]:
        return [n for n in self if n.op in ops]

    @property
    def input_node(self) -> Node:
        (n,) = [n for n in self.nodes.values() if n.op == Op.INPUT]
        return n

    @property
    def output_node(self) -> Node:
        (n,) = [n for n in self.nodes.values() if n.op == Op.OUTPUT]
        return n

    def producer(self, node: Node, index: int = 0) -> Node:
        return self.nodes[node.inputs[index]]


# -- validation -------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    rule: str
    node: str | None = None
    detail: str = ""

    def __str__(self):
        where = f"{self.rule}({self.node})" if self.node else self.rule
        return f"{where}: {self.detail}" if self.detail else where


def _has_cycle(g: Graph) -> bool:
    try:
        g.topo_order
    except NonCanonicalError:
        return True
    return False


def validate(g: Graph) -> list[Violation]:
    """All violated graph invariants; an empty list means the graph is canonical."""
    out: list[Violation] = []
    for n in g.nodes.values():
        for i in n.inputs:
            if i not in g.nodes:
                out.append(Violation("MissingInput", n.id, f"input {i!r} does not exist"))
        if n.op == Op.INPUT:
            ok = len(n.inputs) == 0
        elif n.op == Op.ADD:
            ok = len(n.inputs) >= 2
        else:
            ok = len(n.inputs) == 1
        if not ok:
            out.append(Violation("Arity", n.id, f"{n.op.value} with {len(n.inputs)} inputs"))
        if n.op == Op.BATCH_NORM:
            for key in ("gamma", "sigma"):
                v = n.attrs.get(key)
                if v is not None and np.any(np.asarray(v) <= 0):
                    out.append(Violation("NonPositiveBnParam", n.id, f"{key} must be > 0"))

    n_out = sum(n.op == Op.OUTPUT for n in g.nodes.values())
    if n_out != 1:
        out.append(Violation("OutputCount", None, f"expected one Output, found {n_out}"))
    n_in = sum(n.op == Op.INPUT for n in g.nodes.values())
    if n_in != 1:
        out.append(Violation("InputCount", None, f"expected one Input, found {n_in}"))

    if _has_cycle(g):
        out.append(Violation("CycleDetected"))
    for k, cs in g.consumers.items():
        n = g.nodes[k]
        if len(cs) > 1 and not (n.is_activation or n.op == Op.INPUT):
            out.append(Violation("BranchFromNonActivation", k,
                                 f"{n.op.value} feeds {len(cs)} consumers"))
    return out


# -- layer segmentation -----------------------------------------------------

@dataclass(frozen=True)
class LayerSpan:
    nodes: tuple[str, ...]
    tail: bool = False

    @property
    def last(self) -> str:
        return self.nodes[-1]


def segment_layers(g: Graph) -> list[LayerSpan]:
    """Partition compute nodes into canonical layers ending at their first
    Activation; nodes after the last Activation form tail spans."""
    problems = validate(g)
    if problems:
        raise NonCanonicalError("; ".join(map(str, problems)))

    span_of: dict[str, int] = {}
    members: dict[int, list[str]] = {}
    parent: dict[int, int] = {}

    def find(s):
        while parent[s] != s:
            s = parent[s]
        return s

    next_id = 0
    for k in g.topo_order:
        n = g.nodes[k]
        if n.op in (Op.INPUT, Op.OUTPUT):
            continue
        open_spans = sorted({
            find(span_of[i]) for i in n.inputs
            if i in span_of and not g.nodes[i].is_activation
        })
        if not open_spans:
            s = next_id
            next_id += 1
            parent[s] = s
            members[s] = []
        else:
            s = open_spans[0]
            for other in open_spans[1:]:
                parent[other] = s
                members[s].extend(members.pop(other))
        span_of[k] = s
        members[s].append(k)

    pos = {k: i for i, k in enumerate(g.topo_order)}
    spans = []
    for s, ids in members.items():
        ids = sorted(ids, key=pos.__getitem__)
        ends_in_act = g.nodes[ids[-1]].is_activation
        _check_single_linear_path(g, ids)
        spans.append(LayerSpan(tuple(ids), tail=not ends_in_act))
    spans.sort(key=lambda sp: pos[sp.nodes[0]])
    return spans


def _check_single_linear_path(g: Graph, ids: list[str]) -> None:
    inside = set(ids)
    for k in ids:
        n = g.nodes[k]
        if not n.is_linear:
            continue
        stack = [c for c in g.consumers[k] if c in inside]
        seen = set()
        while stack:
            c = stack.pop()
            if c in seen:
                continue
            seen.add(c)
            cn = g.nodes[c]
            if cn.is_linear:
                raise NonCanonicalError(
                    f"Linear node {c!r} follows Linear node {k!r} with no Activation between"
                )
            if not cn.is_activation:
                stack.extend(x for x in g.consumers[c] if x in inside)


# -- manifest I/O -----------------------------------------------------------

_SAFE = re.compile(r"[^A-Za-z0-9_.-]")


def _encode_attr(value, blob_name, blobs):
    if isinstance(value, np.ndarray):
        blobs[blob_name] = value
        return {"blob": f"blobs/{blob_name}.qlt", "shape": list(value.shape),
                "kind": kind_of(value)}
    if isinstance(value, RequantParams):
        return {"requant": value.to_dict()}
    if isinstance(value, (list, tuple)):
        return [_encode_attr(v, f"{blob_name}.{i}", blobs) for i, v in enumerate(value)]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return value


def save(g: Graph, manifest_path) -> Path:
    """Write ``g`` as a JSON manifest plus one blob file per tensor attribute."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    (root / "blobs").mkdir(parents=True, exist_ok=True)
    blobs: dict[str, np.ndarray] = {}
    nodes = []
    for n in g:
        stem = _SAFE.sub("_", n.id)
        attrs = {k: _encode_attr(n.attrs[k], f"{stem}.{k}", blobs) for k in sorted(n.attrs)}
        nodes.append({
            "id": n.id,
            "op": n.op.value,
            "inputs": list(n.inputs),
            "attrs": attrs,
            "out_spec": n.out_spec.to_dict() if n.out_spec else None,
        })
    doc = {
        "version": MANIFEST_VERSION,
        "representation": g.representation.value,
        "eps_in": g.eps_in,
        "passes": list(g.passes),
        "nodes": nodes,
    }
    for name, t in blobs.items():
        write_blob(root / "blobs" / f"{name}.qlt", t)
    manifest_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return manifest_path


def _decode_attr(value, root: Path, field_name: str, rep: Representation):
    if isinstance(value, dict) and "blob" in value:
        path = root / value["blob"]
        if not path.is_file():
            raise MissingBlobError(f"{field_name}: blob {value['blob']!r} not found")
        t = read_blob(path)
        if "shape" in value and list(t.shape) != list(value["shape"]):
            raise ShapeMismatchError(
                f"{field_name}: manifest shape {value['shape']} != blob shape {list(t.shape)}"
            )
        if "kind" in value and value["kind"] != kind_of(t):
            raise KindMismatchError(
                f"{field_name}: manifest kind {value['kind']} != blob kind {kind_of(t)}"
            )
        if rep == ID and kind_of(t) == REAL:
            raise KindMismatchError(
                f"{field_name}: real-valued tensor in an IntegerDeployable graph"
            )
        return t
    if isinstance(value, dict) and "requant" in value:
        try:
            return RequantParams.from_dict(value["requant"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad requant record: {exc}", field=field_name) from exc
    if isinstance(value, list):
        return [_decode_attr(v, root, f"{field_name}[{i}]", rep) for i, v in enumerate(value)]
    return value


def load(manifest_path) -> Graph:
    manifest_path = Path(manifest_path)
    text = manifest_path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from exc

    def need(obj, key, where):
        if not isinstance(obj, dict) or key not in obj:
            raise ParseError("missing required field", field=f"{where}{key}")
        return obj[key]

    version = need(doc, "version", "")
    if version != MANIFEST_VERSION:
        raise ParseError(f"unsupported manifest version {version!r}", field="version")
    try:
        rep = Representation(need(doc, "representation", ""))
    except ValueError as exc:
        raise ParseError(str(exc), field="representation") from exc
    eps_in = doc.get("eps_in")
    root = manifest_path.parent
    nodes = []
    seen = set()
    for idx, raw in enumerate(need(doc, "nodes", "")):
        where = f"nodes[{idx}]."
        nid = need(raw, "id", where)
        if nid in seen:
            raise ParseError(f"duplicate node id {nid!r}", field=f"{where}id")
        seen.add(nid)
        try:
            op = Op(need(raw, "op", where))
        except ValueError as exc:
            raise ParseError(str(exc), field=f"{where}op") from exc
        attrs = {
            k: _decode_attr(v, root, f"{where}attrs.{k}", rep)
            for k, v in (raw.get("attrs") or {}).items()
        }
        spec = raw.get("out_spec")
        try:
            spec = QuantSpec.from_dict(spec) if spec else None
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad out_spec: {exc}", field=f"{where}out_spec") from exc
        nodes.append(Node(nid, op, tuple(raw.get("inputs", ())), attrs, spec))
    g = Graph.from_nodes(nodes, representation=rep, eps_in=eps_in,
                         passes=tuple(doc.get("passes", ())))
    problems = validate(g)
    if problems:
        raise NonCanonicalError(f"{manifest_path}: " + "; ".join(map(str, problems)))
    return g

