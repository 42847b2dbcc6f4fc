"""Cross-checks two representations of one network node by node.

Each node gets a deviation bound composed by interval arithmetic from its
inputs' bounds and its own local error (weight quantization, requantization
multipliers, flooring). The composition is conservative: a reported bound
may be loose but must never be exceeded.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import GraphMismatchError, UnknownNodeError
from .graph import FP, FQ, ID, QD, Graph, Node, Op
from .interpreter import integer_input, run
from .lowering import bn_params
from .pact import act_params, fq_weight_forward, weight_params
from .requant import RequantParams
from .tensor import as_real, quantize_linear

# float rounding allowance on real-valued paths, relative to output magnitude
FLOAT_SLACK = 1e-9


@dataclass
class NodeRecord:
    node: str
    op: str
    max_abs_err: float = 0.0
    max_rel_err: float = 0.0
    bound: float = 0.0
    bound_kind: str = "derived"
    exact: bool = True
    expected_exact: bool = True
    violations: int = 0

    @property
    def ok(self) -> bool:
        return self.violations == 0 and (self.exact or not self.expected_exact)


@dataclass
class VerifyReport:
    representation_a: str
    representation_b: str
    samples: int
    records: list[NodeRecord] = field(default_factory=list)
    real_ops_b: int = 0

    @property
    def claims(self) -> dict[str, bool]:
        out = {
            "bound_soundness": all(r.violations == 0 for r in self.records),
            "exactness_claims": all(r.exact for r in self.records if r.expected_exact),
        }
        if self.representation_b == ID.value:
            out["integer_purity"] = self.real_ops_b == 0
        return out

    @property
    def passed(self) -> bool:
        return all(self.claims.values())

    def record(self, node_id: str) -> NodeRecord:
        for r in self.records:
            if r.node == node_id:
                return r
        raise KeyError(node_id)

    def to_dict(self) -> dict:
        return {
            "representation_a": self.representation_a,
            "representation_b": self.representation_b,
            "samples": self.samples,
            "passed": self.passed,
            "claims": self.claims,
            "real_ops_b": self.real_ops_b,
            "bound_note": "multi-layer bounds are composed by interval arithmetic",
            "nodes": [asdict(r) for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = [f.name for f in NodeRecord.__dataclass_fields__.values()]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.records:
            w.writerow(asdict(r))
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{self.representation_a} vs {self.representation_b} over {self.samples} inputs"]
        lines.append(f"{'node':<16}{'op':<20}{'max_abs_err':>14}{'bound':>14}  exact")
        for r in self.records:
            flag = "yes" if r.exact else ("NO" if r.expected_exact else "no")
            mark = "  VIOLATED" if r.violations else ""
            lines.append(f"{r.node:<16}{r.op:<20}{r.max_abs_err:>14.6g}{r.bound:>14.6g}  "
                         f"{flag}{mark}")
        for k, v in self.claims.items():
            lines.append(f"{k}: {'pass' if v else 'FAIL'}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)

    def write(self, path) -> list[Path]:
        """Write ``path`` as JSON plus a sibling CSV; returns the files written."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        csv_path = path.with_suffix(".csv")
        csv_path.write_text(self.to_csv())
        return [path, csv_path]


# -- per-side views of node semantics ----------------------------------------

def _linear_view(g: Graph, n: Node):
    a = n.attrs
    if g.representation == ID:
        w = a["w_eps"] * a["weight"].astype(np.float64)
        b = a.get("bias")
        b = np.zeros(w.shape[0]) if b is None else n.out_spec.eps * b.astype(np.float64)
        return w, b
    w = a["weight"]
    if g.representation == FQ and "w_bits" in a:
        w = fq_weight_forward(w, weight_params(n))
    b = a.get("bias")
    return w, (np.zeros(w.shape[0]) if b is None else np.asarray(b))


def _bn_view(g: Graph, n: Node):
    a = n.attrs
    if g.representation == ID:
        kappa = a["eps_kappa"] * a["q_kappa"].astype(np.float64)
        return kappa, n.out_spec.eps * a["q_lambda_acc"].astype(np.float64)
    if "q_kappa" in a and g.representation in (FQ, QD):
        p = bn_params(n)
        return p.kappa_hat, p.lambda_hat
    kappa = np.asarray(a["gamma"]) / np.asarray(a["sigma"])
    return kappa, np.asarray(a["beta"]) - kappa * np.asarray(a["mu"])


def _act_kind(g: Graph, n: Node) -> str:
    if n.op == Op.THRESHOLD_ACTIVATION:
        return "threshold"
    if g.representation == FP:
        return "relu"
    if g.representation == ID:
        return "requant"
    return "lq"


def requant_local_bound(p: RequantParams, q_max: int) -> float:
    """Real-valued error of ``(m*q) >> d`` against ``ratio*q`` before flooring."""
    return float(p.abs_error) * q_max * p.target_eps


def _floor_gap(x: float) -> int:
    # largest |floor(u) - floor(v)| when |u - v| <= x
    return math.floor(x) + 1


@dataclass
class _Sample:
    """Observed values of one input sample, used for magnitude terms."""
    a: dict
    b: dict


def _peak(t) -> float:
    return float(np.max(np.abs(t))) if np.size(t) else 0.0


def derive_node_bound(g_a: Graph, g_b: Graph, node_id: str, upstream: Sequence[float],
                      sample: _Sample | None = None) -> tuple[float, str]:
    """Bound on ``|a - b|`` at ``node_id`` given bounds on its inputs.

    ``sample`` supplies observed input magnitudes for the terms that scale with
    the input (weight differences, clip excess). Returns ``(bound, kind)`` with
    kind ``derived`` or ``range`` (structural mismatch: only the output range
    bounds the deviation).
    """
    if node_id not in g_a.nodes or node_id not in g_b.nodes:
        raise UnknownNodeError(f"node {node_id!r} is not in both graphs")
    na, nb = g_a.nodes[node_id], g_b.nodes[node_id]
    ra, rb = g_a.representation, g_b.representation
    obs = sample.a if sample else {}
    obs_b = sample.b if sample else {}

    def src_a(i=0):
        return obs.get(na.inputs[i], np.zeros(1)) if na.inputs else None

    def range_bound():
        return _peak(obs.get(node_id, 0.0)) + _peak(obs_b.get(node_id, 0.0)), "range"

    if na.inputs != nb.inputs:
        return range_bound()
    B = upstream[0] if upstream else 0.0
    op = nb.op

    if op == Op.INPUT:
        qa, qb = ra in (QD, ID), rb in (QD, ID)
        if qa == qb:
            return 0.0, "derived"
        spec = nb.out_spec
        x = obs.get(node_id, np.zeros(1))
        excess = max(0.0, float(np.max(x)) - spec.eps * spec.hi) + max(0.0, -float(np.min(x)))
        return spec.eps + excess, "derived"

    if op in (Op.OUTPUT, Op.MAX_POOL):
        return B, "derived"

    if na.op != nb.op:
        return range_bound()

    if nb.is_linear:
        wa, ba = _linear_view(g_a, na)
        wb, bb = _linear_view(g_b, nb)
        rows_b = np.abs(wb).reshape(wb.shape[0], -1).sum(axis=1)
        rows_d = np.abs(wa - wb).reshape(wb.shape[0], -1).sum(axis=1)
        per = rows_b * B + rows_d * _peak(src_a()) + np.abs(ba - bb)
        return float(np.max(per)), "derived"

    if op == Op.BATCH_NORM:
        ka, la = _bn_view(g_a, na)
        kb, lb = _bn_view(g_b, nb)
        per = np.abs(kb) * B + np.abs(ka - kb) * _peak(src_a()) + np.abs(la - lb)
        return float(np.max(per)), "derived"

    if op == Op.ACTIVATION:
        kind_a, kind_b = _act_kind(g_a, na), _act_kind(g_b, nb)
        if kind_a == kind_b == "relu":
            return B, "derived"
        p = act_params(nb)
        eps_y, beta, levels = p.eps_y, p.beta_y, p.levels
        if kind_a == "relu":
            excess = max(0.0, _peak(src_a()) - beta)
            local = eps_y
            if kind_b == "requant":
                rq = nb.attrs["requant"]
                local = eps_y * (1 + float(rq.abs_error) * g_b.producer(nb).out_spec.magnitude)
            return B + excess + local, "derived"
        if kind_a == "lq" and kind_b == "lq":
            if act_params(na) != p:
                return range_bound()
            if B == 0:
                return 0.0, "derived"
            return eps_y * min(levels, _floor_gap(B / eps_y)), "derived"
        if kind_a == "lq" and kind_b == "requant":
            rq: RequantParams = nb.attrs["requant"]
            e = float(rq.abs_error)
            if B == 0 and e == 0:
                return 0.0, "derived"
            mag = g_b.producer(nb).out_spec.magnitude
            q_eff = mag if rq.m == 0 else min(mag, -(-(levels + 1) * (1 << rq.d) // rq.m))
            return eps_y * min(levels, _floor_gap(B / eps_y + e * q_eff)), "derived"
        return range_bound()

    if op == Op.THRESHOLD_ACTIVATION:
        if B == 0:
            return 0.0, "derived"
        p = act_params(nb)
        kappa = float(np.max(np.asarray(nb.attrs.get("gamma", na.attrs.get("gamma")))
                             / np.asarray(nb.attrs.get("sigma", na.attrs.get("sigma")))))
        eps_phi = g_b.producer(nb).out_spec.eps
        return p.eps_y * min(p.levels, _floor_gap(kappa * (B + eps_phi) / p.eps_y)), "derived"

    if op == Op.ADD:
        total = float(sum(upstream))
        if rb == ID and ra != ID:
            eps_s = nb.out_spec.eps
            for i, rq in zip(nb.inputs[1:], nb.attrs["requant"]):
                integral = rq.is_exact and rq.m % (1 << rq.d) == 0
                if not integral:
                    mag = g_b.nodes[i].out_spec.magnitude
                    total += eps_s * (float(rq.abs_error) * mag + 1)
        return total, "derived"

    if op == Op.AVG_POOL:
        if rb == ra or (ra in (FP, FQ) and rb in (FP, FQ)):
            return B, "derived"
        eps = nb.out_spec.eps
        if rb == QD:  # real mean vs lattice-floored mean
            return B + eps, "derived"
        rq: RequantParams = nb.attrs["requant"]
        e = float(rq.abs_error)
        k = int(round(1 / rq.ratio))
        spread = e * k * g_b.producer(nb).out_spec.magnitude
        if ra == QD:
            if B == 0 and e == 0:
                return 0.0, "derived"
            return eps * _floor_gap(B / eps + spread), "derived"
        return B + eps * (spread + 1), "derived"

    raise UnknownNodeError(f"no bound rule for {op.value}")


def _real_outputs(g: Graph, outputs: dict) -> dict:
    if g.representation != ID:
        return outputs
    return {k: g.nodes[k].out_spec.eps * v.astype(np.float64) for k, v in outputs.items()}


def _prepare(g: Graph, x):
    x = as_real(x)
    return integer_input(g, x) if g.representation == ID else x


def compare_representations(g_a: Graph, g_b: Graph, inputs: Sequence[np.ndarray]) -> VerifyReport:
    """Run both graphs on every input and check per-node deviations against bounds."""
    if g_b.representation < g_a.representation:
        raise GraphMismatchError("g_b must be at the same or a later representation than g_a")
    common = [k for k in g_b.topo_order if k in g_a.nodes]
    if g_a.input_node.id not in common or g_a.output_node.id not in common:
        raise GraphMismatchError("graphs do not share input and output nodes")
    if not inputs:
        raise ValueError("compare needs at least one input")

    recs = {k: NodeRecord(k, g_b.nodes[k].op.value) for k in common}
    peak_a = {k: 0.0 for k in common}
    real_ops_b = 0
    for x in inputs:
        _, ta = run(g_a, _prepare(g_a, x))
        _, tb = run(g_b, _prepare(g_b, x))
        real_ops_b += tb.real_ops
        va, vb = _real_outputs(g_a, ta.outputs), _real_outputs(g_b, tb.outputs)
        sample = _Sample(va, vb)
        bounds: dict[str, float] = {}
        for k in common:
            nb = g_b.nodes[k]
            up = [bounds.get(i, math.inf) for i in nb.inputs]
            if any(math.isinf(u) for u in up):
                bound, kind = _range(va[k], vb[k])
            else:
                bound, kind = derive_node_bound(g_a, g_b, k, up, sample)
            bounds[k] = bound
            a, b = va[k], vb[k]
            err = _peak(a - b)
            r = recs[k]
            r.max_abs_err = max(r.max_abs_err, err)
            peak_a[k] = max(peak_a[k], _peak(a))
            slack = FLOAT_SLACK * (_peak(a) + (nb.out_spec.eps if nb.out_spec else 0.0))
            # the reported bound carries the float slack; exact claims stay at 0
            r.bound = max(r.bound, bound + slack if bound else 0.0)
            if kind == "range":
                r.bound_kind = "range"
            if err > bound + slack:
                r.violations += 1
            if bound != 0:
                r.expected_exact = False
            r.exact = r.exact and _exact(g_a, g_b, k, ta.outputs[k], tb.outputs[k], err)
    for k, r in recs.items():
        r.max_rel_err = r.max_abs_err / peak_a[k] if peak_a[k] > 0 else r.max_abs_err
    return VerifyReport(g_a.representation.value, g_b.representation.value, len(inputs),
                        list(recs.values()), real_ops_b)


def _range(a, b) -> tuple[float, str]:
    return _peak(a) + _peak(b), "range"


def _exact(g_a: Graph, g_b: Graph, k: str, a, b, err: float) -> bool:
    if g_b.representation == ID and g_a.representation == QD:
        spec = g_b.nodes[k].out_spec
        img = quantize_linear(as_real(a), spec.__class__.spanning(spec.eps, -(2**62), 2**62))
        return bool(np.array_equal(img, b))
    return err == 0.0
