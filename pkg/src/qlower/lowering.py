"""Passes that advance a graph from FakeQuantized to IntegerDeployable.

Pipeline order::

    fold_bn / add_input_bias      (FullPrecision or FakeQuantized)
    bn_quantizer, harden_weights  (FakeQuantized)
    set_deployment                (-> QuantizedDeployable)
    merge_bn_thresholds           (optional, QuantizedDeployable)
    integerize                    (-> IntegerDeployable)
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable, Collection

import numpy as np

from .errors import (
    LambdaUnderflowWarning,
    MissingQuantParamsError,
    NoLeadingLinearError,
    NonCanonicalError,
    NonMonotoneThresholdsError,
    NotFoldableError,
    PassOrderError,
    ThresholdTableError,
)
from .graph import FP, FQ, ID, QD, Graph, Node, Op, validate
from .interpreter import avgpool_params
from .pact import act_params, fq_weight_forward, weight_clip_bounds, weight_image, weight_params
from .requant import DEFAULT_ACT_FACTOR, DEFAULT_ADD_FACTOR, RequantParams, choose_shift
from .tensor import INT64_MAX, INT64_MIN, QuantSpec, as_integer, as_real, decimal_fraction as _decimal, quantize_linear, snap_floor

log = logging.getLogger(__name__)

MAX_THRESHOLD_BITS = 8


def _require(g: Graph, name: str, *, reps, forbid=(), need=()):
    if g.representation not in reps:
        allowed = ", ".join(r.value for r in reps)
        raise PassOrderError(f"{name} needs a {allowed} graph, got {g.representation.value}")
    for p in forbid:
        if p in g.passes:
            raise PassOrderError(f"{name} must run before {p}")
    for p in need:
        if p not in g.passes:
            raise PassOrderError(f"{name} requires {p} to have run")


def _finish(g: Graph) -> Graph:
    problems = validate(g)
    if problems:
        raise NonCanonicalError("; ".join(map(str, problems)))
    return g


def _rewire(nodes: dict[str, Node], old: str, new: str) -> None:
    for k, n in nodes.items():
        if old in n.inputs:
            nodes[k] = replace(n, inputs=tuple(new if i == old else i for i in n.inputs))


def _per_channel(v: np.ndarray, like: np.ndarray) -> np.ndarray:
    return np.asarray(v).reshape((-1,) + (1,) * (like.ndim - 1))


# -- FullPrecision / FakeQuantized transforms ------------------------------

def fold_bn(g: Graph, only: Collection[str] | None = None) -> Graph:
    """Fold each BatchNorm into its preceding Linear node: ``w <- gamma/sigma * w``,
    ``b <- b + beta - gamma/sigma * mu``. ``only`` restricts folding to some BN ids."""
    _require(g, "fold_bn", reps=(FP, FQ), forbid=("bn_quantizer",))
    nodes = dict(g.nodes)
    for bn in g.nodes_of(Op.BATCH_NORM):
        if only is not None and bn.id not in only:
            continue
        lin = g.producer(bn)
        if not lin.is_linear:
            raise NotFoldableError(
                f"BatchNorm {bn.id!r} follows {lin.op.value} {lin.id!r}, not a Linear node"
            )
        a = bn.attrs
        kappa = np.asarray(a["gamma"]) / np.asarray(a["sigma"])
        w = lin.attrs["weight"]
        new_w = as_real(_per_channel(kappa, w) * w)
        bias = lin.attrs.get("bias")
        bias = np.zeros(w.shape[0]) if bias is None else bias
        new_b = as_real(bias + np.asarray(a["beta"]) - kappa * np.asarray(a["mu"]))
        changes = dict(weight=new_w, bias=new_b)
        if "w_alpha" in lin.attrs:
            changes["w_alpha"], changes["w_beta"] = weight_clip_bounds(new_w)
        nodes[lin.id] = lin.with_attrs(**changes)
        del nodes[bn.id]
        _rewire(nodes, bn.id, lin.id)
    return _finish(g.with_pass("fold_bn", nodes.values()))


def add_input_bias(g: Graph, input_alpha: float) -> Graph:
    """Absorb a non-zero input offset into the bias of the leading Linear nodes,
    so the network consumes inputs in the canonical ``[0, beta)`` form."""
    _require(g, "add_input_bias", reps=(FP, FQ), forbid=("bn_quantizer",))
    inp = g.input_node
    firsts = [g.nodes[c] for c in g.consumers[inp.id]]
    if not firsts or not all(n.is_linear for n in firsts):
        raise NoLeadingLinearError("the input must feed Linear nodes only")
    if input_alpha == 0:
        return g
    nodes = dict(g.nodes)
    for lin in firsts:
        pad = lin.attrs.get("padding", 0)
        if np.any(np.asarray(pad) != 0):
            raise NoLeadingLinearError(
                f"{lin.id!r} zero-pads its input; padding would not follow the offset"
            )
        w = lin.attrs["weight"]
        shift = input_alpha * w.reshape(w.shape[0], -1).sum(axis=1)
        bias = lin.attrs.get("bias")
        bias = np.zeros(w.shape[0]) if bias is None else bias
        nodes[lin.id] = lin.with_attrs(bias=as_real(bias + shift))
    nodes[inp.id] = inp.with_attrs(alpha=0.0)
    return _finish(g.with_pass("add_input_bias", nodes.values()))


@dataclass(frozen=True)
class BnQuantParams:
    eps_kappa: float
    eps_lambda: float
    bits: int
    q_kappa: np.ndarray
    q_lambda: np.ndarray

    @property
    def kappa_hat(self) -> np.ndarray:
        return self.eps_kappa * self.q_kappa.astype(np.float64)

    @property
    def lambda_hat(self) -> np.ndarray:
        return self.eps_lambda * self.q_lambda.astype(np.float64)


def symmetric_quantize(v: np.ndarray, bits: int) -> tuple[float, np.ndarray]:
    """Symmetric per-tensor quantizer: ``eps = 2*max|v|/(2^Q-1)``."""
    peak = float(np.max(np.abs(v))) if np.size(v) else 0.0
    eps = 2.0 * peak / (2**bits - 1) if peak > 0 else 1.0
    spec = QuantSpec(eps=eps, alpha=0.0, bits=bits, lo=-(2 ** (bits - 1)), hi=2 ** (bits - 1) - 1)
    return eps, quantize_linear(as_real(v), spec)


def bn_params(node: Node) -> BnQuantParams:
    a = node.attrs
    return BnQuantParams(float(a["eps_kappa"]), float(a["eps_lambda"]), int(a["bn_bits"]),
                         a["q_kappa"], a["q_lambda"])


def bn_quantizer(g: Graph, bits: int = 8) -> Graph:
    """Attach quantized ``kappa = gamma/sigma`` and ``lambda = beta - kappa*mu`` to every BN."""
    _require(g, "bn_quantizer", reps=(FQ,))
    nodes = []
    for n in g.nodes.values():
        if n.op == Op.BATCH_NORM:
            a = n.attrs
            kappa = np.asarray(a["gamma"]) / np.asarray(a["sigma"])
            lam = np.asarray(a["beta"]) - kappa * np.asarray(a["mu"])
            eps_k, q_k = symmetric_quantize(kappa, bits)
            eps_l, q_l = symmetric_quantize(lam, bits)
            n = n.with_attrs(bn_bits=int(bits), eps_kappa=eps_k, eps_lambda=eps_l,
                             q_kappa=q_k, q_lambda=q_l)
        nodes.append(n)
    return _finish(g.with_pass("bn_quantizer", nodes))


def harden_weights(g: Graph) -> Graph:
    """Replace every Linear weight with its fake-quantized value."""
    _require(g, "harden_weights", reps=(FQ,))
    nodes = []
    for n in g.nodes.values():
        if n.is_linear:
            n = n.with_attrs(weight=fq_weight_forward(n.attrs["weight"], weight_params(n)))
        nodes.append(n)
    return _finish(g.with_pass("harden_weights", nodes))


# -- quantum propagation ------------------------------------------------------

def bias_image(bias: np.ndarray, eps_phi: float) -> np.ndarray:
    return as_integer(snap_floor(np.asarray(bias, dtype=np.float64) / eps_phi))


def weight_integer_image(n: Node) -> np.ndarray:
    return as_integer(weight_image(n.attrs["weight"], weight_params(n)))


def _linear_range(qw: np.ndarray, x: QuantSpec, qb) -> tuple[int, int]:
    xlo, xhi = min(x.lo, 0), max(x.hi, 0)  # zero padding contributes 0
    w = qw.reshape(qw.shape[0], -1).astype(object)
    a, b = w * xlo, w * xhi
    lo = np.minimum(a, b).sum(axis=1)
    hi = np.maximum(a, b).sum(axis=1)
    if qb is not None:
        lo = lo + qb.astype(object)
        hi = hi + qb.astype(object)
    return int(min(lo)), int(max(hi))


def lambda_requant(eps_lambda: float, eps_out: float) -> RequantParams:
    """The D=1 requantization of the BN offset into the BN output space."""
    return RequantParams.build(eps_lambda, eps_out, 0)


def _branch_range(r: Fraction, spec: QuantSpec) -> tuple[int, int]:
    return math.floor(r * min(spec.lo, 0)), math.floor(r * max(spec.hi, 0))


def set_deployment(g: Graph, eps_in: float = 1.0 / 255) -> Graph:
    """Propagate quanta and integer ranges from the input to every node."""
    _require(g, "set_deployment", reps=(FQ,), need=("bn_quantizer", "harden_weights"))
    if not eps_in > 0:
        raise ValueError("eps_in must be positive")
    specs: dict[str, QuantSpec] = {}
    nodes: dict[str, Node] = {}
    for n in g:
        ins = [specs[i] for i in n.inputs]
        a = n.attrs
        if n.op == Op.INPUT:
            if a.get("alpha", 0.0) != 0.0:
                raise PassOrderError("input has a non-zero offset; run add_input_bias first")
            spec = QuantSpec.unsigned(eps_in, int(a.get("bits", 8)))
        elif n.is_linear:
            if "w_bits" not in a:
                raise MissingQuantParamsError(f"linear node {n.id!r} has no weight quantizer")
            x = ins[0]
            eps_phi = weight_params(n).eps_w * x.eps
            qb = bias_image(a["bias"], eps_phi) if a.get("bias") is not None else None
            lo, hi = _linear_range(weight_integer_image(n), x, qb)
            spec = QuantSpec.spanning(eps_phi, lo, hi)
            if qb is not None:
                # the bias joins the accumulator's lattice
                n = n.with_attrs(bias=as_real(eps_phi * qb.astype(np.float64)))
        elif n.op == Op.BATCH_NORM:
            p = bn_params(n)
            x = ins[0]
            eps_out = p.eps_kappa * x.eps
            q_lam = lambda_requant(p.eps_lambda, eps_out).m * p.q_lambda.astype(object)
            qk = p.q_kappa.astype(object)
            cand = [qk * x.lo + q_lam, qk * x.hi + q_lam]
            spec = QuantSpec.spanning(eps_out, int(min(np.minimum(*cand))),
                                      int(max(np.maximum(*cand))))
        elif n.is_activation:
            if "bits" not in a or "beta_y" not in a:
                raise MissingQuantParamsError(f"activation {n.id!r} has no quantizer")
            spec = act_params(n).spec
        elif n.op == Op.ADD:
            ref = ins[0]
            lo, hi = ref.lo, ref.hi
            for s in ins[1:]:
                blo, bhi = _branch_range(Fraction(s.eps) / Fraction(ref.eps), s)
                lo, hi = lo + blo, hi + bhi
            spec = QuantSpec.spanning(ref.eps, lo, hi)
        elif n.op == Op.AVG_POOL:
            x = ins[0]
            spec = QuantSpec.spanning(x.eps, min(x.lo, 0), max(x.hi, 0))
        else:  # max pool, output
            spec = ins[0]
        specs[n.id] = spec
        nodes[n.id] = replace(n, out_spec=spec)
    return _finish(g.with_pass("set_deployment", [nodes[k] for k in g.nodes],
                               representation=QD, eps_in=float(eps_in)))


# -- threshold merging -------------------------------------------------------

def bn_thresholds(gamma, sigma, mu, beta, eps_phi: float, eps_y: float, levels: int) -> np.ndarray:
    """Integer thresholds ``ceil((sigma/gamma*i*eps_y - beta*sigma/gamma + mu)/eps_phi)``
    for ``i = 0..levels``, one row per channel, in exact rational arithmetic."""
    gamma, sigma, mu, beta = (np.atleast_1d(np.asarray(v, dtype=np.float64))
                              for v in (gamma, sigma, mu, beta))
    e_phi, e_y = _decimal(eps_phi), _decimal(eps_y)
    rows = []
    for g, s, m, b in zip(gamma, sigma, mu, beta):
        g, s, m, b = map(_decimal, (g, s, m, b))
        if g <= 0 or s <= 0:
            raise NonMonotoneThresholdsError("thresholds need gamma > 0 and sigma > 0")
        ratio = s / g
        base = m - b * ratio
        row = [math.ceil((ratio * i * e_y + base) / e_phi) for i in range(levels + 1)]
        rows.append([min(max(t, INT64_MIN), INT64_MAX) for t in row])
    th = as_integer(np.array(rows, dtype=object))
    if np.any(np.diff(th, axis=1) < 0):
        raise NonMonotoneThresholdsError("threshold table is not monotone")
    return th


def _threshold_candidates(g: Graph):
    for act in g.nodes_of(Op.ACTIVATION):
        bn = g.producer(act)
        if bn.op != Op.BATCH_NORM:
            continue
        lin = g.producer(bn)
        if lin.is_linear:
            yield lin, bn, act


def merge_bn_thresholds(g: Graph, layer_selector: Callable[[str], bool] | Collection[str] | None = None) -> Graph:
    """Replace selected Linear -> BatchNorm -> Activation spans' BN and Activation
    with one ThresholdActivation (keeping the Activation's id)."""
    _require(g, "merge_bn_thresholds", reps=(QD,))
    if layer_selector is None:
        chosen = lambda _k: True  # noqa: E731
    elif callable(layer_selector):
        chosen = layer_selector
    else:
        wanted = set(layer_selector)
        chosen = wanted.__contains__
    nodes = dict(g.nodes)
    merged = 0
    for lin, bn, act in _threshold_candidates(g):
        if not chosen(act.id):
            continue
        p = act_params(act)
        if p.bits > MAX_THRESHOLD_BITS:
            raise ThresholdTableError(
                f"{act.id!r}: {p.bits}-bit output needs {p.levels + 1} thresholds per "
                f"channel; thresholds are limited to {MAX_THRESHOLD_BITS} bits"
            )
        a = bn.attrs
        th = bn_thresholds(a["gamma"], a["sigma"], a["mu"], a["beta"],
                           lin.out_spec.eps, p.eps_y, p.levels)
        nodes[act.id] = Node(
            act.id, Op.THRESHOLD_ACTIVATION, (lin.id,),
            dict(thresholds=th, bits=p.bits, beta_y=p.beta_y,
                 gamma=a["gamma"], sigma=a["sigma"], mu=a["mu"], beta=a["beta"]),
            act.out_spec,
        )
        del nodes[bn.id]
        merged += 1
    log.info("merged %d BN+activation spans into thresholds", merged)
    return _finish(g.with_pass("merge_bn_thresholds", nodes.values()))


# -- integerization ----------------------------------------------------------

def avgpool_shift(kernel_elems: int, factor: int) -> int:
    """Smallest d with ``1 - floor(2^d/K)*K/2^d <= 1/factor``."""
    d = 0
    while True:
        m = (1 << d) // kernel_elems
        if Fraction(1) - Fraction(m * kernel_elems, 1 << d) <= Fraction(1, factor):
            return d
        d += 1


def integerize(g: Graph, eps_in: float | None = None,
               requant_factor_act: int = DEFAULT_ACT_FACTOR,
               requant_factor_add: int = DEFAULT_ADD_FACTOR) -> Graph:
    """Replace every real parameter by an integer image and attach requantization
    parameters, producing an IntegerDeployable graph."""
    _require(g, "integerize", reps=(QD,), need=("set_deployment",))
    if eps_in is not None and eps_in != g.eps_in:
        raise PassOrderError(f"graph was deployed with eps_in={g.eps_in}, not {eps_in}")
    nodes = []
    for n in g:
        a = n.attrs
        ins = [g.nodes[i].out_spec for i in n.inputs]
        if n.is_linear:
            x = ins[0]
            if x.alpha != 0:
                raise PassOrderError(f"{n.id!r} consumes an input with non-zero offset")
            p = weight_params(n)
            attrs = dict(weight=weight_integer_image(n), w_eps=p.eps_w, w_bits=p.bits)
            for k in ("stride", "padding"):
                if k in a:
                    attrs[k] = a[k]
            if a.get("bias") is not None:
                attrs["bias"] = bias_image(a["bias"], n.out_spec.eps)
            n = replace(n, attrs=attrs)
        elif n.op == Op.BATCH_NORM:
            p = bn_params(n)
            rq = lambda_requant(p.eps_lambda, n.out_spec.eps)
            if rq.m == 0 and np.any(p.q_lambda != 0):
                warnings.warn(
                    f"BN {n.id!r}: eps_lambda/eps_out = {p.eps_lambda / n.out_spec.eps:.3g} "
                    "floors to 0 with D=1; the offset is lost",
                    LambdaUnderflowWarning, stacklevel=2,
                )
            q_acc = as_integer(p.q_lambda.astype(object) * rq.m)
            n = replace(n, attrs=dict(q_kappa=p.q_kappa, q_lambda=p.q_lambda, q_lambda_acc=q_acc,
                                      eps_kappa=p.eps_kappa, eps_lambda=p.eps_lambda,
                                      bn_bits=p.bits, lambda_requant=rq))
        elif n.op == Op.ACTIVATION:
            x = ins[0]
            ap = act_params(n)
            d = choose_shift(x.eps, ap.eps_y, requant_factor_act, x.magnitude)
            rq = RequantParams.build(x.eps, ap.eps_y, d, x.magnitude)
            n = replace(n, attrs=dict(bits=ap.bits, beta_y=ap.beta_y, requant=rq))
        elif n.op == Op.THRESHOLD_ACTIVATION:
            n = replace(n, attrs=dict(thresholds=a["thresholds"], bits=a["bits"],
                                      beta_y=a["beta_y"]))
        elif n.op == Op.ADD:
            ref = ins[0]
            rqs = []
            for s in ins[1:]:
                d = choose_shift(s.eps, ref.eps, requant_factor_add, s.magnitude)
                rqs.append(RequantParams.build(s.eps, ref.eps, d, s.magnitude))
            n = n.with_attrs(requant=rqs)
        elif n.op == Op.AVG_POOL:
            kh, kw = (a["kernel"], a["kernel"]) if np.isscalar(a["kernel"]) else a["kernel"]
            k = int(kh) * int(kw)
            d = avgpool_shift(k, requant_factor_act)
            n = n.with_attrs(requant=avgpool_params(a["kernel"], d, k * ins[0].magnitude))
        nodes.append(n)
    by_id = {n.id: n for n in nodes}
    return _finish(g.with_pass("integerize", [by_id[k] for k in g.nodes], representation=ID))


def lower(g: Graph, bn_strategy: str = "integer", bits_bn: int = 8,
          eps_in: float = 1.0 / 255, threshold_selector=None) -> Graph:
    """FakeQuantized -> QuantizedDeployable with a chosen BatchNorm strategy:
    ``fold`` (fold into Linear), ``integer`` (integer BN), ``thresholds``."""
    if bn_strategy not in ("fold", "integer", "thresholds"):
        raise ValueError(f"unknown bn strategy {bn_strategy!r}")
    if bn_strategy == "fold":
        g = fold_bn(g)
    g = bn_quantizer(g, bits_bn)
    g = harden_weights(g)
    g = set_deployment(g, eps_in)
    if bn_strategy == "thresholds":
        g = merge_bn_thresholds(g, threshold_selector)
    return g
