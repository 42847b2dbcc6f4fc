"""Reference executor for graphs in all four representations.

The IntegerDeployable path computes on int64 images only. Every arithmetic
step reports its result array to an :class:`OpTally`, which classifies the
work by dtype, so a trace shows whether any real-valued arithmetic ran.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .errors import (
    IntegerOverflowError,
    KindMismatchError,
    OutOfRangeError,
    PassOrderError,
    ShapeMismatchError,
    UnsupportedOpError,
)
from .graph import FP, FQ, ID, QD, Graph, Node, Op
from .pact import act_params, fq_act_forward, fq_weight_forward, weight_params
from .requant import RequantParams, requantize
from .tensor import (
    INT64_MAX,
    INTEGER,
    REAL,
    as_integer,
    as_real,
    decimal_fraction,
    kind_of,
    quantize_linear,
    snap_floor,
)


@dataclass
class OpTally:
    integer_ops: int = 0
    real_ops: int = 0

    def count(self, result: np.ndarray, n: int | None = None) -> np.ndarray:
        n = result.size if n is None else n
        if result.dtype.kind == "f":
            self.real_ops += n
        else:
            self.integer_ops += n
        return result


@dataclass
class ExecTrace:
    outputs: dict[str, np.ndarray] = field(default_factory=dict)
    tallies: dict[str, OpTally] = field(default_factory=dict)
    peak: dict[str, int] = field(default_factory=dict)

    @property
    def real_ops(self) -> int:
        return sum(t.real_ops for t in self.tallies.values())

    @property
    def integer_ops(self) -> int:
        return sum(t.integer_ops for t in self.tallies.values())


def _magnitude(a: np.ndarray) -> int:
    if a.size == 0:
        return 0
    return max(abs(int(a.min())), abs(int(a.max())))


def _channel(v: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a per-channel vector to broadcast over a (C, ...) tensor."""
    return np.asarray(v).reshape((-1,) + (1,) * (ndim - 1))


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (list, tuple)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# -- linear -------------------------------------------------------------------

def _conv2d(x, w, bias, stride, padding, tally: OpTally):
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ShapeMismatchError(f"conv input {x.shape} vs weight {w.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oc, ic, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    oh = (xp.shape[1] - kh) // sh + 1
    ow = (xp.shape[2] - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatchError(f"kernel {kh}x{kw} larger than padded input {xp.shape[1:]}")
    acc = np.zeros((oc, oh, ow), dtype=np.result_type(x, w))
    # fixed summation order: input channel innermost, then kernel position
    for i in range(kh):
        for j in range(kw):
            for c in range(ic):
                patch = xp[c, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw]
                prod = tally.count(w[:, c, i, j][:, None, None] * patch[None])
                acc = tally.count(acc + prod)
    if bias is not None:
        acc = tally.count(acc + _channel(bias, 3))
    return acc


def _fully_connected(x, w, bias, tally: OpTally):
    flat = x.reshape(-1)
    if w.ndim != 2 or w.shape[1] != flat.size:
        raise ShapeMismatchError(f"fully-connected input of {flat.size} vs weight {w.shape}")
    acc = np.zeros(w.shape[0], dtype=np.result_type(x, w))
    for c in range(flat.size):
        acc = tally.count(acc + tally.count(w[:, c] * flat[c]))
    if bias is not None:
        acc = tally.count(acc + bias)
    return acc


def _linear_bound(qw: np.ndarray, qx: np.ndarray, qb) -> int:
    per_out = np.abs(qw.reshape(qw.shape[0], -1)).astype(object).sum(axis=1)
    worst = int(max(per_out)) * _magnitude(qx) if qw.size else 0
    if qb is not None:
        worst += _magnitude(qb)
    return worst


def kernel_linear_int(qw: np.ndarray, qx: np.ndarray, qb: np.ndarray | None = None,
                      stride=1, padding=0, tally: OpTally | None = None) -> np.ndarray:
    """Integer image of a Linear operator: ``sum_n qw_n * qx_n (+ qb)``."""
    tally = tally if tally is not None else OpTally()
    for name, t in (("weight", qw), ("input", qx), ("bias", qb)):
        if t is not None and kind_of(t) != INTEGER:
            raise KindMismatchError(f"integer linear kernel got a real {name}")
    if _linear_bound(qw, qx, qb) > INT64_MAX:
        # the worst case can exceed 64 bits; redo exactly and fail only on a real overflow
        res = _linear(qx.astype(object), qw.astype(object),
                      None if qb is None else qb.astype(object), stride, padding, tally)
        if _magnitude(res) > INT64_MAX:
            raise IntegerOverflowError("linear accumulator exceeds 64 bits")
        return as_integer(res)
    return as_integer(_linear(qx, qw, qb, stride, padding, tally))


def _lattice(x: np.ndarray, eps: float):
    """Integer coordinates (as float64) of an on-lattice real tensor, or None."""
    k = np.rint(x / eps)
    if np.all(np.abs(x / eps - k) <= 1e-9 * np.maximum(1.0, np.abs(k))):
        return k
    return None


def _lattice_linear(x, eps_x, n: Node, tally):
    """Real value of a Linear node whose input and weights sit on lattices:
    ``eps_phi * (sum k_w * k_x + k_b)``, with a single final rounding."""
    kx = _lattice(x, eps_x)
    if kx is None:
        return None
    a = n.attrs
    p = weight_params(n)
    kw = _lattice(a["weight"], p.eps_w)
    eps_phi = p.eps_w * eps_x
    kb = None if a.get("bias") is None else _lattice(a["bias"], eps_phi)
    if kw is None or (a.get("bias") is not None and kb is None):
        return None
    if _linear_bound(kw.astype(np.int64), kx.astype(np.int64),
                     None if kb is None else kb.astype(np.int64)) >= 2**53:
        return None
    acc = _linear(kx, kw, kb, a.get("stride", 1), a.get("padding", 0), tally)
    return tally.count(eps_phi * acc)


def _linear(x, w, b, stride, padding, tally):
    if w.ndim == 4:
        return _conv2d(x, w, b, stride, padding, tally)
    return _fully_connected(x, w, b, tally)


# -- batch norm -------------------------------------------------------------

def _bn_real(phi, gamma, sigma, mu, beta, tally):
    nd = phi.ndim
    k = _channel(np.asarray(gamma) / np.asarray(sigma), nd)
    out = tally.count(k * tally.count(phi - _channel(mu, nd)))
    return tally.count(out + _channel(beta, nd))


def _bn_affine(phi, kappa, lam, tally):
    nd = phi.ndim
    return tally.count(tally.count(_channel(kappa, nd) * phi) + _channel(lam, nd))


def kernel_bn_int(qphi: np.ndarray, q_kappa: np.ndarray, q_lambda: np.ndarray,
                  tally: OpTally | None = None) -> np.ndarray:
    """``q_kappa * q_phi + q_lambda`` per channel; ``q_lambda`` already in the output space."""
    tally = tally if tally is not None else OpTally()
    if _magnitude(q_kappa) * _magnitude(qphi) + _magnitude(q_lambda) > INT64_MAX:
        raise IntegerOverflowError("integer batch-norm exceeds 64 bits")
    return as_integer(_bn_affine(qphi, q_kappa, q_lambda, tally))


# -- activations ------------------------------------------------------------

def kernel_act_int(q: np.ndarray, p: RequantParams, lo: int, hi: int,
                   tally: OpTally | None = None) -> np.ndarray:
    tally = tally if tally is not None else OpTally()
    r = tally.count(requantize(q, p), 2 * q.size)
    return as_integer(tally.count(np.clip(r, lo, hi)))


def kernel_threshold_act(q: np.ndarray, thresholds: np.ndarray,
                         tally: OpTally | None = None) -> np.ndarray:
    """Count of ``TH_1..TH_N`` at or below each input, per channel."""
    tally = tally if tally is not None else OpTally()
    th = np.asarray(thresholds)
    if th.ndim == 1:
        th = th[None, :]
    if np.any(np.diff(th, axis=1) < 0):
        raise ValueError("threshold table is not monotone")
    if th.shape[0] not in (1, q.shape[0] if q.ndim else 1):
        raise ShapeMismatchError(f"{th.shape[0]} threshold rows for {q.shape[0]} channels")
    out = np.empty(q.shape, dtype=np.int64)
    levels = th.shape[1] - 1
    for c in range(q.shape[0] if q.ndim else 1):
        row = th[c if th.shape[0] > 1 else 0, 1:]
        src = q[c] if q.ndim else q
        res = np.searchsorted(row, src, side="right").astype(np.int64)
        # binary search: about log2(N) integer comparisons per element
        tally.count(res, res.size * max(1, levels.bit_length()))
        if q.ndim:
            out[c] = res
        else:
            out[...] = res
    return as_integer(out)


def exact_bn_levels(phi, gamma, sigma, mu, beta, eps_y, levels, eps_phi=None,
                    tally=None) -> np.ndarray:
    """``clip(floor((gamma/sigma*(phi-mu)+beta)/eps_y), 0, levels)`` as float64.

    With ``eps_phi`` the input is read as the lattice point ``eps_phi*k``.
    Elements close to a level boundary are re-evaluated in exact rationals.
    """
    tally = tally if tally is not None else OpTally()
    nd = phi.ndim
    coord = None
    if eps_phi is not None:
        coord = tally.count(snap_floor(phi / eps_phi), 2 * phi.size)
        phi = tally.count(eps_phi * coord)
    g, s, m, b = (np.broadcast_to(_channel(np.asarray(v, dtype=np.float64), nd), phi.shape)
                  for v in (gamma, sigma, mu, beta))
    v = tally.count(((g / s) * (phi - m) + b) / eps_y, 5 * phi.size)
    k = np.floor(v)
    near = np.abs(v - np.rint(v)) < 1e-6 * np.maximum(1.0, np.abs(v))
    if np.any(near):
        fe = decimal_fraction(eps_y)
        for idx in zip(*np.nonzero(near)):
            if coord is not None:
                x = decimal_fraction(eps_phi) * int(coord[idx])
            else:
                x = decimal_fraction(phi[idx])
            gs = decimal_fraction(g[idx]) / decimal_fraction(s[idx])
            val = (gs * (x - decimal_fraction(m[idx])) + decimal_fraction(b[idx])) / fe
            k[idx] = math.floor(val)
    return np.clip(k, 0.0, float(levels))


# -- add & pooling ------------------------------------------------------------

def kernel_add_int(q_ref: np.ndarray, others, tally: OpTally | None = None) -> np.ndarray:
    """``q_ref + sum(requantize(q_i, p_i))`` with the first branch as reference."""
    tally = tally if tally is not None else OpTally()
    acc = q_ref
    total = _magnitude(q_ref)
    for q, p in others:
        if q.shape != q_ref.shape:
            raise ShapeMismatchError(f"add branch {q.shape} vs reference {q_ref.shape}")
        r = tally.count(requantize(q, p), 2 * q.size)
        total += _magnitude(r)
        if total > INT64_MAX:
            raise IntegerOverflowError("integer add exceeds 64 bits")
        acc = tally.count(acc + r)
    return as_integer(acc)


def _windows(x, kernel, stride):
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    c, h, w = x.shape
    oh, ow = (h - kh) // sh + 1, (w - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatchError(f"pool window {kh}x{kw} larger than input {x.shape[1:]}")
    for i in range(kh):
        for j in range(kw):
            yield x[:, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw]


def kernel_maxpool(x: np.ndarray, kernel, stride=None, tally: OpTally | None = None):
    tally = tally if tally is not None else OpTally()
    it = _windows(x, kernel, stride)
    out = next(it)
    for win in it:
        out = tally.count(np.maximum(out, win))
    return out


def _window_sum(x, kernel, stride, tally):
    it = _windows(x, kernel, stride)
    acc = next(it)
    for win in it:
        acc = tally.count(acc + win)
    return acc


def kernel_avgpool_int(q: np.ndarray, kernel, stride, p: RequantParams,
                       tally: OpTally | None = None) -> np.ndarray:
    """``(floor(2^d/(K1*K2)) * window_sum) >> d``."""
    tally = tally if tally is not None else OpTally()
    s = as_integer(_window_sum(q, kernel, stride, tally))
    return as_integer(tally.count(requantize(s, p), 2 * s.size))


def avgpool_params(kernel, d: int, source_magnitude: int | None = None) -> RequantParams:
    kh, kw = _pair(kernel)
    return RequantParams.build(1.0, float(kh * kw), d, source_magnitude)


# -- dispatch ---------------------------------------------------------------

def integer_input(g: Graph, x: np.ndarray) -> np.ndarray:
    """Integer image of a real network input in the graph's input space."""
    return quantize_linear(np.asarray(x, dtype=np.float64), g.input_node.out_spec)


def _check_input(g: Graph, x: np.ndarray) -> np.ndarray:
    node = g.input_node
    want = INTEGER if g.representation == ID else REAL
    if kind_of(x) != want:
        raise KindMismatchError(
            f"{g.representation.value} graph expects a {want} input, got {kind_of(x)}"
        )
    shape = tuple(node.attrs.get("shape", x.shape))
    if x.shape != shape:
        raise ShapeMismatchError(f"input shape {x.shape} != declared {shape}")
    if want == INTEGER:
        spec = node.out_spec
        if x.size and (x.min() < spec.lo or x.max() > spec.hi):
            raise OutOfRangeError(f"integer input outside [{spec.lo}, {spec.hi}]")
    return x


def _eval(g: Graph, n: Node, args: list[np.ndarray], tally: OpTally) -> np.ndarray:
    rep = g.representation
    a = n.attrs
    op = n.op

    if op == Op.INPUT:
        x = args[0]
        if rep == QD:
            spec = n.out_spec
            return tally.count(spec.eps * quantize_linear(x, spec).astype(np.float64))
        return x

    if op == Op.OUTPUT:
        return args[0]

    (x, *rest) = args

    if op in (Op.CONV2D, Op.FULLY_CONNECTED):
        w, b = a["weight"], a.get("bias")
        if rep == ID:
            return kernel_linear_int(w, x, b, a.get("stride", 1), a.get("padding", 0), tally)
        if rep == FQ and "w_bits" in a:
            w = fq_weight_forward(w, weight_params(n))
        if rep == QD:
            out = _lattice_linear(x, g.producer(n).out_spec.eps, n, tally)
            if out is not None:
                return out
        return _linear(x, w, b, a.get("stride", 1), a.get("padding", 0), tally)

    if op == Op.BATCH_NORM:
        if rep == ID:
            return kernel_bn_int(x, a["q_kappa"], a["q_lambda_acc"], tally)
        if rep in (FQ, QD) and "q_kappa" in a:
            kappa = a["eps_kappa"] * a["q_kappa"].astype(np.float64)
            lam = a["eps_lambda"] * a["q_lambda"].astype(np.float64)
            return _bn_affine(x, kappa, lam, tally)
        return _bn_real(x, a["gamma"], a["sigma"], a["mu"], a["beta"], tally)

    if op == Op.ACTIVATION:
        if rep == ID:
            return kernel_act_int(x, a["requant"], 0, 2 ** int(a["bits"]) - 1, tally)
        if rep == FP:
            return tally.count(np.maximum(x, 0.0))
        p = act_params(n)
        return tally.count(fq_act_forward(x, p), 3 * x.size)

    if op == Op.THRESHOLD_ACTIVATION:
        if rep == ID:
            return kernel_threshold_act(x, a["thresholds"], tally)
        if rep != QD:
            raise UnsupportedOpError("threshold activations exist only in deployable graphs")
        p = act_params(n)
        k = exact_bn_levels(x, a["gamma"], a["sigma"], a["mu"], a["beta"],
                            p.eps_y, p.levels, g.producer(n).out_spec.eps, tally)
        return tally.count(p.eps_y * k)

    if op == Op.ADD:
        if rep == ID:
            return kernel_add_int(x, list(zip(rest, a["requant"])), tally)
        acc = x
        for r in rest:
            if r.shape != x.shape:
                raise ShapeMismatchError(f"add branch {r.shape} vs {x.shape}")
            acc = tally.count(acc + r)
        return acc

    if op == Op.MAX_POOL:
        return kernel_maxpool(x, a["kernel"], a.get("stride"), tally)

    if op == Op.AVG_POOL:
        if rep == ID:
            return kernel_avgpool_int(x, a["kernel"], a.get("stride"), a["requant"], tally)
        kh, kw = _pair(a["kernel"])
        if rep == QD:
            eps = n.out_spec.eps
            k = _lattice(x, eps)
            if k is not None:
                s = _window_sum(k, a["kernel"], a.get("stride"), tally)
                return tally.count(eps * tally.count(np.floor_divide(s, kh * kw)))
            mean = tally.count(_window_sum(x, a["kernel"], a.get("stride"), tally) / (kh * kw))
            return tally.count(eps * snap_floor(mean / eps), 3 * mean.size)
        return tally.count(_window_sum(x, a["kernel"], a.get("stride"), tally) / (kh * kw))

    raise UnsupportedOpError(f"no semantics for {op.value}")


def run(g: Graph, x: np.ndarray) -> tuple[np.ndarray, ExecTrace]:
    """Execute ``g`` on one input in topological order."""
    if g.representation in (QD, ID) and g.input_node.out_spec is None:
        raise PassOrderError("deployable graph has no input quantized space")
    x = _check_input(g, np.asarray(x))
    trace = ExecTrace()
    for n in g:
        tally = OpTally()
        args = [x] if n.op == Op.INPUT else [trace.outputs[i] for i in n.inputs]
        out = _eval(g, n, args, tally)
        out = as_integer(out) if g.representation == ID else as_real(out)
        trace.outputs[n.id] = out
        trace.tallies[n.id] = tally
        if g.representation == ID:
            trace.peak[n.id] = _magnitude(out)
    return trace.outputs[g.output_node.id], trace
