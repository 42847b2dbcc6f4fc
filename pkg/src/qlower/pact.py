"""PACT-style fake quantization of activations and weights, the
straight-through backward rules, and min/max calibration of clip bounds."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import (
    DegenerateCalibrationWarning,
    EmptyCalibrationSetError,
    NotCalibratedError,
    PassOrderError,
    ShapeMismatchError,
)
from .graph import FP, FQ, Graph, Node, Op
from .tensor import QuantSpec, as_real, snap_floor

log = logging.getLogger(__name__)

MIN_BETA = 2.0**-20


@dataclass(frozen=True)
class ActQuantParams:
    beta_y: float
    bits: int

    def __post_init__(self):
        if not self.beta_y > 0:
            raise ValueError(f"beta_y must be positive, got {self.beta_y}")

    @property
    def levels(self) -> int:
        return 2**self.bits - 1

    @property
    def eps_y(self) -> float:
        return self.beta_y / self.levels

    @property
    def spec(self) -> QuantSpec:
        return QuantSpec.unsigned(self.eps_y, self.bits)


@dataclass(frozen=True)
class WeightQuantParams:
    alpha_w: float
    beta_w: float
    bits: int

    def __post_init__(self):
        if not self.alpha_w < self.beta_w:
            raise ValueError(f"need alpha_w < beta_w, got [{self.alpha_w}, {self.beta_w}]")

    @property
    def eps_w(self) -> float:
        return (self.beta_w - self.alpha_w) / (2**self.bits - 1)

    @property
    def spec(self) -> QuantSpec:
        lo = int(snap_floor(self.alpha_w / self.eps_w))
        return QuantSpec(eps=self.eps_w, alpha=0.0, bits=self.bits,
                         lo=lo, hi=lo + 2**self.bits - 1)


def act_params(node: Node) -> ActQuantParams:
    return ActQuantParams(float(node.attrs["beta_y"]), int(node.attrs["bits"]))


def weight_params(node: Node) -> WeightQuantParams:
    return WeightQuantParams(float(node.attrs["w_alpha"]), float(node.attrs["w_beta"]),
                             int(node.attrs["w_bits"]))


def act_image(phi: np.ndarray, p: ActQuantParams) -> np.ndarray:
    """Integer image ``clip(floor(clip(phi, 0, beta)/eps), 0, 2^Q-1)`` as float64."""
    k = snap_floor(np.clip(phi, 0.0, p.beta_y) / p.eps_y)
    return np.clip(k, 0.0, float(p.levels))


def weight_image(w: np.ndarray, p: WeightQuantParams) -> np.ndarray:
    spec = p.spec
    k = snap_floor(np.clip(w, p.alpha_w, p.beta_w) / p.eps_w)
    return np.clip(k, float(spec.lo), float(spec.hi))


def fq_act_forward(phi: np.ndarray, p: ActQuantParams) -> np.ndarray:
    return as_real(p.eps_y * act_image(phi, p))


def fq_weight_forward(w: np.ndarray, p: WeightQuantParams) -> np.ndarray:
    return as_real(p.eps_w * weight_image(w, p))


def _masked(upstream, values, lo, hi) -> np.ndarray:
    upstream = np.asarray(upstream, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if upstream.shape != values.shape:
        raise ShapeMismatchError(f"upstream {upstream.shape} vs input {values.shape}")
    inside = (values >= lo) & (values < hi)
    return as_real(np.where(inside, upstream, 0.0))


def ste_act_backward(upstream, phi, p: ActQuantParams) -> np.ndarray:
    """Pass ``upstream`` where ``0 <= phi < beta_y``, zero elsewhere."""
    return _masked(upstream, phi, 0.0, p.beta_y)


def ste_weight_backward(upstream, w, p: WeightQuantParams) -> np.ndarray:
    return _masked(upstream, w, p.alpha_w, p.beta_w)


def weight_clip_bounds(w: np.ndarray) -> tuple[float, float]:
    lo, hi = float(np.min(w)), float(np.max(w))
    if lo == hi:
        # constant weight tensors still need eps_w > 0
        lo, hi = min(lo, 0.0), max(hi, 0.0)
        if lo == hi:
            hi = lo + MIN_BETA
    return lo, hi


def calibrate(g: Graph, batches: Iterable[np.ndarray]) -> Graph:
    """Set activation clip bounds to the observed output maxima and weight
    clip bounds to the weight min/max. The graph stays FullPrecision."""
    from .interpreter import run

    if g.representation != FP:
        raise PassOrderError(f"calibrate needs a FullPrecision graph, got {g.representation.value}")
    acts = [n.id for n in g.nodes_of(Op.ACTIVATION)]
    peak = {k: -math.inf for k in acts}
    seen = 0
    for x in batches:
        _, trace = run(g, x)
        for k in acts:
            peak[k] = max(peak[k], float(np.max(trace.outputs[k])))
        seen += 1
    if not seen:
        raise EmptyCalibrationSetError("calibration needs at least one input")

    nodes = []
    for n in g.nodes.values():
        if n.op == Op.ACTIVATION:
            beta = peak[n.id]
            if not beta > MIN_BETA:
                warnings.warn(
                    f"activation {n.id!r} peaked at {beta:g} during calibration; "
                    f"clipping bound floored to {MIN_BETA:g}",
                    DegenerateCalibrationWarning,
                    stacklevel=2,
                )
                beta = MIN_BETA
            n = n.with_attrs(beta_y=beta)
        elif n.is_linear:
            a, b = weight_clip_bounds(n.attrs["weight"])
            n = n.with_attrs(w_alpha=a, w_beta=b)
        nodes.append(n)
    log.info("calibrated %d activations over %d inputs", len(acts), seen)
    return g.with_pass("calibrate", nodes)


def to_fakequantized(g: Graph, bits_a: int = 8, bits_w: int = 8) -> Graph:
    if g.representation != FP:
        raise PassOrderError(f"to_fakequantized needs FullPrecision, got {g.representation.value}")
    nodes = []
    for n in g.nodes.values():
        if n.op == Op.ACTIVATION:
            if "beta_y" not in n.attrs:
                raise NotCalibratedError(f"activation {n.id!r} has no clip bound")
            n = n.with_attrs(bits=int(bits_a))
        elif n.is_linear:
            if "w_alpha" not in n.attrs:
                raise NotCalibratedError(f"linear node {n.id!r} has no weight clip bounds")
            n = n.with_attrs(w_bits=int(bits_w))
        nodes.append(n)
    return g.with_pass("to_fakequantized", nodes, representation=FQ)
