"""Requantization: move an integer image between quantized spaces with an
integer multiply followed by an arithmetic right shift."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import IntegerOverflowError, KindMismatchError, OverflowUnsatisfiableError
from .tensor import INT64_MAX, INTEGER, as_integer, kind_of

MAX_SHIFT = 62
DEFAULT_ACT_FACTOR = 16
DEFAULT_ADD_FACTOR = 256


def exact_ratio(num: float, den: float) -> Fraction:
    return Fraction(num) / Fraction(den)


def multiplier(source_eps: float, target_eps: float, d: int) -> int:
    """``floor(source_eps * 2**d / target_eps)`` by integer cross-multiplication."""
    return math.floor(exact_ratio(source_eps, target_eps) * (1 << d))


@dataclass(frozen=True)
class RequantParams:
    m: int
    d: int
    source_eps: float
    target_eps: float
    source_magnitude: int | None = None

    def __post_init__(self):
        if not 0 <= self.d <= MAX_SHIFT:
            raise ValueError(f"shift {self.d} outside [0, {MAX_SHIFT}]")
        if self.m < 0:
            raise ValueError("multiplier must be non-negative")
        if self.m != multiplier(self.source_eps, self.target_eps, self.d):
            raise ValueError(
                f"m={self.m} is not floor({self.source_eps}*2^{self.d}/{self.target_eps})"
            )
        if self.source_magnitude is not None and self.m * self.source_magnitude > INT64_MAX:
            raise IntegerOverflowError(
                f"m={self.m} times |q|<={self.source_magnitude} exceeds 63 bits"
            )

    @classmethod
    def build(cls, source_eps: float, target_eps: float, d: int,
              source_magnitude: int | None = None) -> "RequantParams":
        return cls(multiplier(source_eps, target_eps, d), d, float(source_eps),
                   float(target_eps), source_magnitude)

    @property
    def ratio(self) -> Fraction:
        return exact_ratio(self.source_eps, self.target_eps)

    @property
    def abs_error(self) -> Fraction:
        """``ratio - m/2^d``; always in ``[0, 2^-d)``."""
        return self.ratio - Fraction(self.m, 1 << self.d)

    @property
    def rel_error(self) -> Fraction:
        return self.abs_error / self.ratio

    @property
    def is_exact(self) -> bool:
        return self.abs_error == 0

    def to_dict(self) -> dict:
        d = {"m": self.m, "d": self.d, "source_eps": self.source_eps,
             "target_eps": self.target_eps}
        if self.source_magnitude is not None:
            d["source_magnitude"] = self.source_magnitude
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RequantParams":
        mag = d.get("source_magnitude")
        return cls(int(d["m"]), int(d["d"]), float(d["source_eps"]),
                   float(d["target_eps"]), None if mag is None else int(mag))


def choose_shift(eps_a: float, eps_b: float, requantization_factor: int,
                 source_magnitude: int | None = None) -> int:
    """Smallest ``d`` with ``2^d >= eps_b * factor / eps_a``.

    That choice bounds the multiplier's relative error by ``1/factor``. A
    larger shift only grows ``m``, so if the smallest admissible shift
    overflows against ``source_magnitude`` no shift can work.
    """
    if eps_a <= 0 or eps_b <= 0:
        raise ValueError("quanta must be positive")
    if requantization_factor < 1:
        raise ValueError("requantization factor must be >= 1")
    need = exact_ratio(eps_b, eps_a) * requantization_factor
    d = 0
    while Fraction(1 << d) < need:
        d += 1
    if d > MAX_SHIFT:
        raise OverflowUnsatisfiableError(
            f"ratio {float(need):.3g} needs a shift beyond {MAX_SHIFT} bits"
        )
    if source_magnitude is not None:
        m = multiplier(eps_a, eps_b, d)
        if m * source_magnitude > INT64_MAX:
            raise OverflowUnsatisfiableError(
                f"shift {d} gives m={m}; m*{source_magnitude} exceeds 63 bits"
            )
    return d


def requantize(q: np.ndarray, p: RequantParams) -> np.ndarray:
    """``(m*q) >> d`` elementwise; the shift rounds toward minus infinity."""
    if kind_of(q) != INTEGER:
        raise KindMismatchError("requantize expects an Integer tensor")
    if q.size:
        peak = max(abs(int(q.min())), abs(int(q.max())))
        if p.m * peak > INT64_MAX:
            raise IntegerOverflowError(f"m={p.m} times |q|={peak} exceeds 63 bits")
    return as_integer(np.right_shift(q * np.int64(p.m), np.int64(p.d)))
