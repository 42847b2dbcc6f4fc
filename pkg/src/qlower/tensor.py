"""Real and integer tensors, quantized spaces, and the binary blob format.

Tensors are plain numpy arrays: ``float64`` arrays are Real tensors and
``int64`` arrays are Integer tensors. Arrays produced here are marked
read-only so they can be shared between graphs and threads.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import KindMismatchError, OutOfRangeError, ParseError, ShapeMismatchError

REAL = "real"
INTEGER = "integer"

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

# Values this close (relative) to a lattice point are treated as on it, so
# that floating-point images of lattice values floor back to themselves.
SNAP_RTOL = 1e-12

BLOB_MAGIC = b"QLTENSR\x00"
_KIND_CODES = {REAL: 0, INTEGER: 1}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def kind_of(t: np.ndarray) -> str:
    if t.dtype == np.float64:
        return REAL
    if t.dtype == np.int64:
        return INTEGER
    raise KindMismatchError(f"unsupported tensor dtype {t.dtype}")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def as_real(values) -> np.ndarray:
    return _frozen(np.array(values, dtype=np.float64))


def as_integer(values) -> np.ndarray:
    """Build an Integer tensor, rejecting values that are not exact integers."""
    a = np.asarray(values)
    if a.dtype.kind in "iub":
        return _frozen(a.astype(np.int64))
    if a.dtype == object:
        flat = [int(v) for v in a.ravel()]
        if any(v < INT64_MIN or v > INT64_MAX for v in flat):
            raise OutOfRangeError("value does not fit in 64 bits")
        return _frozen(np.array(flat, dtype=np.int64).reshape(a.shape))
    a = a.astype(np.float64)
    if not np.all(np.isfinite(a)) or np.any(a != np.floor(a)):
        raise KindMismatchError("integer tensor built from non-integral values")
    if a.size and (a.min() < -(2.0**63) or a.max() >= 2.0**63):
        raise OutOfRangeError("value does not fit in 64 bits")
    return _frozen(a.astype(np.int64))


@dataclass(frozen=True)
class QuantSpec:
    """A quantized space: integer images ``q`` in ``[lo, hi]`` stand for ``alpha + eps*q``."""

    eps: float
    alpha: float = 0.0
    bits: int = 8
    lo: int = 0
    hi: int = 255

    def __post_init__(self):
        if not (self.eps > 0 and math.isfinite(self.eps)):
            raise ValueError(f"quantum must be positive, got {self.eps}")
        if self.bits < 1:
            raise ValueError(f"bits must be positive, got {self.bits}")
        if self.lo > self.hi:
            raise ValueError(f"empty quantized space [{self.lo}, {self.hi}]")
        if self.hi - self.lo + 1 > 2**self.bits:
            raise ValueError(
                f"[{self.lo}, {self.hi}] needs more than {self.bits} bits"
            )

    @classmethod
    def spanning(cls, eps: float, lo: int, hi: int, alpha: float = 0.0) -> "QuantSpec":
        """Smallest-width spec covering ``[lo, hi]``."""
        lo, hi = int(lo), int(hi)
        bits = max(1, (hi - lo).bit_length())
        return cls(eps=float(eps), alpha=float(alpha), bits=bits, lo=lo, hi=hi)

    @classmethod
    def unsigned(cls, eps: float, bits: int) -> "QuantSpec":
        return cls(eps=float(eps), alpha=0.0, bits=bits, lo=0, hi=2**bits - 1)

    @property
    def magnitude(self) -> int:
        return max(abs(self.lo), abs(self.hi))

    def to_dict(self) -> dict:
        return {"eps": self.eps, "alpha": self.alpha, "bits": self.bits,
                "lo": self.lo, "hi": self.hi}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantSpec":
        return cls(eps=float(d["eps"]), alpha=float(d["alpha"]), bits=int(d["bits"]),
                   lo=int(d["lo"]), hi=int(d["hi"]))


def dequantize(q: np.ndarray, spec: QuantSpec) -> np.ndarray:
    if kind_of(q) != INTEGER:
        raise KindMismatchError("dequantize expects an Integer tensor")
    if q.size and (q.min() < spec.lo or q.max() > spec.hi):
        raise OutOfRangeError(
            f"integer image outside [{spec.lo}, {spec.hi}]: "
            f"[{int(q.min())}, {int(q.max())}]"
        )
    return _frozen(spec.alpha + spec.eps * q.astype(np.float64))


def snap_floor(k: np.ndarray) -> np.ndarray:
    """``floor`` that treats values within SNAP_RTOL of an integer as that integer."""
    k = np.asarray(k, dtype=np.float64)
    r = np.rint(k)
    near = np.abs(k - r) <= SNAP_RTOL * np.maximum(1.0, np.abs(r))
    return np.where(near, r, np.floor(k))


def quantize_linear(t: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Linear quantization ``clip(floor((t - alpha)/eps), lo, hi)`` with inclusive hi."""
    if kind_of(t) != REAL:
        raise KindMismatchError("quantize_linear expects a Real tensor")
    k = snap_floor((t - spec.alpha) / spec.eps)
    k = np.clip(k, float(spec.lo), float(spec.hi))
    return as_integer(k)


def decimal_fraction(x: float) -> Fraction:
    """A float read as its shortest round-trip decimal, as an exact rational.

    ``0.1`` becomes exactly 1/10, so parameters written as short decimals
    keep the ties their author intended.
    """
    return Fraction(repr(float(x)))


def exact_floor_div(num: float, den: float) -> int:
    """``floor(num/den)`` evaluated exactly on the binary values of two floats."""
    return math.floor(Fraction(num) / Fraction(den))


# -- binary blobs -----------------------------------------------------------

def encode_blob(t: np.ndarray) -> bytes:
    kind = kind_of(t)
    header = BLOB_MAGIC + struct.pack("<BB", _KIND_CODES[kind], t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    body = t.astype("<f8" if kind == REAL else "<i8").tobytes(order="C")
    return header + body


def decode_blob(data: bytes, *, source: str = "<bytes>") -> np.ndarray:
    if len(data) < 10 or data[:8] != BLOB_MAGIC:
        raise ParseError(f"{source}: bad tensor blob magic")
    code, rank = struct.unpack_from("<BB", data, 8)
    if code not in _CODE_KINDS:
        raise ParseError(f"{source}: unknown tensor kind code {code}")
    off = 10 + 8 * rank
    if len(data) < off:
        raise ParseError(f"{source}: truncated blob header")
    shape = struct.unpack_from(f"<{rank}Q", data, 10)
    n = math.prod(shape)
    if len(data) != off + 8 * n:
        raise ShapeMismatchError(
            f"{source}: header declares {n} values, payload holds {(len(data) - off) / 8:g}"
        )
    dtype = "<f8" if _CODE_KINDS[code] == REAL else "<i8"
    arr = np.frombuffer(data, dtype=dtype, count=n, offset=off).reshape(shape)
    return _frozen(arr.astype(np.float64 if code == 0 else np.int64))


def write_blob(path, t: np.ndarray) -> None:
    Path(path).write_bytes(encode_blob(t))


def read_blob(path) -> np.ndarray:
    return decode_blob(Path(path).read_bytes(), source=str(path))
