import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qlower.errors import KindMismatchError, OutOfRangeError, ParseError, ShapeMismatchError
from qlower.tensor import (
    BLOB_MAGIC,
    QuantSpec,
    as_integer,
    as_real,
    decimal_fraction,
    decode_blob,
    dequantize,
    encode_blob,
    quantize_linear,
    read_blob,
    snap_floor,
    write_blob,
)


def spec(eps, lo=0, hi=3, alpha=0.0, bits=8):
    return QuantSpec(eps=eps, alpha=alpha, bits=bits, lo=lo, hi=hi)


class TestDequantize:
    def test_plain(self):
        out = dequantize(as_integer([0, 1, 2]), spec(0.5))
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])

    def test_input_quantum(self):
        out = dequantize(as_integer([3]), spec(1 / 255, hi=255))
        assert out[0] == 3 / 255

    def test_offset(self):
        out = dequantize(as_integer([-2, 2]), spec(0.25, lo=-2, hi=2, alpha=1.0))
        np.testing.assert_array_equal(out, [0.5, 1.5])

    def test_out_of_range(self):
        with pytest.raises(OutOfRangeError):
            dequantize(as_integer([4]), spec(0.5))

    def test_rejects_real(self):
        with pytest.raises(KindMismatchError):
            dequantize(as_real([1.0]), spec(0.5))


class TestQuantizeLinear:
    def test_floor(self):
        assert quantize_linear(as_real([0.5]), spec(1 / 3)).tolist() == [1]

    def test_both_clips(self):
        assert quantize_linear(as_real([-0.2, 1.7]), spec(1 / 3)).tolist() == [0, 3]

    def test_reused_oracle_value(self):
        assert quantize_linear(as_real([0.575]), spec(0.25)).tolist() == [2]

    def test_upper_bound_inclusive(self):
        # beta maps to the top integer, not one past it
        s = QuantSpec.unsigned(1 / 255, 8)
        assert quantize_linear(as_real([1.0]), s).tolist() == [255]

    def test_rejects_integer(self):
        with pytest.raises(KindMismatchError):
            quantize_linear(as_integer([1]), spec(0.5))

    def test_output_is_integer_kind(self):
        q = quantize_linear(as_real([0.3, 0.9]), spec(0.25))
        assert q.dtype == np.int64

    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(1e-3, 2.0))
    def test_monotone(self, a, b, eps):
        s = spec(eps, lo=-50, hi=50)
        lo, hi = sorted((a, b))
        assert quantize_linear(as_real([lo]), s)[0] <= quantize_linear(as_real([hi]), s)[0]

    @given(st.lists(st.floats(-3, 3), min_size=1, max_size=20), st.floats(1e-2, 1.0),
           st.floats(-1, 1))
    def test_round_trip_within_eps(self, values, eps, alpha):
        s = spec(eps, lo=-10, hi=10, alpha=alpha)
        t = as_real(values)
        back = dequantize(quantize_linear(t, s), s)
        clipped = np.clip(t, alpha + eps * s.lo, alpha + eps * s.hi)
        assert np.all(np.abs(back - clipped) <= eps * (1 + 1e-9))

    @given(st.integers(-20, 20), st.floats(1e-3, 10.0), st.floats(-2, 2))
    def test_idempotent_on_lattice(self, q, eps, alpha):
        s = spec(eps, lo=-20, hi=20, alpha=alpha)
        qq = as_integer([q])
        assert quantize_linear(dequantize(qq, s), s).tolist() == [q]


class TestQuantSpec:
    @pytest.mark.parametrize("kw", [dict(eps=0.0), dict(eps=-1.0), dict(lo=3, hi=2),
                                    dict(bits=2, lo=0, hi=4)])
    def test_invalid(self, kw):
        base = dict(eps=0.5, alpha=0.0, bits=8, lo=0, hi=3)
        base.update(kw)
        with pytest.raises(ValueError):
            QuantSpec(**base)

    def test_unsigned(self):
        s = QuantSpec.unsigned(0.1, 4)
        assert (s.lo, s.hi, s.bits) == (0, 15, 4)

    def test_dict_round_trip(self):
        s = QuantSpec.spanning(0.01, -300, 70000)
        assert QuantSpec.from_dict(s.to_dict()) == s
        assert s.magnitude == 70000


class TestTensors:
    def test_frozen(self):
        t = as_real([1.0, 2.0])
        with pytest.raises(ValueError):
            t[0] = 3.0

    def test_integer_rejects_fraction(self):
        with pytest.raises(KindMismatchError):
            as_integer(np.array([1.5]))

    def test_snap_floor_absorbs_rounding(self):
        assert snap_floor(np.array([3 * 0.1 / 0.1 - 1e-15]))[0] == 3.0
        assert snap_floor(np.array([2.5]))[0] == 2.0

    def test_decimal_fraction(self):
        from fractions import Fraction

        assert decimal_fraction(0.1) == Fraction(1, 10)


class TestBlobs:
    @given(st.lists(st.integers(-(2**62), 2**62), min_size=1, max_size=12))
    def test_integer_round_trip(self, values):
        t = as_integer(values).reshape(-1, 1)
        back = decode_blob(encode_blob(t))
        assert back.dtype == np.int64 and np.array_equal(back, t)

    @given(st.lists(st.floats(allow_nan=False), min_size=1, max_size=12))
    def test_real_round_trip_bitwise(self, values):
        t = as_real(values)
        back = decode_blob(encode_blob(t))
        assert back.tobytes() == t.tobytes()

    def test_layout(self):
        raw = encode_blob(as_integer([[1, 2, 3]]))
        assert raw[:8] == BLOB_MAGIC
        assert raw[8] == 1 and raw[9] == 2  # integer kind, rank 2
        assert int.from_bytes(raw[10:18], "little") == 1
        assert int.from_bytes(raw[18:26], "little") == 3
        assert int.from_bytes(raw[26:34], "little", signed=True) == 1

    def test_bad_magic(self):
        with pytest.raises(ParseError):
            decode_blob(b"NOTABLOB" + bytes(10))

    def test_truncated(self):
        raw = encode_blob(as_real([1.0, 2.0]))
        with pytest.raises((ParseError, ShapeMismatchError)):
            decode_blob(raw[:-3])

    def test_file_round_trip(self, tmp_path):
        t = as_real(np.arange(6.0).reshape(2, 3))
        write_blob(tmp_path / "t.qlt", t)
        assert np.array_equal(read_blob(tmp_path / "t.qlt"), t)
