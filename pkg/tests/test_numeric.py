from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lockdnn.numeric import (
    FixedVal,
    QFormat,
    dequantize,
    mac,
    mac_step,
    quantize,
    quantize_array,
    relu_plain,
    relu_raw,
    rshift_round_half_even,
    to_pattern,
)

Q = QFormat(16, 8)


def round_half_even_shift_oracle(x: int, f: int) -> int:
    # Independent rule: exact rational x/2^f rounded half-to-even via Fraction.
    val = Fraction(x, 1 << f)
    fl = val.numerator // val.denominator
    rem = val - fl
    if rem > Fraction(1, 2):
        return fl + 1
    if rem < Fraction(1, 2):
        return fl
    return fl + (fl & 1)


class TestQFormat:
    def test_defaults(self):
        assert Q.raw_min == -32768
        assert Q.raw_max == 32767
        assert Q.scale == 256

    @pytest.mark.parametrize("w,f", [(8, 8), (8, 0), (33, 8), (4, 4)])
    def test_invalid_formats_rejected(self, w, f):
        with pytest.raises(ValueError):
            QFormat(w, f)


class TestQuantize:
    def test_zero(self):
        assert quantize(0.0, Q).raw == 0

    def test_one_is_scale(self):
        assert quantize(1.0, Q).raw == 256

    def test_saturates_large_positive(self):
        # 200 * 256 = 51200 in exact integer math, beyond raw_max.
        assert 200 * 256 == 51200 > Q.raw_max
        assert quantize(200.0, Q).raw == 32767

    def test_saturates_large_negative(self):
        assert quantize(-200.0, Q).raw == -32768

    def test_half_to_even_on_reals(self):
        # Midpoints land on the even raw word: 1.5 ulp -> 2, 2.5 ulp -> 2.
        assert quantize(1.5 / 256, Q).raw == 2
        assert quantize(2.5 / 256, Q).raw == 2

    def test_roundtrip_exhaustive_q8_8(self):
        raw = np.arange(Q.raw_min, Q.raw_max + 1, dtype=np.int64)
        back = quantize_array(raw / Q.scale, Q)
        assert np.array_equal(back, raw)


class TestShiftRounding:
    @given(st.integers(-(2**40), 2**40), st.integers(1, 16))
    def test_matches_fraction_oracle(self, x, f):
        assert rshift_round_half_even(x, f) == round_half_even_shift_oracle(x, f)

    def test_array_and_scalar_agree(self):
        xs = np.arange(-1024, 1024, dtype=np.int64)
        arr = rshift_round_half_even(xs, 5)
        for x, got in zip(xs.tolist(), arr.tolist()):
            assert got == rshift_round_half_even(x, 5)


class TestMac:
    def test_identity(self):
        one = quantize(1.0, Q)
        assert mac(FixedVal(0, Q), one, one).raw == 256

    def test_half_times_half(self):
        # 128 * 128 = 16384, >> 8 = 64 exactly.
        half = quantize(0.5, Q)
        assert mac(FixedVal(0, Q), half, half).raw == 64

    def test_saturation_at_max(self):
        one = quantize(1.0, Q)
        assert mac(FixedVal(Q.raw_max, Q), one, one).raw == Q.raw_max

    def test_format_mismatch_rejected(self):
        with pytest.raises(ValueError):
            mac(FixedVal(0, Q), FixedVal(0, QFormat(16, 4)), FixedVal(0, Q))

    @given(
        st.integers(-32768, 32767),
        st.integers(-32768, 32767),
        st.integers(-32768, 32767),
    )
    def test_result_always_in_range(self, acc, a, b):
        out = mac(FixedVal(acc, Q), FixedVal(a, Q), FixedVal(b, Q))
        assert Q.raw_min <= out.raw <= Q.raw_max

    @given(
        st.integers(-32768, 32767),
        st.integers(-32768, 32767),
        st.integers(-32768, 32767),
    )
    def test_matches_exact_integer_oracle(self, acc, a, b):
        expect = acc + round_half_even_shift_oracle(a * b, 8)
        expect = min(max(expect, Q.raw_min), Q.raw_max)
        assert mac(FixedVal(acc, Q), FixedVal(a, Q), FixedVal(b, Q)).raw == expect

    def test_wide_accumulator_defers_saturation(self):
        # +127 then -127: a narrow accumulator clips the first step, wide does not.
        one = quantize(1.0, Q)
        big = FixedVal(Q.raw_max, Q)
        narrow = mac_step(mac_step(Q.raw_max, big.raw, one.raw, Q), big.raw, quantize(-1.0, Q).raw, Q)
        wide = mac_step(mac_step(Q.raw_max, big.raw, one.raw, Q, wide=True), big.raw, quantize(-1.0, Q).raw, Q, wide=True)
        assert narrow == Q.raw_max - Q.raw_max  # clipped then pulled back down
        assert Q.saturate(wide) == Q.raw_max


class TestRelu:
    @pytest.mark.parametrize("raw,expect", [(-5, 0), (0, 0), (300, 300)])
    def test_examples(self, raw, expect):
        assert relu_plain(FixedVal(raw, Q)).raw == expect

    def test_exhaustive_bitwise_equivalence(self):
        # Logic form: out bit j = NOT(sign) AND in bit j, and the sign bit is 0.
        raws = np.arange(Q.raw_min, Q.raw_max + 1, dtype=np.int64)
        patterns = to_pattern(raws, Q)
        sign = (patterns >> 15) & 1
        expect = np.where(sign == 1, 0, patterns & 0x7FFF)
        got = to_pattern(relu_raw(raws), Q)
        assert np.array_equal(got, expect)

    def test_dequantize_sign(self):
        assert dequantize(relu_plain(quantize(-3.25, Q))) == 0.0
