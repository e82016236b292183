"""Two's-complement fixed-point words and the saturating datapath arithmetic.

All datapath values are ``width_bits``-wide two's-complement integers with
``frac_bits`` fraction bits (default Q8.8 in a 16-bit word). Three rules are
pinned globally so every stage of the simulator agrees bit-for-bit:

* rounding is round-half-to-even, both when quantizing reals and when
  shifting products back down after a multiply;
* overflow saturates to the format bounds, it never wraps;
* the MAC accumulator is ``width_bits`` wide and saturates per step unless
  the wide-accumulator option is selected, in which case partial sums are
  kept exact and saturated once at the end.

The kernels below accept plain ints or numpy integer arrays alike; the
scalar ``FixedVal`` wrapper and the vectorized map pipeline therefore share
one implementation and cannot drift apart. Everything here is pure value
arithmetic and safe to call from any thread.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class QFormat:
    """Fixed-point format: total word width and fraction bit count."""

    width_bits: int = 16
    frac_bits: int = 8

    def __post_init__(self):
        if not (1 <= self.frac_bits < self.width_bits <= 32):
            raise ValueError(
                f"need 1 <= frac_bits < width_bits <= 32, "
                f"got Q({self.width_bits},{self.frac_bits})"
            )

    @property
    def raw_min(self) -> int:
        return -(1 << (self.width_bits - 1))

    @property
    def raw_max(self) -> int:
        return (1 << (self.width_bits - 1)) - 1

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    @property
    def word_mask(self) -> int:
        return (1 << self.width_bits) - 1

    def saturate(self, x):
        """Clamp a raw integer (or array) into the representable range."""
        if isinstance(x, np.ndarray):
            return np.clip(x, self.raw_min, self.raw_max)
        return min(max(int(x), self.raw_min), self.raw_max)


@dataclass(frozen=True)
class FixedVal:
    """One fixed-point word. ``raw`` is the signed integer bit pattern."""

    raw: int
    fmt: QFormat

    def __post_init__(self):
        if not (self.fmt.raw_min <= self.raw <= self.fmt.raw_max):
            raise ValueError(f"raw {self.raw} outside {self.fmt}")

    @property
    def value(self) -> float:
        return self.raw / self.fmt.scale

    @property
    def sign_bit(self) -> int:
        return 1 if self.raw < 0 else 0


def rshift_round_half_even(x, f: int):
    """Arithmetic right shift by ``f`` with round-half-to-even.

    Works on ints and integer ndarrays. The remainder of a floor shift is
    always in [0, 2^f), so the same comparison against the midpoint handles
    negative values correctly.
    """
    if f == 0:
        return x
    floor = x >> f
    rem = x - (floor << f)
    half = 1 << (f - 1)
    round_up = (rem > half) | ((rem == half) & ((floor & 1) == 1))
    if isinstance(round_up, np.ndarray):
        return floor + round_up.astype(np.int64)
    return floor + int(round_up)


def quantize_array(x, q: QFormat) -> np.ndarray:
    """Real-valued array -> saturated raw words (int64). np.rint is half-to-even."""
    raw = np.rint(np.asarray(x, dtype=np.float64) * q.scale).astype(np.int64)
    return q.saturate(raw)


def quantize(x: float, q: QFormat) -> FixedVal:
    """Round a real number to the nearest representable word, saturating."""
    return FixedVal(int(quantize_array(x, q)), q)


def dequantize_array(raw, q: QFormat) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / q.scale


def dequantize(v: FixedVal) -> float:
    return v.raw / v.fmt.scale


def mac_step(acc_raw, a_raw, b_raw, q: QFormat, wide: bool = False):
    """One multiply-accumulate on raw words: acc + ((a*b) >> F), rounded.

    With ``wide=False`` the accumulator saturates to the word range after
    every step, matching a width-limited hardware accumulator. With
    ``wide=True`` the caller keeps the running sum exact (int64) and must
    saturate once after the last step.
    """
    prod = np.multiply(a_raw, b_raw, dtype=np.int64) if isinstance(
        a_raw, np.ndarray
    ) or isinstance(b_raw, np.ndarray) else int(a_raw) * int(b_raw)
    shifted = rshift_round_half_even(prod, q.frac_bits)
    total = acc_raw + shifted
    return total if wide else q.saturate(total)


def mac(acc: FixedVal, a: FixedVal, b: FixedVal) -> FixedVal:
    """Saturating scalar MAC; all operands must share one format."""
    if not (acc.fmt == a.fmt == b.fmt):
        raise ValueError("mac operands must share a QFormat")
    return FixedVal(mac_step(acc.raw, a.raw, b.raw, acc.fmt), acc.fmt)


def relu_raw(x):
    """Rectifier on raw words: negative words clamp to zero."""
    if isinstance(x, np.ndarray):
        return np.maximum(x, 0)
    return x if x >= 0 else 0


def relu_plain(a: FixedVal) -> FixedVal:
    return FixedVal(relu_raw(a.raw), a.fmt)


def to_pattern(raw, q: QFormat):
    """Signed raw word(s) -> unsigned bit pattern of the word width."""
    return raw & q.word_mask


def from_pattern(pattern, q: QFormat):
    """Unsigned bit pattern(s) -> signed raw word(s)."""
    half = 1 << (q.width_bits - 1)
    if isinstance(pattern, np.ndarray):
        p = pattern.astype(np.int64)
        return np.where(p >= half, p - (1 << q.width_bits), p)
    p = int(pattern)
    return p - (1 << q.width_bits) if p >= half else p
