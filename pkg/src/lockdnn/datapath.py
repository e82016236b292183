"""The keyed hardware blocks: bias adder, locked rectifier, match detector.

The locked rectifier XORs the shared T constant onto every rectified word,
so a stored map never exposes raw zeros; because rectified words have a
zero sign bit, the stored sign bit is always T's sign bit. The match
detector replaces the plain zero detector: it raises its flag only when
the stored word equals T (meaning the pre-mask value was zero) AND its
c-bit key segment equals the correct segment. A wrong segment pins the
flag at zero, which changes nothing downstream except how much data the
compressor must keep.

All functions are pure and operate either on scalar words or on numpy
arrays of unsigned bit patterns; map-level helpers carry the vectorized
form used by the pipeline driver.
"""

from __future__ import annotations

import numpy as np

from .errors import KeyParamsError
from .keying import HkeyConfig, TVector
from .numeric import FixedVal, QFormat, from_pattern, relu_raw, to_pattern


def apply_mask_msbs(raw, mask_bits: int, m: int, q: QFormat):
    """XOR an m-bit vector onto the top m bits of raw word(s)."""
    if not (0 <= mask_bits < (1 << m)):
        raise KeyParamsError(f"mask 0x{mask_bits:x} wider than {m} bits")
    word_mask = (mask_bits << (q.width_bits - m)) & q.word_mask
    return from_pattern(to_pattern(raw, q) ^ word_mask, q)


def bias_add_keyed(
    acc: FixedVal, bias_obf: FixedVal, mk_i: int, p_i: int, m: int
) -> FixedVal:
    """Keyed bias adder: un-mask the bias MSBs with MK_i across the gate
    polarity P_i, then add saturating. With MK_i == V_i XOR P_i the original
    bias is restored exactly (XOR involution)."""
    q = acc.fmt
    restored = apply_mask_msbs(bias_obf.raw, mk_i ^ p_i, m, q)
    return FixedVal(q.saturate(acc.raw + restored), q)


def relu_locked(a: FixedVal, t: TVector) -> FixedVal:
    """Rectify, then XOR the T constant onto the word."""
    q = a.fmt
    if t.width != q.width_bits:
        raise KeyParamsError("T width does not match the word width")
    return FixedVal(from_pattern(to_pattern(relu_raw(a.raw), q) ^ t.bits, q), q)


def relu_locked_map(raw_map: np.ndarray, t: TVector, q: QFormat) -> np.ndarray:
    """Vectorized locked rectifier; returns unsigned stored patterns."""
    return to_pattern(relu_raw(raw_map), q) ^ t.bits


def match_detect(
    xp: FixedVal,
    t: TVector,
    hk_i: int | None = None,
    hk_star_i: int | None = None,
) -> int:
    """One detector decision for a stored word.

    Locked form (hk_i given): flag = [hk_i == hk_star_i] AND [X' == T].
    Unlocked form (hk_i None): flag = [X' == T], a plain zero detector on
    the masked stream.
    """
    fx = int(to_pattern(xp.raw, xp.fmt) == t.bits)
    if hk_i is None:
        return fx
    if hk_star_i is None:
        raise KeyParamsError("locked detector needs its correct segment")
    return int(hk_i == hk_star_i) & fx


def detect_flags(
    patterns: np.ndarray,
    t: TVector,
    hkey: HkeyConfig,
    assignment: dict[int, int] | None,
    override: str | None = None,
) -> np.ndarray:
    """Flag stream for a flattened stored map.

    Element i is handled by detector ``i mod n``. Locked detectors compare
    their assigned segment against HK*; unlocked ones always pass the zero
    test through. ``override`` emulates a removal attack: "zero" pins every
    flag low, "one" pins every flag high.
    """
    flat = patterns.reshape(-1)
    if override == "zero":
        return np.zeros(flat.shape, dtype=bool)
    if override == "one":
        return np.ones(flat.shape, dtype=bool)
    if override is not None:
        raise KeyParamsError(f"unknown detector override {override!r}")

    fx = flat == t.bits
    lanes = np.arange(flat.size, dtype=np.int64) % hkey.n_detectors
    enabled = np.ones(hkey.n_detectors, dtype=bool)
    for i in hkey.locked:
        seg = None if assignment is None else assignment.get(i)
        enabled[i] = seg is not None and seg == hkey.correct[i]
    return fx & enabled[lanes]


def readback_map(
    patterns_kept: np.ndarray,
    flags: np.ndarray,
    t: TVector,
    q: QFormat,
) -> np.ndarray:
    """Reconstruct the plain rectified map from a decoded store.

    Dropped positions are refilled with the T pattern before the read-side
    XOR, so they come back as exact zeros; kept positions XOR back to their
    pre-mask values. Returns signed raw words.
    """
    full = np.empty(flags.shape, dtype=np.int64)
    full[flags] = t.bits
    full[~flags] = patterns_kept
    return from_pattern(full ^ t.bits, q)


def readback(stored, t: TVector, q: QFormat) -> np.ndarray:
    """Full read path: decode a stored map and restore T, giving back the
    exact plain rectified map shaped like the original."""
    from .compression import decode

    vals, flags = decode(stored)
    return readback_map(vals, flags.reshape(-1), t, q).reshape(stored.dims)
