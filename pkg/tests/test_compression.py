import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lockdnn.compression import (
    CompressedMap,
    ceil_log2,
    decode,
    encode,
    size_ratio,
)
from lockdnn.errors import CodecStreamError, EmptyMap, FlagExtentMismatch

H_BITS = 16


# --------------------- independent accounting oracles ---------------------
# Walk the map element by element and count what each format must emit.

def oracle_bitmap_bits(flags):
    n = flags.size
    kept = int((~flags).sum())
    return n + kept * H_BITS


def oracle_rlc_bits(flags, r=4):
    rmax = (1 << r) - 1
    pairs = 0
    run = 0
    for f in flags.reshape(-1):
        if f:
            run += 1
            continue
        while run >= rmax:
            pairs += 1  # escape pair
            run -= rmax
        pairs += 1  # run + value pair
        run = 0
    return pairs * (r + H_BITS)


def oracle_csc_bits(flags4d):
    n, c, h, w = flags4d.shape
    row_bits = math.ceil(math.log2(h)) if h > 1 else 0
    total = 0
    for plane in flags4d.reshape(n * c, h, w):
        nnz = int((~plane).sum())
        ptr_bits = math.ceil(math.log2(nnz + 1)) if nnz > 0 else 0
        total += nnz * H_BITS + nnz * row_bits + (w + 1) * ptr_bits
    return total


def random_map(rng, dims, zero_fraction):
    n = int(np.prod(dims))
    n_zero = int(round(zero_fraction * n))
    raws = rng.integers(1, 1 << H_BITS, size=n, dtype=np.int64)
    zero_at = rng.choice(n, size=n_zero, replace=False)
    flags = np.zeros(n, dtype=bool)
    flags[zero_at] = True
    return raws.reshape(dims), flags.reshape(dims)


class TestBitmapAccounting:
    def test_closed_form_810_of_1000(self):
        rng = np.random.default_rng(0)
        pats, flags = random_map(rng, (1, 10, 10, 10), 0.81)
        c = encode(pats, flags, "bitmap")
        assert c.size_bits == 1000 + 190 * 16 == 4040
        assert c.nnz_flagged == 190

    def test_wrong_key_dense_size(self):
        rng = np.random.default_rng(0)
        pats, _ = random_map(rng, (1, 10, 10, 10), 0.81)
        dense = encode(pats, np.zeros_like(pats, dtype=bool), "bitmap")
        assert dense.size_bits == 1000 + 1000 * 16 == 17000

    def test_ratio_is_exact_fraction(self):
        rng = np.random.default_rng(0)
        pats, flags = random_map(rng, (1, 10, 10, 10), 0.81)
        r = size_ratio(pats, flags, np.zeros_like(flags), "bitmap")
        assert r == Fraction(17000, 4040)
        # Closed form (1 + h) / (1 + (1 - z) h) at z = 0.81, h = 16.
        assert r == Fraction(1 + 16, 1) / (1 + Fraction(190, 1000) * 16)


class TestRlcHandTrace:
    def test_five_element_stream(self):
        # Stream [0, 0, 5, 0, 3] with zeros flagged: pairs (2,5), (1,3).
        pats = np.array([0, 0, 5, 0, 3], dtype=np.int64).reshape(1, 1, 1, 5)
        flags = np.array([1, 1, 0, 1, 0], dtype=bool).reshape(1, 1, 1, 5)
        c = encode(pats, flags, "rlc")
        assert c.size_bits == 2 * (4 + 16) == 40
        vals, back = decode(c)
        assert vals.tolist() == [5, 3]
        assert np.array_equal(back, flags)

    def test_escape_pair_on_long_run(self):
        # 15 flagged then a value: needs one escape pair plus a (0, v) pair.
        pats = np.zeros((1, 1, 1, 16), dtype=np.int64)
        pats[0, 0, 0, 15] = 7
        flags = np.ones((1, 1, 1, 16), dtype=bool)
        flags[0, 0, 0, 15] = False
        c = encode(pats, flags, "rlc")
        assert c.size_bits == 2 * 20
        vals, back = decode(c)
        assert vals.tolist() == [7]
        assert np.array_equal(back, flags)

    def test_trailing_flags_cost_nothing(self):
        pats = np.array([9, 0, 0, 0], dtype=np.int64).reshape(1, 1, 1, 4)
        flags = np.array([0, 1, 1, 1], dtype=bool).reshape(1, 1, 1, 4)
        c = encode(pats, flags, "rlc")
        assert c.size_bits == 20
        _, back = decode(c)
        assert np.array_equal(back, flags)


class TestRoundTrip:
    @pytest.mark.parametrize("fmt", ["bitmap", "rlc", "csc"])
    def test_all_flagged(self, fmt):
        pats = np.zeros((1, 2, 4, 4), dtype=np.int64)
        flags = np.ones((1, 2, 4, 4), dtype=bool)
        c = encode(pats, flags, fmt)
        vals, back = decode(c)
        assert vals.size == 0
        assert back.all()

    @pytest.mark.parametrize("fmt", ["bitmap", "rlc", "csc"])
    def test_none_flagged(self, fmt):
        rng = np.random.default_rng(1)
        pats = rng.integers(0, 1 << H_BITS, size=(2, 3, 4, 5)).astype(np.int64)
        flags = np.zeros_like(pats, dtype=bool)
        c = encode(pats, flags, fmt)
        vals, back = decode(c)
        assert np.array_equal(vals, pats.reshape(-1))
        assert not back.any()

    @pytest.mark.parametrize("fmt", ["bitmap", "rlc", "csc"])
    @settings(max_examples=60, deadline=None)
    @given(
        seed=st.integers(0, 2**32 - 1),
        z=st.floats(0.0, 1.0),
        dims=st.tuples(
            st.integers(1, 2), st.integers(1, 4), st.integers(1, 9), st.integers(1, 9)
        ),
    )
    def test_random_round_trip(self, fmt, seed, z, dims):
        rng = np.random.default_rng(seed)
        pats, flags = random_map(rng, dims, z)
        c = encode(pats, flags, fmt)
        vals, back = decode(c)
        assert np.array_equal(back, flags)
        assert np.array_equal(vals, pats.reshape(-1)[~flags.reshape(-1)])

    @pytest.mark.parametrize("fmt", ["bitmap", "rlc", "csc"])
    def test_fc_shaped_maps(self, fmt):
        # Fully-connected outputs are (N, F, 1, 1); degenerate 1x1 planes.
        rng = np.random.default_rng(3)
        pats, flags = random_map(rng, (2, 32, 1, 1), 0.5)
        c = encode(pats, flags, fmt)
        vals, back = decode(c)
        assert np.array_equal(back, flags)
        assert np.array_equal(vals, pats.reshape(-1)[~flags.reshape(-1)])


class TestSizeLaw:
    @pytest.mark.parametrize("fmt", ["bitmap", "rlc", "csc"])
    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), z=st.floats(0.0, 1.0))
    def test_size_equals_independent_count(self, fmt, seed, z):
        rng = np.random.default_rng(seed)
        pats, flags = random_map(rng, (1, 3, 6, 7), z)
        c = encode(pats, flags, fmt)
        if fmt == "bitmap":
            expect = oracle_bitmap_bits(flags)
        elif fmt == "rlc":
            expect = oracle_rlc_bits(flags)
        else:
            expect = oracle_csc_bits(flags)
        assert c.size_bits == expect
        assert len(c.payload) == (c.size_bits + 7) // 8


class TestRatios:
    def test_ratio_one_when_nothing_flagged(self):
        rng = np.random.default_rng(4)
        pats, _ = random_map(rng, (1, 2, 5, 5), 0.0)
        none = np.zeros_like(pats, dtype=bool)
        for fmt in ("bitmap", "rlc", "csc"):
            assert size_ratio(pats, none, none, fmt) == 1

    def test_bitmap_smallest_blowup_at_081(self):
        rng = np.random.default_rng(0)
        pats, flags = random_map(rng, (1, 10, 10, 10), 0.81)
        dense = np.zeros_like(flags)
        rb = size_ratio(pats, flags, dense, "bitmap")
        rr = size_ratio(pats, flags, dense, "rlc")
        rc = size_ratio(pats, flags, dense, "csc")
        assert rr > rb
        assert rc > rb

    @pytest.mark.parametrize("fmt", ["bitmap", "rlc", "csc"])
    def test_monotone_in_sparsity_59_vs_81(self, fmt):
        rng = np.random.default_rng(7)
        dims = (1, 10, 10, 10)
        pats59, flags59 = random_map(rng, dims, 0.59)
        pats81, flags81 = random_map(rng, dims, 0.81)
        r59 = size_ratio(pats59, flags59, np.zeros_like(flags59), fmt)
        r81 = size_ratio(pats81, flags81, np.zeros_like(flags81), fmt)
        assert r81 > r59

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), z=st.floats(0.3, 0.95))
    def test_bitmap_never_worst_on_big_random_maps(self, seed, z):
        rng = np.random.default_rng(seed)
        pats, flags = random_map(rng, (1, 16, 32, 32), z)
        dense = np.zeros_like(flags)
        rb = size_ratio(pats, flags, dense, "bitmap")
        assert size_ratio(pats, flags, dense, "rlc") >= rb
        assert size_ratio(pats, flags, dense, "csc") >= rb

    def test_empty_reference_raises(self):
        pats = np.zeros((1, 1, 2, 2), dtype=np.int64)
        all_flagged = np.ones_like(pats, dtype=bool)
        with pytest.raises(EmptyMap):
            size_ratio(pats, all_flagged, np.zeros_like(all_flagged), "rlc")


class TestValidation:
    def test_flag_extent_mismatch(self):
        pats = np.zeros((1, 1, 2, 2), dtype=np.int64)
        with pytest.raises(FlagExtentMismatch):
            encode(pats, np.zeros((1, 1, 2, 3), dtype=bool), "bitmap")

    def test_unknown_format(self):
        pats = np.zeros((1, 1, 2, 2), dtype=np.int64)
        with pytest.raises(FlagExtentMismatch):
            encode(pats, np.zeros_like(pats, dtype=bool), "gzip")

    def test_truncated_payload_rejected(self):
        rng = np.random.default_rng(9)
        pats, flags = random_map(rng, (1, 1, 4, 4), 0.5)
        c = encode(pats, flags, "bitmap")
        bad = CompressedMap(
            c.format, c.payload[:-1], c.dims, c.width_bits, c.size_bits,
            c.nnz_flagged, c.rlc_run_bits, c.plane_nnz,
        )
        with pytest.raises(CodecStreamError):
            decode(bad)

    def test_overlong_payload_rejected(self):
        rng = np.random.default_rng(9)
        pats, flags = random_map(rng, (1, 1, 4, 4), 0.5)
        c = encode(pats, flags, "rlc")
        bad = CompressedMap(
            c.format, c.payload + b"\x00\x00\x00", c.dims, c.width_bits,
            c.size_bits, c.nnz_flagged, c.rlc_run_bits, c.plane_nnz,
        )
        with pytest.raises(CodecStreamError):
            decode(bad)


def test_ceil_log2_edges():
    assert [ceil_log2(x) for x in (0, 1, 2, 3, 8, 9, 1024)] == [0, 0, 1, 2, 3, 4, 10]
