"""Sparse feature-map codecs with exact bit-size accounting.

Three formats store a flagged map (flag = 1 means "discard this element"):

* ``bitmap``: one presence bit per element (1 = kept) in flat row-major
  order, then each kept value as an h-bit word.
  size_bits = N + nnz * h.
* ``rlc``: (run, value) pairs; the run field is r bits wide and counts
  discarded elements preceding the value. A pair whose run field equals
  2^r - 1 is an escape: it contributes 2^r - 1 discarded positions, its
  value field is zero padding and carries no element. Discarded positions
  after the last kept value are implied by the map dims and emit nothing.
  size_bits = pairs * (r + h).
* ``csc``: each (image, channel) plane is an H x W matrix stored
  column-major: kept values (h bits each), their row indices
  (ceil(log2 H) bits each), and W + 1 column pointers
  (ceil(log2(nnz_plane + 1)) bits each).
  size_bits = sum over planes of nnz*h + nnz*ceil(log2 H)
              + (W+1)*ceil(log2(nnz+1)).

Bits are packed MSB-first into bytes; the final byte is zero-padded. Index
fields use minimal ceil(log2) widths, which understates how much a dense
(wrong-key) map costs, so reported blowup ratios are conservative lower
bounds. Framing that hardware would know from the layer configuration
(dims, per-plane counts for csc) travels in the container, not the
payload, and is excluded from ``size_bits``. Codecs are pure functions and
safe to run in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import CodecStreamError, EmptyMap, FlagExtentMismatch

FORMATS = ("bitmap", "rlc", "csc")

DEFAULT_RLC_RUN_BITS = 4


def ceil_log2(x: int) -> int:
    """Minimal bits to index x distinct values; 0 when x <= 1."""
    return (int(x) - 1).bit_length() if x > 1 else 0


def words_to_bits(vals: np.ndarray, width: int) -> np.ndarray:
    if width == 0 or vals.size == 0:
        return np.zeros(0, dtype=np.uint8)
    shifts = np.arange(width - 1, -1, -1, dtype=np.int64)
    return ((vals.astype(np.int64)[:, None] >> shifts) & 1).astype(np.uint8).ravel()


def bits_to_words(bits: np.ndarray, width: int) -> np.ndarray:
    if width == 0 or bits.size == 0:
        return np.zeros(0, dtype=np.int64)
    mat = bits.reshape(-1, width).astype(np.int64)
    pow2 = (1 << np.arange(width - 1, -1, -1)).astype(np.int64)
    return mat @ pow2


@dataclass(frozen=True)
class CompressedMap:
    """One encoded feature map plus its exact accounting."""

    format: str
    payload: bytes
    dims: tuple[int, int, int, int]
    width_bits: int
    size_bits: int
    nnz_flagged: int  # elements stored, i.e. flagged as non-zero (flag = 0)
    rlc_run_bits: int = DEFAULT_RLC_RUN_BITS
    plane_nnz: tuple[int, ...] | None = None  # csc framing: kept count per plane

    @property
    def n_elements(self) -> int:
        n, c, h, w = self.dims
        return n * c * h * w


def _check_inputs(patterns: np.ndarray, flags: np.ndarray, width_bits: int):
    if patterns.ndim != 4:
        raise FlagExtentMismatch(f"expected a 4-D (N,C,H,W) map, got {patterns.ndim}-D")
    if flags.shape != patterns.shape:
        raise FlagExtentMismatch(
            f"flag extents {flags.shape} do not match map extents {patterns.shape}"
        )
    if patterns.size and (patterns.min() < 0 or patterns.max() >= (1 << width_bits)):
        raise FlagExtentMismatch(f"map values exceed {width_bits}-bit patterns")


def _pack(bits: np.ndarray) -> bytes:
    return np.packbits(bits).tobytes() if bits.size else b""


def _unpack(payload: bytes, size_bits: int) -> np.ndarray:
    if len(payload) != (size_bits + 7) // 8:
        raise CodecStreamError(
            f"payload is {len(payload)} bytes, accounting says {(size_bits + 7) // 8}"
        )
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    if bits[size_bits:].any():
        raise CodecStreamError("nonzero padding bits after end of stream")
    return bits[:size_bits]


# ----------------------------- bitmap -----------------------------

def _encode_bitmap(flat, keep, h):
    vals = flat[keep]
    bits = np.concatenate([keep.astype(np.uint8), words_to_bits(vals, h)])
    size = flat.size + vals.size * h
    assert bits.size == size
    return bits, size


def _decode_bitmap(c: CompressedMap):
    n = c.n_elements
    bits = _unpack(c.payload, c.size_bits)
    keep = bits[:n].astype(bool)
    nnz = int(keep.sum())
    if c.size_bits != n + nnz * c.width_bits:
        raise CodecStreamError("presence bits inconsistent with stream length")
    vals = bits_to_words(bits[n:], c.width_bits)
    return vals, ~keep


# ----------------------------- rlc -----------------------------

def _rlc_fields(flat, keep, rmax):
    """Per-pair run and value fields for the kept elements of a flat map."""
    idx = np.flatnonzero(keep)
    vals = flat[idx]
    prev = np.concatenate(([np.int64(-1)], idx[:-1]))
    runs = idx - prev - 1  # discarded elements before each kept one
    esc = runs // rmax
    rem = runs % rmax
    total = int(vals.size + esc.sum())
    run_fields = np.full(total, rmax, dtype=np.int64)
    val_fields = np.zeros(total, dtype=np.int64)
    last = np.cumsum(esc + 1) - 1
    run_fields[last] = rem
    val_fields[last] = vals
    return run_fields, val_fields


def _encode_rlc(flat, keep, h, r):
    rmax = (1 << r) - 1
    run_fields, val_fields = _rlc_fields(flat, keep, rmax)
    pairs = run_fields.size
    bits = np.zeros(pairs * (r + h), dtype=np.uint8)
    if pairs:
        mat = bits.reshape(pairs, r + h)
        mat[:, :r] = words_to_bits(run_fields, r).reshape(pairs, r)
        mat[:, r:] = words_to_bits(val_fields, h).reshape(pairs, h)
    size = pairs * (r + h)
    return bits, size


def _decode_rlc(c: CompressedMap):
    n = c.n_elements
    r, h = c.rlc_run_bits, c.width_bits
    rmax = (1 << r) - 1
    if c.size_bits % (r + h) != 0:
        raise CodecStreamError("stream length is not a whole number of pairs")
    bits = _unpack(c.payload, c.size_bits)
    pairs = c.size_bits // (r + h)
    if pairs == 0:
        return np.zeros(0, dtype=np.int64), np.ones(n, dtype=bool)
    mat = bits.reshape(pairs, r + h)
    runs = bits_to_words(mat[:, :r].ravel(), r)
    vals = bits_to_words(mat[:, r:].ravel(), h)
    esc = runs == rmax
    if vals[esc].any():
        raise CodecStreamError("escape pair carries a nonzero value field")
    consumed = runs + (~esc).astype(np.int64)
    before = np.concatenate(([np.int64(0)], np.cumsum(consumed)[:-1]))
    if int(consumed.sum()) > n:
        raise CodecStreamError("stream decodes past the end of the map")
    positions = before[~esc] + runs[~esc]
    flags = np.ones(n, dtype=bool)
    flags[positions] = False
    return vals[~esc], flags


# ----------------------------- csc -----------------------------

def _encode_csc(patterns, keep, h):
    n, c, height, width = patterns.shape
    planes_v = patterns.reshape(n * c, height, width)
    planes_k = keep.reshape(n * c, height, width)
    rw = ceil_log2(height)
    chunks = []
    plane_nnz = []
    size = 0
    for pv, pk in zip(planes_v, planes_k):
        kt = pk.T.ravel()  # column-major scan of the H x W matrix
        vt = pv.T.ravel()
        pos = np.flatnonzero(kt)
        nnz_p = int(pos.size)
        plane_nnz.append(nnz_p)
        rows = pos % height
        counts = pk.T.sum(axis=1).astype(np.int64)
        ptr = np.concatenate(([np.int64(0)], np.cumsum(counts)))
        pw = ceil_log2(nnz_p + 1)
        chunks.append(words_to_bits(vt[pos], h))
        chunks.append(words_to_bits(rows, rw))
        chunks.append(words_to_bits(ptr, pw))
        size += nnz_p * h + nnz_p * rw + (width + 1) * pw
    bits = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.uint8)
    assert bits.size == size
    return bits, size, tuple(plane_nnz)


def _decode_csc(c: CompressedMap):
    n, ch, height, width = c.dims
    if c.plane_nnz is None or len(c.plane_nnz) != n * ch:
        raise CodecStreamError("csc container is missing per-plane counts")
    h = c.width_bits
    rw = ceil_log2(height)
    bits = _unpack(c.payload, c.size_bits)
    cursor = 0
    positions = []
    values = []
    for p, nnz_p in enumerate(c.plane_nnz):
        pw = ceil_log2(nnz_p + 1)
        need = nnz_p * h + nnz_p * rw + (width + 1) * pw
        if cursor + need > bits.size:
            raise CodecStreamError("csc stream shorter than its plane counts imply")
        vals = bits_to_words(bits[cursor : cursor + nnz_p * h], h)
        cursor += nnz_p * h
        rows = (
            bits_to_words(bits[cursor : cursor + nnz_p * rw], rw)
            if rw
            else np.zeros(nnz_p, dtype=np.int64)
        )
        cursor += nnz_p * rw
        ptr = (
            bits_to_words(bits[cursor : cursor + (width + 1) * pw], pw)
            if pw
            else np.zeros(width + 1, dtype=np.int64)
        )
        cursor += (width + 1) * pw
        if ptr[0] != 0 or ptr[-1] != nnz_p or np.any(np.diff(ptr) < 0):
            raise CodecStreamError("csc column pointers are not monotone")
        if rows.size and (rows.min() < 0 or rows.max() >= height):
            raise CodecStreamError("csc row index out of range")
        cols = np.repeat(np.arange(width, dtype=np.int64), np.diff(ptr))
        positions.append(p * height * width + rows * width + cols)
        values.append(vals)
    if cursor != bits.size:
        raise CodecStreamError("csc stream longer than its plane counts imply")
    pos = np.concatenate(positions) if positions else np.zeros(0, dtype=np.int64)
    val = np.concatenate(values) if values else np.zeros(0, dtype=np.int64)
    order = np.argsort(pos, kind="stable")
    total = n * ch * height * width
    flags = np.ones(total, dtype=bool)
    flags[pos] = False
    return val[order], flags


# ----------------------------- public surface -----------------------------

def encode(
    patterns: np.ndarray,
    flags: np.ndarray,
    fmt: str,
    width_bits: int = 16,
    rlc_run_bits: int = DEFAULT_RLC_RUN_BITS,
) -> CompressedMap:
    """Encode a stored map, dropping every flagged element.

    ``patterns`` holds unsigned h-bit words shaped (N, C, H, W); ``flags``
    is the detector output per element (True = discard).
    """
    patterns = np.asarray(patterns, dtype=np.int64)
    flags = np.asarray(flags, dtype=bool)
    _check_inputs(patterns, flags, width_bits)
    if fmt not in FORMATS:
        raise FlagExtentMismatch(f"unknown format {fmt!r}")
    flat = patterns.reshape(-1)
    keep = ~flags.reshape(-1)
    plane_nnz = None
    if fmt == "bitmap":
        bits, size = _encode_bitmap(flat, keep, width_bits)
    elif fmt == "rlc":
        bits, size = _encode_rlc(flat, keep, width_bits, rlc_run_bits)
    else:
        bits, size, plane_nnz = _encode_csc(patterns, ~flags, width_bits)
    assert bits.size == size, "accounting formula disagrees with emitted bits"
    return CompressedMap(
        format=fmt,
        payload=_pack(bits),
        dims=tuple(int(d) for d in patterns.shape),
        width_bits=width_bits,
        size_bits=int(size),
        nnz_flagged=int(keep.sum()),
        rlc_run_bits=rlc_run_bits,
        plane_nnz=plane_nnz,
    )


def decode(c: CompressedMap) -> tuple[np.ndarray, np.ndarray]:
    """Recover (kept values in flat row-major position order, flag mask).

    The mask comes back shaped like the original map; kept values line up
    with the False entries of the mask scanned row-major.
    """
    if c.format == "bitmap":
        vals, flags = _decode_bitmap(c)
    elif c.format == "rlc":
        vals, flags = _decode_rlc(c)
    elif c.format == "csc":
        vals, flags = _decode_csc(c)
    else:
        raise CodecStreamError(f"unknown format {c.format!r}")
    if int((~flags).sum()) != c.nnz_flagged:
        raise CodecStreamError("decoded element count disagrees with container")
    return vals, flags.reshape(c.dims)


def size_ratio(
    patterns: np.ndarray,
    flags_correct: np.ndarray,
    flags_wrong: np.ndarray,
    fmt: str,
    width_bits: int = 16,
    rlc_run_bits: int = DEFAULT_RLC_RUN_BITS,
) -> Fraction:
    """Storage blowup of one flag stream over another: wrong / correct."""
    correct = encode(patterns, flags_correct, fmt, width_bits, rlc_run_bits)
    wrong = encode(patterns, flags_wrong, fmt, width_bits, rlc_run_bits)
    if correct.size_bits == 0:
        raise EmptyMap("reference encoding is empty; ratio undefined")
    return Fraction(wrong.size_bits, correct.size_bits)
