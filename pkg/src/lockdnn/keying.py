"""Generation, storage, and allocation of all secret material.

One deployment owns four secrets:

* the ``T`` vector, a word-wide constant XORed onto every rectifier output
  (one shared value for all units, baked into the accelerator);
* the Hkey: per-match-detector c-bit segments ``HK*_i`` that gate the
  zero-detect flags (detectors outside the locked set act as plain
  detectors with no key input);
* the Mkey: per-bias-adder-group masks. The provider draws an m-bit mask
  ``V_i`` per group and a polarity vector ``P_i`` selecting XOR vs XNOR
  gates inside the adder; the key segment handed to the user is
  ``MK_i = V_i XOR P_i``. Polarity never leaves the hardware description,
  so MK alone does not reveal the masks.

Bias-to-group scheduling stands in for time-multiplexed adder sharing:
position ``p`` in a layer's bias vector maps to group ``p mod n_groups``.
The same rule assigns feature-map elements to match detectors.

Randomness comes from numpy's Philox counter-based generator keyed by the
user seed, with a fixed draw order (T, then HK* segments in detector order,
then V masks, then P polarity in group order), so key files regenerate
bit-identically from a seed. All structures are frozen after generation
and safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import KeyParamsError, ManifestError, SegmentWidthError

KEYS_SCHEMA = "lockdnn-keys-v1"
PRIVATE_SCHEMA = "lockdnn-private-v1"

MAX_SEGMENT_BITS = 24


@dataclass(frozen=True)
class TVector:
    """The shared rectifier-masking constant, as an unsigned bit pattern."""

    bits: int
    width: int = 16

    def __post_init__(self):
        if not (0 <= self.bits < (1 << self.width)):
            raise KeyParamsError(f"T pattern 0x{self.bits:x} wider than {self.width} bits")

    @property
    def sign_bit(self) -> int:
        return (self.bits >> (self.width - 1)) & 1


@dataclass(frozen=True)
class HkeyConfig:
    """Correct detector key segments plus which detectors carry key inputs."""

    n_detectors: int
    seg_bits: int
    locked: tuple[int, ...]
    correct: dict[int, int] = field(hash=False)

    def __post_init__(self):
        if self.n_detectors < 1:
            raise KeyParamsError("need at least one match detector")
        if not (1 <= self.seg_bits <= MAX_SEGMENT_BITS):
            raise KeyParamsError(f"segment width {self.seg_bits} outside 1..{MAX_SEGMENT_BITS}")
        if not self.locked:
            raise KeyParamsError("locked detector set must be nonempty")
        if sorted(set(self.locked)) != sorted(self.locked):
            raise KeyParamsError("duplicate locked detector ids")
        for i in self.locked:
            if not (0 <= i < self.n_detectors):
                raise KeyParamsError(f"locked detector id {i} out of range")
            if i not in self.correct:
                raise KeyParamsError(f"locked detector {i} has no correct segment")
            if not (0 <= self.correct[i] < (1 << self.seg_bits)):
                raise KeyParamsError(f"segment for detector {i} wider than {self.seg_bits} bits")

    @property
    def total_bits(self) -> int:
        return self.seg_bits * len(self.locked)

    def detector_of(self, flat_index: int) -> int:
        """Lane assignment: element i of a layer's map lands on detector i mod n."""
        return flat_index % self.n_detectors


@dataclass(frozen=True)
class MkeyConfig:
    """Bias-mask material. ``masks`` (V) and ``polarity`` (P) are per masked group."""

    n_groups: int
    msb_bits: int
    masked_groups: tuple[int, ...]
    masks: dict[int, int] = field(hash=False)
    polarity: dict[int, int] = field(hash=False)

    def __post_init__(self):
        if self.n_groups < 1:
            raise KeyParamsError("need at least one bias-adder group")
        if self.msb_bits < 1:
            raise KeyParamsError("mask width must be positive")
        limit = 1 << self.msb_bits
        for gid in self.masked_groups:
            if not (0 <= gid < self.n_groups):
                raise KeyParamsError(f"masked group {gid} out of range")
            for table, name in ((self.masks, "mask"), (self.polarity, "polarity")):
                if gid not in table:
                    raise KeyParamsError(f"group {gid} missing {name}")
                if not (0 <= table[gid] < limit):
                    raise KeyParamsError(f"{name} for group {gid} wider than {self.msb_bits} bits")

    @property
    def total_bits(self) -> int:
        return self.msb_bits * len(self.masked_groups)

    def mk_segment(self, gid: int) -> int:
        """The user-facing key segment for one group: V_i XOR P_i."""
        return self.masks[gid] ^ self.polarity[gid]

    def mk_segments(self) -> dict[int, int]:
        return {gid: self.mk_segment(gid) for gid in self.masked_groups}

    def group_of(self, bias_position: int) -> int:
        """Round-robin schedule: bias p of any layer shares adder group p mod g."""
        return bias_position % self.n_groups


@dataclass(frozen=True)
class KeyMaterial:
    t: TVector
    hkey: HkeyConfig
    mkey: MkeyConfig
    seed: int


@dataclass(frozen=True)
class KeyGenParams:
    seg_bits: int = 8
    n_detectors: int = 4
    n_locked: int | None = None  # default: lock every detector
    n_groups: int = 16
    msb_bits: int = 2
    width_bits: int = 16

    def resolved_locked(self) -> int:
        return self.n_detectors if self.n_locked is None else self.n_locked


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed)))


def _draw_bits(rng: np.random.Generator, width: int) -> int:
    return int(rng.integers(0, 1 << width))


def gen_keys(seed: int, params: KeyGenParams, model=None) -> KeyMaterial:
    """Draw a full key set deterministically from ``seed``.

    ``model`` is optional; when given, the group count is checked against
    the widest bias vector so no group stays permanently empty.
    """
    n_locked = params.resolved_locked()
    if not (1 <= n_locked <= params.n_detectors):
        raise KeyParamsError(
            f"locked count {n_locked} inconsistent with {params.n_detectors} detectors"
        )
    if params.msb_bits < 2:
        raise KeyParamsError("masks narrower than 2 bits do not degrade accuracy reliably")
    if model is not None:
        widest = max(
            (len(layer.bias) for layer in model.layers if layer.bias is not None),
            default=0,
        )
        if widest and params.n_groups > widest:
            raise KeyParamsError(
                f"{params.n_groups} groups but widest bias vector has {widest} entries"
            )

    rng = _rng(seed)
    t = TVector(_draw_bits(rng, params.width_bits), params.width_bits)
    locked = tuple(range(n_locked))
    correct = {i: _draw_bits(rng, params.seg_bits) for i in locked}
    hkey = HkeyConfig(params.n_detectors, params.seg_bits, locked, correct)
    groups = tuple(range(params.n_groups))
    masks = {g: _draw_bits(rng, params.msb_bits) for g in groups}
    polarity = {g: _draw_bits(rng, params.msb_bits) for g in groups}
    mkey = MkeyConfig(params.n_groups, params.msb_bits, groups, masks, polarity)
    return KeyMaterial(t=t, hkey=hkey, mkey=mkey, seed=int(seed))


def random_hkey_assignment(rng: np.random.Generator, hkey: HkeyConfig) -> dict[int, int]:
    """A uniformly random key segment per locked detector."""
    return {i: _draw_bits(rng, hkey.seg_bits) for i in hkey.locked}


def wrong_hkey_assignment(rng: np.random.Generator, hkey: HkeyConfig) -> dict[int, int]:
    """Random segments, resampled until every segment differs from HK*."""
    out = {}
    for i in hkey.locked:
        v = _draw_bits(rng, hkey.seg_bits)
        while v == hkey.correct[i]:
            v = _draw_bits(rng, hkey.seg_bits)
        out[i] = v
    return out


def segment_match_fraction(c: int) -> Fraction:
    """Fraction of c-bit patterns equal to a fixed correct segment: 1 / 2^c."""
    if not (1 <= c <= MAX_SEGMENT_BITS):
        raise SegmentWidthError(f"segment width {c} outside 1..{MAX_SEGMENT_BITS}")
    return Fraction(1, 1 << c)


# ----------------------------- serialization -----------------------------

def _hex(bits: int, width: int) -> str:
    return f"{bits:0{(width + 3) // 4}x}"


def keys_to_json(km: KeyMaterial) -> dict:
    """The deployment key file: T, correct HK segments, user MK segments."""
    return {
        "schema": KEYS_SCHEMA,
        "seed": km.seed,
        "width_bits": km.t.width,
        "t": _hex(km.t.bits, km.t.width),
        "hkey": {
            "seg_bits": km.hkey.seg_bits,
            "n_detectors": km.hkey.n_detectors,
            "locked": list(km.hkey.locked),
            "segments": {str(i): _hex(km.hkey.correct[i], km.hkey.seg_bits) for i in km.hkey.locked},
        },
        "mkey": {
            "msb_bits": km.mkey.msb_bits,
            "n_groups": km.mkey.n_groups,
            "masked_groups": list(km.mkey.masked_groups),
            "segments": {
                str(g): _hex(km.mkey.mk_segment(g), km.mkey.msb_bits)
                for g in km.mkey.masked_groups
            },
        },
        "group_rule": {"kind": "round_robin", "groups": km.mkey.n_groups},
    }


def private_to_json(km: KeyMaterial) -> dict:
    """Tamper-proof-memory stand-in: HK* and the adder polarity vectors."""
    return {
        "schema": PRIVATE_SCHEMA,
        "hk_star": {str(i): _hex(km.hkey.correct[i], km.hkey.seg_bits) for i in km.hkey.locked},
        "polarity": {
            str(g): _hex(km.mkey.polarity[g], km.mkey.msb_bits) for g in km.mkey.masked_groups
        },
    }


def save_keys(km: KeyMaterial, keys_path, private_path) -> None:
    Path(keys_path).write_text(json.dumps(keys_to_json(km), indent=2, sort_keys=True) + "\n")
    Path(private_path).write_text(
        json.dumps(private_to_json(km), indent=2, sort_keys=True) + "\n"
    )


def load_keys(keys_path, private_path) -> KeyMaterial:
    try:
        pub = json.loads(Path(keys_path).read_text())
        priv = json.loads(Path(private_path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"cannot read key files: {e}") from e
    for doc, schema in ((pub, KEYS_SCHEMA), (priv, PRIVATE_SCHEMA)):
        if doc.get("schema") != schema:
            raise ManifestError(f"expected schema {schema}, got {doc.get('schema')!r}")
    try:
        width = int(pub["width_bits"])
        t = TVector(int(pub["t"], 16), width)
        hk = pub["hkey"]
        locked = tuple(int(i) for i in hk["locked"])
        correct = {int(i): int(v, 16) for i, v in priv["hk_star"].items()}
        hkey = HkeyConfig(int(hk["n_detectors"]), int(hk["seg_bits"]), locked, correct)
        mk = pub["mkey"]
        masked = tuple(int(g) for g in mk["masked_groups"])
        polarity = {int(g): int(v, 16) for g, v in priv["polarity"].items()}
        segments = {int(g): int(v, 16) for g, v in mk["segments"].items()}
        masks = {g: segments[g] ^ polarity[g] for g in masked}
        mkey = MkeyConfig(int(mk["n_groups"]), int(mk["msb_bits"]), masked, masks, polarity)
        seed = int(pub.get("seed", 0))
    except (KeyError, ValueError) as e:
        raise ManifestError(f"malformed key file field: {e}") from e
    return KeyMaterial(t=t, hkey=hkey, mkey=mkey, seed=seed)
