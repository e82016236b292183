"""Model-side bias obfuscation and its inverse check.

The provider XORs an m-bit secret vector onto the top m bits of every bias
in a masked adder group before publishing the model; weights are never
touched. The published manifest records group structure (group count, mask
width, per-layer group map) but none of the mask or polarity bits, so the
file set handed out carries no material that shortcuts recovery. Inside an
authorized accelerator the keyed bias adders undo the masks, because the
user's MK_i equals V_i XOR P_i and the gates apply MK_i XOR P_i = V_i.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datapath import apply_mask_msbs
from .errors import AllocationError, AlreadyObfuscated, ArchitectureMismatch, GroupCoverageError
from .keying import MkeyConfig
from .model import Model, ObfuscationMeta, with_biases


def build_group_map(model: Model, mkey: MkeyConfig) -> dict[int, list[int]]:
    """Adder-group id per bias position for every layer that has biases."""
    out = {}
    for idx, layer in enumerate(model.layers):
        if layer.bias is not None:
            out[idx] = [mkey.group_of(p) for p in range(layer.bias.size)]
    return out


def obfuscate(model: Model, mkey: MkeyConfig) -> Model:
    """Mask the bias MSBs group by group; returns the publishable model."""
    if model.obfuscated:
        raise AlreadyObfuscated(f"model {model.name!r} is already obfuscated")
    group_map = build_group_map(model, mkey)
    if not group_map:
        raise GroupCoverageError("model has no biases to obfuscate")
    q = model.qformat
    masked_set = set(mkey.masked_groups)
    new_biases = {}
    for idx, gids in group_map.items():
        bias = model.layers[idx].bias
        out = bias.copy()
        for pos, gid in enumerate(gids):
            if gid in masked_set:
                out[pos] = apply_mask_msbs(int(bias[pos]), mkey.masks[gid], mkey.msb_bits, q)
        new_biases[idx] = out
    meta = ObfuscationMeta(groups=mkey.n_groups, msb_bits=mkey.msb_bits, group_map=group_map)
    return with_biases(model, new_biases, meta)


@dataclass(frozen=True)
class RestorationCheck:
    ok: bool
    mismatched_groups: tuple[int, ...]

    def __bool__(self) -> bool:
        return self.ok


def verify_restoration(
    orig: Model, obf: Model, mk: dict[int, int], polarity: dict[int, int]
) -> RestorationCheck:
    """Does applying MK across the given polarity reproduce ``orig`` exactly?

    Reports which adder groups still differ, which pins a wrong or missing
    key segment to its group.
    """
    if len(orig.layers) != len(obf.layers):
        raise ArchitectureMismatch("layer counts differ")
    for a, b in zip(orig.layers, obf.layers):
        if a.kind != b.kind or a.params != b.params:
            raise ArchitectureMismatch("layer structure differs")
    if obf.obfuscation is None:
        raise ArchitectureMismatch("second model carries no obfuscation metadata")
    meta = obf.obfuscation
    q = obf.qformat
    bad: set[int] = set()
    for idx, gids in meta.group_map.items():
        orig_bias = orig.layers[idx].bias
        obf_bias = obf.layers[idx].bias
        for pos, gid in enumerate(gids):
            word = int(obf_bias[pos])
            if gid in polarity:
                word = apply_mask_msbs(word, mk.get(gid, 0) ^ polarity[gid], meta.msb_bits, q)
            if word != int(orig_bias[pos]):
                bad.add(gid)
    return RestorationCheck(ok=not bad, mismatched_groups=tuple(sorted(bad)))


def plan_allocation(total_bits: int, n_adders: int) -> MkeyConfig:
    """Split an Mkey budget over the bias adders.

    With at least two bits available per adder, every group is masked with
    m = total_bits // n_adders MSBs. With a smaller budget, the minimum
    useful mask of 2 bits goes to the first total_bits // 2 groups and the
    rest stay plain. Returns a skeleton config (masks still to be drawn);
    its total_bits reflects the bits actually allocated.
    """
    if total_bits < 2:
        raise AllocationError("an Mkey shorter than 2 bits masks nothing")
    if total_bits % 2 != 0:
        raise AllocationError("Mkey length must be even")
    if n_adders < 1:
        raise AllocationError("need at least one bias adder")
    if total_bits >= 2 * n_adders:
        m = total_bits // n_adders
        masked = tuple(range(n_adders))
    else:
        m = 2
        masked = tuple(range(total_bits // 2))
    zeros = {g: 0 for g in masked}
    return MkeyConfig(
        n_groups=n_adders, msb_bits=m, masked_groups=masked, masks=dict(zeros), polarity=dict(zeros)
    )


def fill_allocation(plan: MkeyConfig, rng: np.random.Generator) -> MkeyConfig:
    """Draw random masks and polarity for a skeleton allocation."""
    masks = {g: int(rng.integers(0, 1 << plan.msb_bits)) for g in plan.masked_groups}
    pol = {g: int(rng.integers(0, 1 << plan.msb_bits)) for g in plan.masked_groups}
    return MkeyConfig(plan.n_groups, plan.msb_bits, plan.masked_groups, masks, pol)


def leaked_secret_bytes(published: bytes, mkey: MkeyConfig) -> list[str]:
    """Scan a published artifact for literal encodings of V or P.

    Returns labels of any secret whose packed byte string or hex string
    appears in the file; an empty list means the scan found nothing.
    """
    findings = []
    for name, table in (("masks", mkey.masks), ("polarity", mkey.polarity)):
        bits = 0
        for g in sorted(table):
            bits = (bits << mkey.msb_bits) | table[g]
        width = mkey.msb_bits * len(table)
        if width < 16:
            continue  # too short to be a meaningful needle
        nbytes = (width + 7) // 8
        packed = (bits << (nbytes * 8 - width)).to_bytes(nbytes, "big")
        hexstr = f"{bits:0{(width + 3) // 4}x}"
        if packed in published or hexstr.encode() in published:
            findings.append(name)
    return findings
