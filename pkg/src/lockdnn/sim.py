"""Drives the locked accelerator pipeline and accounts memory and energy.

Per conv2d/fc layer: MAC array -> keyed bias adders -> (optional maxpool)
-> locked rectifier -> match detectors -> compression -> store. Every
stored map then goes through the real decode + T-restore read path before
the next layer consumes it, so anything the codecs or detectors did wrong
would corrupt the logits instead of hiding.

Accounting model, all constants echoed in the report:

* stored_bits: exact encoded size of each rectifier stage's output map
  under the flag stream the detectors actually produced;
* bytes_moved: ceil(bits/8) written per stage plus the same read back for
  every stage that a later layer consumes (weights and the input image are
  not modeled);
* energy_units = mac_count * e_mac + bytes_moved * e_mem_per_byte, with
  e_mac = 1 and e_mem_per_byte = 25 (one 8-bit access costs 200 MACs);
* latency_cycles = ceil(mac_count / macs_per_cycle)
                 + ceil(bytes_moved / bytes_per_cycle).

One run is sequential over layers; independent runs (key sweeps, batches)
are free to execute in parallel since everything here is pure.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .compression import encode, decode, DEFAULT_RLC_RUN_BITS
from .datapath import apply_mask_msbs, detect_flags, readback_map, relu_locked_map
from .errors import KeyParamsError, ShapeMismatch
from .keying import KeyMaterial
from .model import (
    Model,
    Tensor,
    bias_add_plain,
    conv2d_raw,
    fc_raw,
    logits_of,
    maxpool_raw,
)


@dataclass(frozen=True)
class SimOptions:
    fmt: str = "bitmap"
    rlc_run_bits: int = DEFAULT_RLC_RUN_BITS
    wide_accumulator: bool = False
    e_mac: int = 1
    e_mem_per_byte: int = 25
    macs_per_cycle: int = 64
    bytes_per_cycle: int = 8


@dataclass(frozen=True)
class LayerAccount:
    """Accounting for one rectifier stage's stored map."""

    layer_index: int
    produced_by: str  # kind of the compute layer feeding this stage
    elements: int
    nnz_flagged: int
    stored_bits: int
    reference_bits: int

    @property
    def size_ratio(self) -> float | None:
        if self.reference_bits == 0:
            return None
        return self.stored_bits / self.reference_bits


@dataclass(frozen=True)
class RunReport:
    config: dict
    layers: tuple[LayerAccount, ...]
    stored_bits: int
    bytes_moved: int
    mac_count: int
    energy_units: int
    latency_cycles: int
    logits: np.ndarray  # (N, classes) raw words
    logits_sha256: str

    def layer_table(self) -> list[dict]:
        rows = []
        for acc in self.layers:
            rows.append(
                {
                    "layer_index": acc.layer_index,
                    "produced_by": acc.produced_by,
                    "elements": acc.elements,
                    "nnz_flagged": acc.nnz_flagged,
                    "stored_bits": acc.stored_bits,
                    "reference_bits": acc.reference_bits,
                    "size_ratio": acc.size_ratio,
                }
            )
        return rows


def _sha256_of_words(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<i8").tobytes()).hexdigest()


def _hash_assignment(assignment: dict | None) -> str:
    if assignment is None:
        return "none"
    blob = ",".join(f"{k}:{v}" for k, v in sorted(assignment.items()))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _restored_biases(layer_bias, group_ids, mk, polarity, m, q):
    """Per-position keyed bias restore inside the adders."""
    out = np.empty_like(layer_bias)
    for pos, gid in enumerate(group_ids):
        if gid in polarity:
            seg = 0 if mk is None else mk.get(gid, 0)
            out[pos] = apply_mask_msbs(int(layer_bias[pos]), seg ^ polarity[gid], m, q)
        else:
            out[pos] = layer_bias[pos]
    return out


def run(
    model: Model,
    x: Tensor,
    keys: KeyMaterial,
    hk: dict | None,
    mk: dict | None = None,
    options: SimOptions = SimOptions(),
    detector_override: str | None = None,
) -> RunReport:
    """Simulate one inference under the given user keys.

    ``hk`` maps locked detector ids to the c-bit segments the user applies
    (None = no segments wired up). ``mk`` maps bias-adder groups to m-bit
    segments; it is only consulted when the model carries obfuscated
    biases. ``detector_override`` pins every detector flag ("zero"/"one")
    to emulate a removal attack.
    """
    q = model.qformat
    t = keys.t
    if t.width != q.width_bits:
        raise KeyParamsError("T width does not match the model word width")
    data = x.reshaped().astype(np.int64)
    if data.ndim != 4 or data.shape[1:] != model.input_dims:
        raise ShapeMismatch(f"input dims {x.dims} do not match model input {model.input_dims}")

    obf = model.obfuscation
    cur = data
    mac_count = 0
    accounts: list[LayerAccount] = []
    produced_by = None
    for idx, layer in enumerate(model.layers):
        p = layer.params
        if layer.kind == "conv2d":
            weight = layer.weight.reshape(
                p["out_channels"], p["in_channels"], p["kernel"], p["kernel"]
            )
            acc = conv2d_raw(cur, weight, p["stride"], p["padding"], q, options.wide_accumulator)
            mac_count += acc.size * (p["in_channels"] * p["kernel"] ** 2)
            bias = layer.bias
            if obf is not None and idx in obf.group_map:
                bias = _restored_biases(
                    layer.bias, obf.group_map[idx], mk, keys.mkey.polarity, obf.msb_bits, q
                )
            cur = bias_add_plain(acc, bias, q)
            produced_by = "conv2d"
        elif layer.kind == "fc":
            acc = fc_raw(
                cur.reshape(cur.shape[0], -1),
                layer.weight.reshape(p["out_features"], p["in_features"]),
                q,
                options.wide_accumulator,
            )
            mac_count += acc.size * p["in_features"]
            bias = layer.bias
            if obf is not None and idx in obf.group_map:
                bias = _restored_biases(
                    layer.bias, obf.group_map[idx], mk, keys.mkey.polarity, obf.msb_bits, q
                )
            cur = bias_add_plain(acc, bias, q)[:, :, None, None]
            produced_by = "fc"
        elif layer.kind == "maxpool":
            cur = maxpool_raw(cur, p["kernel"], p["stride"])
        elif layer.kind == "relu_locked":
            pats = relu_locked_map(cur, t, q)
            flags = detect_flags(pats, t, keys.hkey, hk, override=detector_override).reshape(
                pats.shape
            )
            stored = encode(pats, flags, options.fmt, q.width_bits, options.rlc_run_bits)
            ref_flags = (pats == t.bits)
            reference = encode(pats, ref_flags, options.fmt, q.width_bits, options.rlc_run_bits)
            vals, back_flags = decode(stored)
            cur = readback_map(vals, back_flags.reshape(-1), t, q).reshape(pats.shape)
            accounts.append(
                LayerAccount(
                    layer_index=idx,
                    produced_by=produced_by or "input",
                    elements=int(pats.size),
                    nnz_flagged=stored.nnz_flagged,
                    stored_bits=stored.size_bits,
                    reference_bits=reference.size_bits,
                )
            )
    stored_bits = sum(a.stored_bits for a in accounts)
    written = sum((a.stored_bits + 7) // 8 for a in accounts)
    read_back = sum((a.stored_bits + 7) // 8 for a in accounts[:-1])
    bytes_moved = written + read_back
    energy = mac_count * options.e_mac + bytes_moved * options.e_mem_per_byte
    latency = -(-mac_count // options.macs_per_cycle) + -(-bytes_moved // options.bytes_per_cycle)
    logits = logits_of(Tensor(tuple(cur.shape), cur.reshape(-1)))
    config = {
        "format": options.fmt,
        "rlc_run_bits": options.rlc_run_bits,
        "wide_accumulator": options.wide_accumulator,
        "qformat": {"width": q.width_bits, "frac": q.frac_bits},
        "e_mac": options.e_mac,
        "e_mem_per_byte": options.e_mem_per_byte,
        "macs_per_cycle": options.macs_per_cycle,
        "bytes_per_cycle": options.bytes_per_cycle,
        "model": model.name,
        "model_obfuscated": model.obfuscated,
        "n_detectors": keys.hkey.n_detectors,
        "seg_bits": keys.hkey.seg_bits,
        "locked_detectors": list(keys.hkey.locked),
        "hkey_hash": _hash_assignment(hk),
        "mkey_hash": _hash_assignment(mk),
        "t_hash": hashlib.sha256(f"{t.bits:04x}".encode()).hexdigest()[:16],
        "detector_override": detector_override,
        "input_sha256": _sha256_of_words(data),
        "batch": int(data.shape[0]),
    }
    return RunReport(
        config=config,
        layers=tuple(accounts),
        stored_bits=stored_bits,
        bytes_moved=bytes_moved,
        mac_count=mac_count,
        energy_units=energy,
        latency_cycles=latency,
        logits=logits,
        logits_sha256=_sha256_of_words(logits),
    )


@dataclass(frozen=True)
class SweepRow:
    key_hash: str
    assignment: dict = field(hash=False)
    stored_bits: int = 0
    logits_sha256: str = ""


def sweep_hkeys(
    model: Model,
    x: Tensor,
    keys: KeyMaterial,
    n_random_keys: int,
    options: SimOptions = SimOptions(),
    seed: int = 0,
    include_correct: bool = False,
    mk: dict | None = None,
) -> list[SweepRow]:
    """Run the pipeline under random Hkeys and tabulate storage vs logits."""
    if n_random_keys < 1:
        raise KeyParamsError("sweep needs at least one key")
    rng = np.random.Generator(np.random.Philox(key=seed))
    assignments = []
    if include_correct:
        assignments.append(dict(keys.hkey.correct))
    for _ in range(n_random_keys):
        assignments.append(
            {i: int(rng.integers(0, 1 << keys.hkey.seg_bits)) for i in keys.hkey.locked}
        )
    if mk is None and model.obfuscated:
        mk = keys.mkey.mk_segments()
    rows = []
    for a in assignments:
        rep = run(model, x, keys, a, mk, options)
        rows.append(
            SweepRow(
                key_hash=_hash_assignment(a),
                assignment=a,
                stored_bits=rep.stored_bits,
                logits_sha256=rep.logits_sha256,
            )
        )
    return rows
