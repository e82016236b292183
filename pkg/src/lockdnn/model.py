"""Tensors, layer descriptors, the model container, and its on-disk format.

A model is a straight pipeline of layers in {conv2d, fc, maxpool,
relu_locked}. Composition rules are checked on construction and on load:

* the pipeline starts with conv2d or fc and ends with relu_locked;
* every conv2d/fc is followed by its relu_locked stage, with at most one
  maxpool in between (pooling sits before the rectifier stage; max and
  rectification commute, so values are unchanged and the stored map is the
  pooled one);
* fully connected layers consume the (C, H, W) map flattened row-major.

On disk a model is a JSON manifest plus a little-endian int16 blob holding
every raw weight and bias word; save followed by load is bit-exact.

The fixed-point compute kernels live here too. They accumulate in a fixed
ascending input-index order (channel-major, then kernel row, then kernel
column), saturating every step at the word width unless the wide
accumulator is requested; the reference forward pass and the locked
pipeline share them, so the two paths can only differ through keys and
storage, never through arithmetic. Models are immutable after load and
safe to share across threads; ``forward_reference`` is reentrant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import BlobLengthMismatch, ManifestError, ShapeMismatch
from .numeric import QFormat, mac_step, relu_raw

MODEL_SCHEMA = "lockdnn-model-v1"

LAYER_KINDS = ("conv2d", "fc", "maxpool", "relu_locked")


@dataclass(frozen=True, eq=False)
class Tensor:
    """A dense array with explicit extents; data is flat, row-major."""

    dims: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        if any(d <= 0 for d in self.dims):
            raise ShapeMismatch(f"nonpositive extent in {self.dims}")
        if int(np.prod(self.dims)) != self.data.size:
            raise ShapeMismatch(
                f"extents {self.dims} need {int(np.prod(self.dims))} elements, "
                f"data has {self.data.size}"
            )

    def reshaped(self) -> np.ndarray:
        return self.data.reshape(self.dims)


@dataclass(frozen=True, eq=False)
class LayerSpec:
    kind: str
    params: dict
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ManifestError(f"unknown layer kind {self.kind!r}")


@dataclass(frozen=True, eq=False)
class ObfuscationMeta:
    groups: int
    msb_bits: int
    group_map: dict  # layer index -> group id per bias position


@dataclass(frozen=True, eq=False)
class Model:
    name: str
    qformat: QFormat
    classes: int
    input_dims: tuple[int, int, int]  # (C, H, W)
    layers: tuple[LayerSpec, ...]
    obfuscation: ObfuscationMeta | None = None

    @property
    def obfuscated(self) -> bool:
        return self.obfuscation is not None

    def __post_init__(self):
        validate_pipeline(self)


def conv_out_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    return oh, ow


def pool_out_hw(h: int, w: int, k: int, stride: int) -> tuple[int, int]:
    return (h - k) // stride + 1, (w - k) // stride + 1


def validate_pipeline(model: Model) -> None:
    """Shape-compose every layer and enforce the stage ordering rules."""
    if not model.layers:
        raise ShapeMismatch("model has no layers")
    if model.layers[0].kind not in ("conv2d", "fc"):
        raise ShapeMismatch("pipeline must start with conv2d or fc")
    if model.layers[-1].kind != "relu_locked":
        raise ShapeMismatch("pipeline must end with a relu_locked stage")

    c, h, w = model.input_dims
    pending = None  # conv2d/fc awaiting its relu_locked stage
    for idx, layer in enumerate(model.layers):
        p = layer.params
        if layer.kind == "conv2d":
            if pending is not None:
                raise ShapeMismatch(f"layer {idx}: previous {pending} has no relu_locked stage")
            k, s, pad = p["kernel"], p["stride"], p["padding"]
            expect = (p["out_channels"], p["in_channels"], k, k)
            if layer.weight is None or layer.weight.size != int(np.prod(expect)):
                raise ShapeMismatch(f"layer {idx}: conv weight does not match {expect}")
            if layer.bias is None or layer.bias.size != p["out_channels"]:
                raise ShapeMismatch(f"layer {idx}: conv bias length != out_channels")
            if p["in_channels"] != c:
                raise ShapeMismatch(f"layer {idx}: expects {p['in_channels']} channels, map has {c}")
            oh, ow = conv_out_hw(h, w, k, s, pad)
            if oh < 1 or ow < 1:
                raise ShapeMismatch(f"layer {idx}: kernel {k} too large for {h}x{w}")
            c, h, w = p["out_channels"], oh, ow
            pending = "conv2d"
        elif layer.kind == "fc":
            if pending is not None:
                raise ShapeMismatch(f"layer {idx}: previous {pending} has no relu_locked stage")
            if p["in_features"] != c * h * w:
                raise ShapeMismatch(
                    f"layer {idx}: fc expects {p['in_features']} inputs, map has {c * h * w}"
                )
            if layer.weight is None or layer.weight.size != p["out_features"] * p["in_features"]:
                raise ShapeMismatch(f"layer {idx}: fc weight extents wrong")
            if layer.bias is None or layer.bias.size != p["out_features"]:
                raise ShapeMismatch(f"layer {idx}: fc bias length != out_features")
            c, h, w = p["out_features"], 1, 1
            pending = "fc"
        elif layer.kind == "maxpool":
            if pending != "conv2d":
                raise ShapeMismatch(f"layer {idx}: maxpool only sits between conv2d and relu_locked")
            k, s = p["kernel"], p["stride"]
            oh, ow = pool_out_hw(h, w, k, s)
            if oh < 1 or ow < 1:
                raise ShapeMismatch(f"layer {idx}: pool window {k} too large for {h}x{w}")
            h, w = oh, ow
        elif layer.kind == "relu_locked":
            if pending is None:
                raise ShapeMismatch(f"layer {idx}: relu_locked without a preceding conv2d/fc")
            pending = None
    if pending is not None:
        raise ShapeMismatch(f"trailing {pending} has no relu_locked stage")


def layer_output_dims(model: Model) -> list[tuple[int, int, int]]:
    """(C, H, W) of the map each layer emits, in layer order."""
    c, h, w = model.input_dims
    out = []
    for layer in model.layers:
        p = layer.params
        if layer.kind == "conv2d":
            oh, ow = conv_out_hw(h, w, p["kernel"], p["stride"], p["padding"])
            c, h, w = p["out_channels"], oh, ow
        elif layer.kind == "fc":
            c, h, w = p["out_features"], 1, 1
        elif layer.kind == "maxpool":
            h, w = pool_out_hw(h, w, p["kernel"], p["stride"])
        out.append((c, h, w))
    return out


# ----------------------------- fixed-point kernels -----------------------------

def conv2d_raw(
    x: np.ndarray, weight: np.ndarray, stride: int, padding: int,
    q: QFormat, wide: bool = False,
) -> np.ndarray:
    """Pre-bias convolution accumulator over raw words.

    x: (N, C, H, W) signed raws; weight: (O, C, k, k). Accumulates products
    one kernel tap at a time in (channel, row, col) order so the saturation
    behavior is identical no matter how the caller batches work.
    """
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    oh, ow = conv_out_hw(h, w, k, stride, padding)
    xp = x
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.int64)
        xp[:, :, padding : padding + h, padding : padding + w] = x
    acc = np.zeros((n, o, oh, ow), dtype=np.int64)
    for ci in range(c):
        for i in range(k):
            for j in range(k):
                tap = xp[:, ci, i : i + stride * oh : stride, j : j + stride * ow : stride]
                acc = mac_step(
                    acc, tap[:, None, :, :], weight[None, :, ci, i, j, None, None], q, wide
                )
    return q.saturate(acc) if wide else acc


def fc_raw(
    x: np.ndarray, weight: np.ndarray, q: QFormat, wide: bool = False
) -> np.ndarray:
    """Pre-bias fully-connected accumulator: x (N, F_in) -> (N, F_out)."""
    n, f_in = x.shape
    f_out = weight.shape[0]
    acc = np.zeros((n, f_out), dtype=np.int64)
    for kk in range(f_in):
        acc = mac_step(acc, x[:, kk, None], weight[None, :, kk], q, wide)
    return q.saturate(acc) if wide else acc


def maxpool_raw(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    n, c, h, w = x.shape
    oh, ow = pool_out_hw(h, w, k, stride)
    out = np.full((n, c, oh, ow), np.iinfo(np.int64).min, dtype=np.int64)
    for i in range(k):
        for j in range(k):
            win = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            out = np.maximum(out, win)
    return out


def bias_add_plain(acc: np.ndarray, bias: np.ndarray, q: QFormat) -> np.ndarray:
    """Unkeyed bias adder: broadcast over the channel axis, saturating."""
    if acc.ndim == 4:
        return q.saturate(acc + bias[None, :, None, None])
    return q.saturate(acc + bias[None, :])


def forward_reference(model: Model, x: Tensor, wide: bool = False) -> Tensor:
    """Golden unlocked inference: plain rectifier, no keys, no storage path.

    Returns the final feature map, dims (N, classes, 1, 1) for classifier
    pipelines. Bit-deterministic: pure integer arithmetic throughout.
    """
    q = model.qformat
    data = x.reshaped().astype(np.int64)
    if data.ndim != 4 or data.shape[1:] != model.input_dims:
        raise ShapeMismatch(
            f"input dims {x.dims} do not match model input {model.input_dims}"
        )
    cur = data
    for layer in model.layers:
        p = layer.params
        if layer.kind == "conv2d":
            acc = conv2d_raw(cur, layer.weight.reshape(
                p["out_channels"], p["in_channels"], p["kernel"], p["kernel"]
            ), p["stride"], p["padding"], q, wide)
            cur = bias_add_plain(acc, layer.bias, q)
        elif layer.kind == "fc":
            flat = cur.reshape(cur.shape[0], -1)
            acc = fc_raw(flat, layer.weight.reshape(p["out_features"], p["in_features"]), q, wide)
            cur = bias_add_plain(acc, layer.bias, q)[:, :, None, None]
        elif layer.kind == "maxpool":
            cur = maxpool_raw(cur, p["kernel"], p["stride"])
        elif layer.kind == "relu_locked":
            cur = relu_raw(cur)
    return Tensor(tuple(cur.shape), cur.reshape(-1))


def logits_of(out: Tensor) -> np.ndarray:
    """Final map -> (N, classes) logit words."""
    return out.reshaped().reshape(out.dims[0], -1)


# ----------------------------- on-disk format -----------------------------

def _layer_to_json(layer: LayerSpec, offsets: dict) -> dict:
    doc = {"kind": layer.kind, "params": dict(layer.params)}
    if layer.weight is not None:
        doc["weight"] = offsets["weight"]
        doc["bias"] = offsets["bias"]
    return doc


def save_model(model: Model, json_path, bin_path=None) -> None:
    json_path = Path(json_path)
    bin_path = Path(bin_path) if bin_path else json_path.with_suffix(".bin")
    blob = bytearray()
    layers_doc = []
    for layer in model.layers:
        offsets = {}
        for name in ("weight", "bias"):
            arr = getattr(layer, name)
            if arr is None:
                continue
            raw = arr.astype("<i2").tobytes()
            offsets[name] = {"offset": len(blob), "len": len(raw)}
            blob.extend(raw)
        layers_doc.append(_layer_to_json(layer, offsets))
    doc = {
        "schema": MODEL_SCHEMA,
        "name": model.name,
        "qformat": {"width": model.qformat.width_bits, "frac": model.qformat.frac_bits},
        "classes": model.classes,
        "input_dims": list(model.input_dims),
        "blob": {"file": bin_path.name, "bytes": len(blob)},
        "layers": layers_doc,
    }
    if model.obfuscation is not None:
        doc["obfuscation"] = {
            "groups": model.obfuscation.groups,
            "msb_bits": model.obfuscation.msb_bits,
            "group_map": {str(k): list(v) for k, v in model.obfuscation.group_map.items()},
        }
    bin_path.write_bytes(bytes(blob))
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_blob_slice(blob: bytes, ref: dict, what: str) -> np.ndarray:
    try:
        offset, length = int(ref["offset"]), int(ref["len"])
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"{what}: bad blob reference") from e
    if length % 2 != 0:
        raise BlobLengthMismatch(f"{what}: byte length {length} is not word-aligned")
    if offset < 0 or offset + length > len(blob):
        raise BlobLengthMismatch(
            f"{what}: reference [{offset}, {offset + length}) outside blob of {len(blob)} bytes"
        )
    return np.frombuffer(blob, dtype="<i2", count=length // 2, offset=offset).astype(np.int64)


def load_model(json_path, bin_path=None) -> Model:
    json_path = Path(json_path)
    try:
        doc = json.loads(json_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"cannot read manifest: {e}") from e
    if doc.get("schema") != MODEL_SCHEMA:
        raise ManifestError(f"expected schema {MODEL_SCHEMA}, got {doc.get('schema')!r}")
    try:
        qf = QFormat(int(doc["qformat"]["width"]), int(doc["qformat"]["frac"]))
        blob_meta = doc["blob"]
        bin_path = Path(bin_path) if bin_path else json_path.parent / blob_meta["file"]
        blob = bin_path.read_bytes()
        if len(blob) != int(blob_meta["bytes"]):
            raise BlobLengthMismatch(
                f"blob is {len(blob)} bytes, manifest declares {blob_meta['bytes']}"
            )
        layers = []
        for i, ld in enumerate(doc["layers"]):
            kind = ld["kind"]
            params = {k: int(v) for k, v in ld["params"].items()}
            weight = bias = None
            if kind in ("conv2d", "fc"):
                weight = _read_blob_slice(blob, ld["weight"], f"layer {i} weight")
                bias = _read_blob_slice(blob, ld["bias"], f"layer {i} bias")
                expect_w = (
                    params["out_channels"] * params["in_channels"] * params["kernel"] ** 2
                    if kind == "conv2d"
                    else params["out_features"] * params["in_features"]
                )
                if weight.size != expect_w:
                    raise BlobLengthMismatch(
                        f"layer {i}: weight blob holds {weight.size} words, params need {expect_w}"
                    )
            layers.append(LayerSpec(kind, params, weight, bias))
        obf = None
        if "obfuscation" in doc:
            ob = doc["obfuscation"]
            obf = ObfuscationMeta(
                int(ob["groups"]),
                int(ob["msb_bits"]),
                {int(k): list(map(int, v)) for k, v in ob["group_map"].items()},
            )
        model = Model(
            name=str(doc["name"]),
            qformat=qf,
            classes=int(doc["classes"]),
            input_dims=tuple(int(d) for d in doc["input_dims"]),
            layers=tuple(layers),
            obfuscation=obf,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"malformed manifest field: {e}") from e
    except OSError as e:
        raise ManifestError(f"cannot read blob: {e}") from e
    return model


def with_biases(model: Model, new_biases: dict[int, np.ndarray], obfuscation) -> Model:
    """Copy of the model with some layers' biases replaced."""
    layers = []
    for i, layer in enumerate(model.layers):
        if i in new_biases:
            layers.append(replace(layer, bias=new_biases[i]))
        else:
            layers.append(layer)
    return replace(model, layers=tuple(layers), obfuscation=obfuscation)
