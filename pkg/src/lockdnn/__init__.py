"""Desk-scale, bit-exact simulator of a key-locked sparsity-aware DNN
accelerator: keyed match detectors, masked rectifier outputs, bias
obfuscation, sparse-storage accounting, and an attack harness."""

__version__ = "0.1.0"

from .numeric import FixedVal, QFormat, quantize, dequantize, mac, relu_plain
from .keying import (
    HkeyConfig,
    KeyGenParams,
    KeyMaterial,
    MkeyConfig,
    TVector,
    gen_keys,
    load_keys,
    save_keys,
    segment_match_fraction,
)
from .model import LayerSpec, Model, Tensor, forward_reference, load_model, save_model
from .compression import CompressedMap, decode, encode, size_ratio
from .sim import RunReport, SimOptions, run, sweep_hkeys
from .obfuscator import obfuscate, plan_allocation, verify_restoration
from .attacks import (
    AttackReport,
    ToyDataset,
    finetune_attack,
    key_sweep_distinguisher,
    make_blobs,
    removal_attack,
    train_toy,
)

__all__ = [
    "AttackReport",
    "CompressedMap",
    "FixedVal",
    "HkeyConfig",
    "KeyGenParams",
    "KeyMaterial",
    "LayerSpec",
    "MkeyConfig",
    "Model",
    "QFormat",
    "RunReport",
    "SimOptions",
    "TVector",
    "Tensor",
    "ToyDataset",
    "decode",
    "dequantize",
    "encode",
    "finetune_attack",
    "forward_reference",
    "gen_keys",
    "key_sweep_distinguisher",
    "load_keys",
    "load_model",
    "mac",
    "make_blobs",
    "obfuscate",
    "plan_allocation",
    "quantize",
    "relu_plain",
    "removal_attack",
    "run",
    "save_keys",
    "save_model",
    "segment_match_fraction",
    "size_ratio",
    "sweep_hkeys",
    "train_toy",
    "verify_restoration",
]
