"""Command-line workflow: key generation, toy-model training, obfuscation,
locked runs, key sweeps, and the attack harness.

Every command writes machine-readable artifacts (JSON reports, CSV tables,
PNG figures next to them) and echoes its full configuration, so rerunning
a command reproduces its JSON and CSV outputs byte for byte. Exit codes:
0 success, 2 usage, 3 data errors (bad files, bad streams), 4 invariant
violations (inconsistent keys, double obfuscation, quantization gap).
Errors print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import (
    ALPHA_GRID,
    TOY_QFORMAT,
    default_toy_dataset,
    finetune_attack,
    key_sweep_distinguisher,
    make_blobs,
    removal_accuracy,
    removal_attack,
    toy_cnn_arch,
    toy_mlp_arch,
    train_toy,
    TrainConfig,
)
from .errors import LockDNNError
from .keying import (
    KeyGenParams,
    gen_keys,
    load_keys,
    save_keys,
    wrong_hkey_assignment,
    _rng,
)
from .model import Tensor, load_model, save_model
from .numeric import quantize_array
from .obfuscator import obfuscate, verify_restoration
from .report import (
    attack_report_doc,
    render_finetune_figure,
    render_removal_figure,
    render_run_figure,
    render_sweep_figure,
    run_report_doc,
    sweep_doc,
    write_json,
    write_layer_csv,
    write_sweep_csv,
)
from .sim import SimOptions, SweepRow, run, _hash_assignment

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_INVARIANT = 4


def _seed_of(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("LOCKDNN_SEED")
    return int(env) if env else 0


def _parse_hkey(spec: str, keys, seed: int) -> dict | None:
    """correct | wrong | none | hex string of the concatenated segments."""
    hk = keys.hkey
    if spec == "correct":
        return dict(hk.correct)
    if spec == "wrong":
        return wrong_hkey_assignment(_rng(seed ^ 0x5EED), hk)
    if spec == "none":
        return None
    bits = int(spec, 16)
    total = hk.total_bits
    if bits >= 1 << total:
        raise LockDNNError(f"hkey value wider than {total} bits")
    out = {}
    for pos, det in enumerate(sorted(hk.locked)):
        shift = total - hk.seg_bits * (pos + 1)
        out[det] = (bits >> shift) & ((1 << hk.seg_bits) - 1)
    return out


def _parse_mkey(spec: str, keys) -> dict | None:
    mk = keys.mkey
    if spec == "correct":
        return mk.mk_segments()
    if spec == "zero":
        return {g: 0 for g in mk.masked_groups}
    if spec == "none":
        return None
    bits = int(spec, 16)
    total = mk.total_bits
    if bits >= 1 << total:
        raise LockDNNError(f"mkey value wider than {total} bits")
    out = {}
    for pos, g in enumerate(sorted(mk.masked_groups)):
        shift = total - mk.msb_bits * (pos + 1)
        out[g] = (bits >> shift) & ((1 << mk.msb_bits) - 1)
    return out


def _load_input(args, model, seed: int) -> Tensor:
    if args.input:
        arr = np.load(args.input)
        if arr.ndim == 2:
            arr = arr.reshape(arr.shape[0], *model.input_dims)
    else:
        rng = _rng(seed ^ 0x1A7)
        arr = rng.normal(0.0, 0.5, size=(args.batch, *model.input_dims))
    raws = quantize_array(arr, model.qformat)
    return Tensor(tuple(raws.shape), raws.reshape(-1))


def _sim_options(args) -> SimOptions:
    return SimOptions(
        fmt=args.format,
        rlc_run_bits=args.rlc_run_bits,
        wide_accumulator=getattr(args, "wide_acc", False),
    )


def _emit(doc: dict, report_path, csv_writer=None, figure_renderer=None,
          no_figures=False, no_csv=False) -> None:
    report_path = Path(report_path)
    write_json(doc, report_path)
    print(f"wrote {report_path}")
    if csv_writer and not no_csv:
        csv_path = report_path.with_suffix(".csv")
        csv_writer(csv_path)
        print(f"wrote {csv_path}")
    if figure_renderer and not no_figures:
        png_path = report_path.with_suffix(".png")
        figure_renderer(png_path)
        print(f"wrote {png_path}")


# ----------------------------- commands -----------------------------

def cmd_genkeys(args) -> int:
    seed = _seed_of(args)
    params = KeyGenParams(
        seg_bits=args.seg_bits,
        n_detectors=args.detectors,
        n_locked=args.locked,
        n_groups=args.groups,
        msb_bits=args.msb,
        width_bits=args.width,
    )
    model = load_model(args.model) if args.model else None
    km = gen_keys(seed, params, model)
    save_keys(km, args.keys, args.private)
    print(f"wrote {args.keys} and {args.private} (seed {seed}, "
          f"Hkey {km.hkey.total_bits} bits, Mkey {km.mkey.total_bits} bits)")
    return 0


def cmd_train(args) -> int:
    seed = _seed_of(args)
    dataset_seed = args.dataset_seed if args.dataset_seed is not None else seed
    if args.arch == "cnn":
        dataset = (default_toy_dataset(dataset_seed) if args.default_data
                   else make_blobs(dataset_seed, classes=args.classes,
                                   noise=args.noise, mean_scale=args.mean_scale,
                                   train_per_class=args.train_per_class,
                                   test_per_class=args.test_per_class))
        arch = toy_cnn_arch(dataset.classes)
    else:
        dataset = make_blobs(dataset_seed, classes=args.classes, noise=args.noise,
                             mean_scale=args.mean_scale,
                             train_per_class=args.train_per_class,
                             test_per_class=args.test_per_class)
        feat = int(np.prod(dataset.train_x.shape[1:]))
        arch = toy_mlp_arch(dataset.classes, feat, hidden=args.hidden)
    cfg = TrainConfig(epochs=args.epochs, seed=seed)
    result = train_toy(arch, dataset, cfg, q=TOY_QFORMAT,
                       name=f"toy-{args.arch}-s{seed}")
    save_model(result.model, args.out)
    doc = {
        "schema": "lockdnn-train-v1",
        "tool_version": __version__,
        "config": {"seed": seed, "dataset": dataset.params,
                   "arch": args.arch, "epochs": args.epochs},
        "results": {"float_acc": result.float_acc, "fixed_acc": result.fixed_acc},
    }
    if args.report:
        write_json(doc, args.report)
        print(f"wrote {args.report}")
    print(f"wrote {args.out} (float acc {result.float_acc:.3f}, "
          f"fixed-point acc {result.fixed_acc:.3f})")
    return 0


def cmd_obfuscate(args) -> int:
    model = load_model(args.model)
    keys = load_keys(args.keys, args.private)
    obf = obfuscate(model, keys.mkey)
    save_model(obf, args.out)
    check = verify_restoration(model, obf, keys.mkey.mk_segments(), keys.mkey.polarity)
    if not check:
        raise LockDNNError(f"self-check failed for groups {check.mismatched_groups}")
    if args.provider_secret:
        write_json(
            {
                "schema": "lockdnn-provider-v1",
                "msb_bits": keys.mkey.msb_bits,
                "masks": {str(g): f"{v:x}" for g, v in sorted(keys.mkey.masks.items())},
                "polarity": {str(g): f"{v:x}" for g, v in sorted(keys.mkey.polarity.items())},
            },
            args.provider_secret,
        )
        print(f"wrote {args.provider_secret}")
    print(f"wrote {args.out} (restoration self-check passed)")
    return 0


def cmd_run(args) -> int:
    seed = _seed_of(args)
    model = load_model(args.model)
    keys = load_keys(args.keys, args.private)
    hk = _parse_hkey(args.hkey, keys, seed)
    mk = _parse_mkey(args.mkey, keys)
    x = _load_input(args, model, seed)
    rep = run(model, x, keys, hk, mk, _sim_options(args))
    doc = run_report_doc(rep)
    doc["config"]["cli_seed"] = seed
    _emit(doc, args.report,
          csv_writer=lambda p: write_layer_csv(rep, p),
          figure_renderer=lambda p: render_run_figure(rep, p),
          no_figures=args.no_figures, no_csv=args.no_csv)
    return 0


def _sweep_chunk(payload):
    model_path, keys_path, private_path, input_list, dims, assignments, opts = payload
    model = load_model(model_path)
    keys = load_keys(keys_path, private_path)
    x = Tensor(tuple(dims), np.array(input_list, dtype=np.int64))
    options = SimOptions(**opts)
    mk = keys.mkey.mk_segments() if model.obfuscated else None
    out = []
    for a in assignments:
        a = {int(k): v for k, v in a.items()}
        rep = run(model, x, keys, a, mk, options)
        out.append((_hash_assignment(a), a, rep.stored_bits, rep.logits_sha256))
    return out


def cmd_sweep(args) -> int:
    seed = _seed_of(args)
    model = load_model(args.model)
    keys = load_keys(args.keys, args.private)
    x = _load_input(args, model, seed)
    options = _sim_options(args)
    rng = _rng(seed)
    assignments = []
    if args.include_correct:
        assignments.append(dict(keys.hkey.correct))
    for _ in range(args.n):
        assignments.append(
            {i: int(rng.integers(0, 1 << keys.hkey.seg_bits)) for i in keys.hkey.locked}
        )
    opts_dict = {
        "fmt": options.fmt,
        "rlc_run_bits": options.rlc_run_bits,
        "wide_accumulator": options.wide_accumulator,
    }
    if args.jobs > 1:
        chunks = [assignments[i::args.jobs] for i in range(args.jobs)]
        payloads = [
            (args.model, args.keys, args.private, x.data.tolist(), list(x.dims), c, opts_dict)
            for c in chunks if c
        ]
        rows = []
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for part in pool.map(_sweep_chunk, payloads):
                rows.extend(part)
        rows = [SweepRow(h, a, bits, sha) for h, a, bits, sha in rows]
    else:
        part = _sweep_chunk(
            (args.model, args.keys, args.private, x.data.tolist(), list(x.dims),
             assignments, opts_dict)
        )
        rows = [SweepRow(h, a, bits, sha) for h, a, bits, sha in part]
    config = {
        "model": model.name, "n_keys": args.n, "seed": seed,
        "include_correct": args.include_correct, "format": options.fmt,
        "jobs": args.jobs, "input_dims": list(x.dims),
    }
    doc = sweep_doc(rows, config)
    _emit(doc, args.report,
          csv_writer=lambda p: write_sweep_csv(rows, p),
          figure_renderer=lambda p: render_sweep_figure(rows, p),
          no_figures=args.no_figures, no_csv=args.no_csv)
    if len(doc["distinct_logits"]) != 1:
        raise LockDNNError("sweep saw diverging logits across keys")
    return 0


def cmd_attack(args) -> int:
    seed = _seed_of(args)
    model = load_model(args.model)
    keys = load_keys(args.keys, args.private)
    dataset_seed = args.dataset_seed if args.dataset_seed is not None else seed
    if args.scenario == "removal":
        dataset = default_toy_dataset(dataset_seed)
        x = _load_input(args, model, seed)
        rep = removal_attack(model, x, keys, args.stuck, _sim_options(args))
        reference = run(model, x, keys, dict(keys.hkey.correct),
                        keys.mkey.mk_segments() if model.obfuscated else None,
                        _sim_options(args))
        acc = removal_accuracy(model, dataset, keys, args.stuck, _sim_options(args))
        doc = {
            "schema": "lockdnn-attack-v1",
            "tool_version": __version__,
            "scenario": f"removal-stuck-{args.stuck}",
            "config": {**rep.config, "dataset_seed": dataset_seed},
            "results": {
                "stored_bits": rep.stored_bits,
                "reference_stored_bits": reference.stored_bits,
                "logits_match_reference": rep.logits_sha256 == reference.logits_sha256,
                "test_accuracy": acc,
                "chance": dataset.chance,
            },
        }
        _emit(doc, args.report,
              figure_renderer=lambda p: render_removal_figure(rep, reference, p),
              no_figures=args.no_figures, no_csv=True)
    elif args.scenario == "finetune":
        dataset = default_toy_dataset(dataset_seed)
        obf = obfuscate(model, keys.mkey) if not model.obfuscated else model
        if args.alpha is not None:
            alphas = [args.alpha]
        else:
            alphas = list(args.alphas) if args.alphas else list(ALPHA_GRID)
        seeds = tuple(range(args.seeds))
        grid = []
        for alpha in alphas:
            rep = finetune_attack(obf, alpha, dataset, epochs=args.epochs,
                                  seeds=seeds,
                                  original_model=None if model.obfuscated else model)
            row = {"alpha": alpha, **{k: v for k, v in rep.results.items()
                                      if k != "per_seed"}}
            row["per_seed"] = rep.results["per_seed"]
            grid.append(row)
        doc = {
            "schema": "lockdnn-attack-v1",
            "tool_version": __version__,
            "scenario": "finetune",
            "config": {"alphas": alphas, "seeds": list(seeds), "epochs": args.epochs,
                       "dataset": dataset.params},
            "results": {"grid": grid},
        }
        _emit(doc, args.report,
              figure_renderer=lambda p: render_finetune_figure(grid, p),
              no_figures=args.no_figures, no_csv=True)
    else:  # keysweep
        x = _load_input(args, model, seed)
        rep = key_sweep_distinguisher(model, x, keys, detector=args.detector,
                                      trials=args.trials, options=_sim_options(args),
                                      seed=seed)
        _emit(attack_report_doc(rep), args.report, no_figures=True, no_csv=True)
        print(f"unique minimizer: {rep.results['always_unique_minimizer']}, "
              f"logits invariant: {rep.results['logits_invariant']}")
    return 0


# ----------------------------- argument wiring -----------------------------

def _add_common_run_flags(p, with_input=True):
    p.add_argument("--format", choices=["bitmap", "rlc", "csc"], default="bitmap")
    p.add_argument("--rlc-run-bits", type=int, default=4)
    p.add_argument("--wide-acc", action="store_true",
                   help="accumulate MACs wide, saturate once per output")
    if with_input:
        p.add_argument("--input", help="npy array of float inputs (N,C,H,W)")
        p.add_argument("--batch", type=int, default=4,
                       help="synthetic input batch size when --input is absent")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--no-csv", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="lockdnn",
        description="Simulator for a key-locked sparsity-aware DNN accelerator "
                    "with model-side bias obfuscation.",
    )
    ap.add_argument("--version", action="version", version=f"lockdnn {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("genkeys", help="draw T, Hkey, and Mkey material from a seed")
    p.add_argument("--seed", type=int)
    p.add_argument("--detectors", type=int, default=4)
    p.add_argument("--seg-bits", type=int, default=8)
    p.add_argument("--locked", type=int, default=None,
                   help="how many detectors carry key segments (default: all)")
    p.add_argument("--groups", type=int, default=16)
    p.add_argument("--msb", type=int, default=2)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--model", help="optional model manifest for consistency checks")
    p.add_argument("--keys", default="keys.json")
    p.add_argument("--private", default="accel_private.json")
    p.set_defaults(func=cmd_genkeys)

    p = sub.add_parser("train", help="train a toy model and write its manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset-seed", type=int)
    p.add_argument("--arch", choices=["cnn", "mlp"], default="cnn")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--mean-scale", type=float, default=0.5)
    p.add_argument("--train-per-class", type=int, default=1000)
    p.add_argument("--test-per-class", type=int, default=100)
    p.add_argument("--default-data", action="store_true",
                   help="use the bundled dataset configuration")
    p.add_argument("--out", default="model.json")
    p.add_argument("--report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("obfuscate", help="mask bias MSBs for publication")
    p.add_argument("--model", required=True)
    p.add_argument("--keys", default="keys.json")
    p.add_argument("--private", default="accel_private.json")
    p.add_argument("--out", default="model_obf.json")
    p.add_argument("--provider-secret", default="provider_secret.json")
    p.set_defaults(func=cmd_obfuscate)

    p = sub.add_parser("run", help="one locked inference with full accounting")
    p.add_argument("--model", required=True)
    p.add_argument("--keys", default="keys.json")
    p.add_argument("--private", default="accel_private.json")
    p.add_argument("--hkey", default="correct",
                   help="correct | wrong | none | hex segments")
    p.add_argument("--mkey", default="correct", help="correct | zero | none | hex")
    p.add_argument("--seed", type=int)
    p.add_argument("--report", default="run_report.json")
    _add_common_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="random-Hkey sweep: storage vs logits table")
    p.add_argument("--model", required=True)
    p.add_argument("--keys", default="keys.json")
    p.add_argument("--private", default="accel_private.json")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--include-correct", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--report", default="sweep_report.json")
    _add_common_run_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("attack", help="attack-evaluation scenarios")
    p.add_argument("scenario", choices=["removal", "finetune", "keysweep"])
    p.add_argument("--model", required=True)
    p.add_argument("--keys", default="keys.json")
    p.add_argument("--private", default="accel_private.json")
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset-seed", type=int)
    p.add_argument("--stuck", choices=["zero", "one"], default="zero")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--alphas", type=float, nargs="*")
    p.add_argument("--seeds", type=int, default=3,
                   help="finetune repetitions per alpha")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--detector", type=int, default=0)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--report", default="attack_report.json")
    _add_common_run_flags(p)
    p.set_defaults(func=cmd_attack)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except LockDNNError as e:
        print(json.dumps({"error": e.code, "message": str(e)}), file=sys.stderr)
        return EXIT_INVARIANT if e.category == "invariant" else EXIT_DATA
    except (OSError, ValueError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
