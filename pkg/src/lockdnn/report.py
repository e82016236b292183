"""Report serialization: versioned JSON, per-layer CSV, and figures.

Reports are reproducible artifacts: no timestamps, keys sorted, floats in
repr form, so re-running a command with the echoed config rewrites every
JSON and CSV byte for byte. Figures render through the Agg backend next to
the delimited output; they carry no generator metadata for the same
reason. Writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

from . import __version__
from .attacks import AttackReport
from .sim import RunReport, SweepRow

RUN_SCHEMA = "lockdnn-run-v1"
SWEEP_SCHEMA = "lockdnn-sweep-v1"
ATTACK_SCHEMA = "lockdnn-attack-v1"


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_json(doc: dict, path) -> None:
    _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def run_report_doc(rep: RunReport) -> dict:
    return {
        "schema": RUN_SCHEMA,
        "tool_version": __version__,
        "config": rep.config,
        "layers": rep.layer_table(),
        "totals": {
            "stored_bits": rep.stored_bits,
            "bytes_moved": rep.bytes_moved,
            "mac_count": rep.mac_count,
            "energy_units": rep.energy_units,
            "latency_cycles": rep.latency_cycles,
        },
        "logits": rep.logits.tolist(),
        "logits_sha256": rep.logits_sha256,
    }


def sweep_doc(rows: list[SweepRow], config: dict) -> dict:
    distinct = sorted({r.logits_sha256 for r in rows})
    return {
        "schema": SWEEP_SCHEMA,
        "tool_version": __version__,
        "config": config,
        "rows": [
            {"key_hash": r.key_hash, "stored_bits": r.stored_bits,
             "logits_sha256": r.logits_sha256}
            for r in rows
        ],
        "distinct_logits": distinct,
        "min_stored_bits": min(r.stored_bits for r in rows),
        "max_stored_bits": max(r.stored_bits for r in rows),
    }


def attack_report_doc(rep: AttackReport) -> dict:
    return {
        "schema": ATTACK_SCHEMA,
        "tool_version": __version__,
        "scenario": rep.scenario,
        "config": rep.config,
        "results": rep.results,
    }


def write_layer_csv(rep: RunReport, path) -> None:
    rows = rep.layer_table()
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()) if rows else
                                ["layer_index"])
        writer.writeheader()
        writer.writerows(rows)


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["key_hash", "stored_bits", "logits_sha256"])
        for r in rows:
            writer.writerow([r.key_hash, r.stored_bits, r.logits_sha256])


# ----------------------------- figures -----------------------------

def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_run_figure(rep: RunReport, path) -> None:
    """Per-stage storage against the correct-key reference."""
    plt = _plt()
    rows = rep.layer_table()
    idx = range(len(rows))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    width = 0.38
    ax1.bar([i - width / 2 for i in idx], [r["stored_bits"] for r in rows],
            width, label="this run")
    ax1.bar([i + width / 2 for i in idx], [r["reference_bits"] for r in rows],
            width, label="correct key")
    ax1.set_xlabel("rectifier stage")
    ax1.set_ylabel("stored bits")
    ax1.set_xticks(list(idx))
    ax1.set_xticklabels([str(r["layer_index"]) for r in rows])
    ax1.legend(frameon=False, fontsize=8)
    ratios = [r["size_ratio"] if r["size_ratio"] is not None else 0 for r in rows]
    ax2.bar(list(idx), ratios, color="tab:red")
    ax2.axhline(1.0, color="black", lw=0.8)
    ax2.set_xlabel("rectifier stage")
    ax2.set_ylabel("size ratio vs correct key")
    ax2.set_xticks(list(idx))
    ax2.set_xticklabels([str(r["layer_index"]) for r in rows])
    fig.suptitle(f"{rep.config.get('model', '')} [{rep.config.get('format', '')}]")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def render_sweep_figure(rows: list[SweepRow], path) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(7, 3.2))
    bits = [r.stored_bits for r in rows]
    ax.plot(range(len(bits)), bits, ".", ms=5)
    ax.axhline(min(bits), color="tab:green", lw=0.8, label="minimum (correct key level)")
    ax.set_xlabel("key index in sweep")
    ax.set_ylabel("total stored bits")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def render_finetune_figure(grid: list[dict], path) -> None:
    """Accuracy vs thief fraction: obf-init, rand-init, original line.

    ``grid`` rows: {alpha, post_attack_acc, random_init_acc, original_acc?}.
    """
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    alphas = [g["alpha"] for g in grid]
    ax.plot(alphas, [g["post_attack_acc"] for g in grid], "o-", label="obfuscated init")
    ax.plot(alphas, [g["random_init_acc"] for g in grid], "s--", label="random init")
    if grid and "original_acc" in grid[0]:
        ax.axhline(grid[0]["original_acc"], color="black", lw=0.8, label="original model")
    if grid and "obfuscated_acc" in grid[0]:
        ax.axhline(grid[0]["obfuscated_acc"], color="tab:red", lw=0.8,
                   label="obfuscated, no finetune")
    ax.set_xlabel("thief fraction of the training set")
    ax.set_ylabel("top-1 accuracy")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def render_removal_figure(rep_stuck: RunReport, rep_reference: RunReport, path) -> None:
    plt = _plt()
    rows_s = rep_stuck.layer_table()
    rows_r = rep_reference.layer_table()
    idx = range(len(rows_s))
    fig, ax = plt.subplots(figsize=(5.6, 3.2))
    width = 0.38
    ax.bar([i - width / 2 for i in idx], [r["stored_bits"] for r in rows_s],
           width, label="stuck detector")
    ax.bar([i + width / 2 for i in idx], [r["stored_bits"] for r in rows_r],
           width, label="intact, correct key")
    ax.set_xlabel("rectifier stage")
    ax.set_ylabel("stored bits")
    ax.set_xticks(list(idx))
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
