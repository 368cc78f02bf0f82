"""Report rendering: matplotlib figures plus CSV twins of the JSON outputs.

Reads whatever a run directory contains (loss_log.jsonl, *report*.json,
ablation.json) and writes figures and delimited summaries next to each
other under the requested output directory.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def render_loss_curves(log_path: str, out_dir: str) -> list:
    records = _read_jsonl(log_path)
    if not records:
        return []
    os.makedirs(out_dir, exist_ok=True)
    steps = range(len(records))
    terms = [("total", "total"), ("tri_f", "triplet (global)"), ("id_f", "cross-entropy (global)"),
             ("tri_j", "triplet (joint)"), ("id_j", "cross-entropy (joint)"),
             ("tri_g", "triplet (pattern)"), ("ac_id", "AC cross-entropy"), ("ac_tri", "AC triplet")]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for key, label in terms:
        ys = [r.get(key) for r in records]
        if all(y is None for y in ys):
            continue
        ax.plot(steps, [float("nan") if y is None else y for y in ys], label=label, linewidth=1)
    stage2_start = next((i for i, r in enumerate(records) if r.get("stage") == 2), None)
    if stage2_start is not None:
        ax.axvline(stage2_start, color="gray", linestyle="--", linewidth=1, label="stage 2")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig_path = os.path.join(out_dir, "loss_curves.png")
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)

    csv_path = os.path.join(out_dir, "loss_log.csv")
    keys = ["epoch", "step", "stage", "lr", "total", "tri_f", "id_f",
            "tri_j", "id_j", "tri_g", "ac_id", "ac_tri"]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for r in records:
            writer.writerow([r.get(k, "") if r.get(k) is not None else "" for k in keys])
    return [fig_path, csv_path]


def render_cmc(report_path: str, out_dir: str) -> list:
    with open(report_path) as fh:
        report = json.load(fh)
    if "cmc" not in report:
        return []
    os.makedirs(out_dir, exist_ok=True)
    cmc = report["cmc"]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(range(1, len(cmc) + 1), cmc, marker="o", markersize=3)
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"mAP {report['map']:.4f}  R1 {report['r1']:.4f}")
    fig.tight_layout()
    stem = os.path.splitext(os.path.basename(report_path))[0]
    fig_path = os.path.join(out_dir, f"{stem}_cmc.png")
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)

    csv_path = os.path.join(out_dir, f"{stem}_cmc.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "cmc"])
        for i, v in enumerate(cmc, start=1):
            writer.writerow([i, v])
    return [fig_path, csv_path]


def render_ablation(table_path: str, out_dir: str) -> list:
    with open(table_path) as fh:
        table = json.load(fh)
    os.makedirs(out_dir, exist_ok=True)
    summary = table.get("summary", [])
    labels = [f"{s['variant']}({s['selector']})" for s in summary]
    values = [s["median_map"] for s in summary]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 4))
    ax.bar(range(len(labels)), values, color="#4477aa")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("median mAP")
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    fig_path = os.path.join(out_dir, "ablation_map.png")
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)

    csv_path = os.path.join(out_dir, "ablation.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "selector", "seed", "map", "r1", "r5"])
        for r in table.get("rows", []):
            writer.writerow([r["variant"], r["selector"], r["seed"],
                             r["map"], r["r1"], r["r5"]])
        writer.writerow([])
        writer.writerow(["variant", "selector", "seeds", "median_map", "median_r1", "median_r5"])
        for s in summary:
            writer.writerow([s["variant"], s["selector"], s["seeds"],
                             s["median_map"], s["median_r1"], s["median_r5"]])
    return [fig_path, csv_path]


def render_run(run_dir: str, out_dir: str) -> list:
    """Render everything recognizable inside a run directory."""
    produced = []
    log_path = os.path.join(run_dir, "loss_log.jsonl")
    if os.path.exists(log_path):
        produced += render_loss_curves(log_path, out_dir)
    abl_path = os.path.join(run_dir, "ablation.json")
    if os.path.exists(abl_path):
        produced += render_ablation(abl_path, out_dir)
    for name in sorted(os.listdir(run_dir)):
        if name.endswith(".json") and "report" in name:
            produced += render_cmc(os.path.join(run_dir, name), out_dir)
    return produced
