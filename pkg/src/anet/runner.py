"""Glue between the resolved configuration and the library pieces:
dataset creation or loading, model construction, training runs, retrieval
evaluation and the ablation matrix. The CLI is a thin shell over this.
"""

from __future__ import annotations

import json
import os
import statistics

import numpy as np

from .config import RunConfig, write_resolved
from .data import AugmentPolicy, Dataset, load_manifest
from .evaluate import evaluate_fixed, vehicleid_protocol
from .images import write_ppm
from .model import ANet, ModelConfig, build_model
from .synth import SyntheticSpec, gen_synthetic, split_synthetic
from .trainer import TrainResult, train

ABLATION_SELECTORS = {
    "baseline": ("f",),
    "van": ("f", "fa"),
    "anet_no_ac": ("j",),
    "anet": ("j",),
    "anet_att": ("j",),
}


def synthetic_spec(cfg: RunConfig) -> SyntheticSpec:
    d = cfg.data
    return SyntheticSpec(id_count=d.id_count, images_per_id=d.images_per_id,
                         image_size=d.image_size, color_classes=d.color_classes,
                         type_classes=d.type_classes, camera_count=d.camera_count)


def make_datasets(cfg: RunConfig):
    """In-memory synthetic train/query/gallery splits from the data section."""
    full = gen_synthetic(synthetic_spec(cfg), seed=cfg.data.seed)
    return split_synthetic(full, cfg.data.train_id_count)


def write_dataset(cfg: RunConfig, out_dir: str, force: bool = False):
    """Persist the synthetic dataset: P6 images, JSONL manifests, meta.json."""
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise FileExistsError(f"output dir {out_dir!r} is not empty (use --force)")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    splits = make_datasets(cfg)
    counts = {}
    for ds, name in zip(splits, ("train", "query", "gallery")):
        lines = []
        for i, s in enumerate(ds.samples):
            rel = f"images/{name}_{i:05d}.ppm"
            write_ppm(os.path.join(out_dir, rel), s.image)
            color, vtype = s.attributes
            lines.append(json.dumps({"path": rel, "id": s.identity, "camera": s.camera,
                                     "color": color, "type": vtype}))
        with open(os.path.join(out_dir, f"{name}.jsonl"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        counts[name] = len(ds.samples)
    meta = {
        "attr_names": ["color", "type"],
        "attr_classes": list(splits[0].meta.attr_classes),
        "id_count": cfg.data.id_count,
        "train_id_count": cfg.data.train_id_count,
        "image_size": cfg.data.image_size,
        "camera_count": cfg.data.camera_count,
        "seed": cfg.data.seed,
    }
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_resolved(cfg, out_dir)
    return counts


def load_datasets(data_dir: str):
    return tuple(load_manifest(os.path.join(data_dir, f"{name}.jsonl"))
                 for name in ("train", "query", "gallery"))


def augment_policy(cfg: RunConfig, train_ds: Dataset) -> AugmentPolicy:
    import dataclasses
    return dataclasses.replace(cfg.aug, fill=tuple(train_ds.mean_color().tolist()))


def resolve_with_dataset(cfg: RunConfig, train_ds: Dataset) -> RunConfig:
    ids = sorted({s.identity for s in train_ds.samples})
    cfg.resolve_from_dataset(train_ds.meta.attr_classes, len(ids))
    cfg.model.image_size = train_ds.samples[0].image.shape[-1]
    return cfg


def run_training(cfg: RunConfig, train_ds: Dataset, out_dir: str | None = None,
                 log_every: int = 0) -> TrainResult:
    resolve_with_dataset(cfg, train_ds)
    cfg.model.validate()
    if out_dir:
        write_resolved(cfg, out_dir)
    model = build_model(cfg.model, seed=cfg.train.seed)
    return train(model, train_ds, cfg.train_config(),
                 policy=augment_policy(cfg, train_ds), out_dir=out_dir,
                 config_digest=cfg.digest(), log_every=log_every)


def run_eval(cfg: RunConfig, model: ANet, query: Dataset, gallery: Dataset,
             selector: str | None = None):
    selector = selector or cfg.resolved_selector()
    if cfg.eval.protocol == "fixed":
        return evaluate_fixed(query, gallery, model, selector,
                              cross_camera_filter=cfg.eval.cross_camera_filter)
    if cfg.eval.protocol == "vehicleid":
        merged = Dataset(query.samples + gallery.samples, query.meta)
        return vehicleid_protocol(merged, model, selector,
                                  repeats=cfg.eval.repeats, seed=cfg.eval.seed)
    raise ValueError(f"unknown protocol {cfg.eval.protocol!r}")


# ---------------------------------------------------------------------------
# ablation matrix
# ---------------------------------------------------------------------------

def _ablate_cell(payload):
    """One (variant, seed) training plus all applicable selector evals.

    Top-level so process pools can pickle it; every cell is internally
    deterministic regardless of scheduling.
    """
    cfg_text, variant, seed, data_dir, out_dir = payload
    from .config import parse_config_text
    cfg = parse_config_text(cfg_text)
    cfg.model.variant = variant
    cfg.train.seed = seed
    if data_dir:
        train_ds, query_ds, gallery_ds = load_datasets(data_dir)
    else:
        train_ds, query_ds, gallery_ds = make_datasets(cfg)
    cell_dir = os.path.join(out_dir, "runs", f"{variant}_s{seed}") if out_dir else None
    result = run_training(cfg, train_ds, out_dir=cell_dir)
    rows = []
    for selector in ABLATION_SELECTORS[variant]:
        report = run_eval(cfg, result.model, query_ds, gallery_ds, selector=selector)
        rows.append({"variant": variant, "seed": seed, "selector": selector,
                     "map": report.map, "r1": report.r1, "r5": report.r5})
    return rows


def run_ablation(cfg: RunConfig, data_dir: str | None, out_dir: str | None,
                 seeds: int, variants=None, workers: int = 1):
    """Every variant x seed cell; failures are recorded and do not stop
    the rest of the matrix."""
    variants = list(variants or ("baseline", "van", "anet_no_ac", "anet"))
    for v in variants:
        if v not in ABLATION_SELECTORS:
            raise ValueError(f"unknown variant {v!r}")
    jobs = [(cfg.to_text(), v, cfg.train.seed + s, data_dir, out_dir)
            for v in variants for s in range(seeds)]
    rows, failures = [], []

    def handle(job, outcome, error):
        if error is None:
            rows.extend(outcome)
        else:
            failures.append({"variant": job[1], "seed": job[2], "error": error})

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(job, pool.submit(_ablate_cell, job)) for job in jobs]
            for job, fut in futures:
                try:
                    handle(job, fut.result(), None)
                except Exception as exc:
                    handle(job, None, f"{type(exc).__name__}: {exc}")
    else:
        for job in jobs:
            try:
                handle(job, _ablate_cell(job), None)
            except Exception as exc:
                handle(job, None, f"{type(exc).__name__}: {exc}")

    summary = []
    for variant in variants:
        for selector in ABLATION_SELECTORS[variant]:
            cells = [r for r in rows if r["variant"] == variant and r["selector"] == selector]
            if not cells:
                continue
            summary.append({
                "variant": variant, "selector": selector, "seeds": len(cells),
                "median_map": statistics.median(c["map"] for c in cells),
                "median_r1": statistics.median(c["r1"] for c in cells),
                "median_r5": statistics.median(c["r5"] for c in cells),
            })
    table = {"rows": rows, "summary": summary, "failures": failures}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
            json.dump(table, fh, indent=2)
            fh.write("\n")
        with open(os.path.join(out_dir, "ablation.txt"), "w") as fh:
            fh.write(format_ablation(table))
        write_resolved(cfg, out_dir)
    return table


def format_ablation(table) -> str:
    header = f"{'variant':<12} {'selector':<8} {'seeds':>5} {'median_mAP':>11} {'median_R1':>10} {'median_R5':>10}"
    lines = [header, "-" * len(header)]
    for s in table["summary"]:
        lines.append(f"{s['variant']:<12} {s['selector']:<8} {s['seeds']:>5} "
                     f"{s['median_map']:>11.4f} {s['median_r1']:>10.4f} {s['median_r5']:>10.4f}")
    for f in table["failures"]:
        lines.append(f"FAILED {f['variant']} seed {f['seed']}: {f['error']}")
    return "\n".join(lines) + "\n"
