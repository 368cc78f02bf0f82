"""Retrieval evaluation: feature extraction, distance ranking, mAP/CMC,
the fixed-gallery and repeated-gallery protocols, and activation-map export.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .data import Dataset
from .heads import concat_features
from .images import write_pgm
from .joint import channel_mean_map
from .model import ANet

SELECTORS = ("f", "j", "fa")


@dataclass
class EvalReport:
    map: float
    cmc: np.ndarray
    per_query_ap: list
    r1: float
    r5: float
    protocol: str = "fixed"
    repeats: int = 1
    seed: int = 0
    excluded_queries: int = 0

    def to_dict(self) -> dict:
        return {
            "map": self.map, "cmc": self.cmc.tolist(), "r1": self.r1, "r5": self.r5,
            "per_query_ap": list(self.per_query_ap), "protocol": self.protocol,
            "repeats": self.repeats, "seed": self.seed,
            "excluded_queries": self.excluded_queries,
        }


@dataclass
class RepeatReport:
    """Aggregate over repeated random gallery draws."""
    mean_map: float
    std_map: float
    mean_r1: float
    std_r1: float
    mean_r5: float
    std_r5: float
    repeats: int
    seed: int
    per_repeat: list = field(default_factory=list)
    single_image_ids: int = 0

    @property
    def map(self):
        return self.mean_map

    @property
    def r1(self):
        return self.mean_r1

    @property
    def r5(self):
        return self.mean_r5

    def to_dict(self) -> dict:
        return {
            "protocol": "vehicleid-repeat", "repeats": self.repeats, "seed": self.seed,
            "map": self.mean_map, "std_map": self.std_map,
            "r1": self.mean_r1, "std_r1": self.std_r1,
            "r5": self.mean_r5, "std_r5": self.std_r5,
            "per_repeat": self.per_repeat, "single_image_ids": self.single_image_ids,
        }


def check_selector(selector: str, model: ANet):
    if selector not in SELECTORS:
        raise ValueError(f"unknown selector {selector!r}, expected one of {SELECTORS}")
    if selector == "j" and model.cfg.variant in ("baseline", "van"):
        raise ValueError(f"selector 'j' needs a fusion variant, model is {model.cfg.variant!r}")
    if selector == "fa" and model.cfg.variant == "baseline":
        raise ValueError("selector 'fa' needs attribute branches, model is 'baseline'")


def extract_features(dataset: Dataset, model: ANet, selector: str,
                     batch_size: int = 64) -> np.ndarray:
    """Per-sample matching features, L2-normalized rows.

    selector 'f' is the global embedding, 'j' the compensated one, 'fa'
    the concatenation of the global and all attribute embeddings.
    """
    check_selector(selector, model)
    rows = []
    with nm.no_grad():
        for lo in range(0, len(dataset), batch_size):
            chunk = dataset.samples[lo:lo + batch_size]
            out = model.forward(np.stack([s.image for s in chunk]), train=False)
            if selector == "f":
                feats = out.global_feat
            elif selector == "j":
                feats = out.joint_feat
            else:
                feats = concat_features(out.global_feat, out.attr_feats)
            rows.append(feats.data.copy())
    feats = np.concatenate(rows, axis=0)
    norms = np.linalg.norm(feats, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        ident = dataset.samples[bad[0]].identity
        raise ValueError(f"degenerate all-zero feature for sample {bad[0]} (identity {ident})")
    return feats / norms[:, None]


def rank_and_score(query_feats, query_ids, query_cams, gallery_feats, gallery_ids,
                   gallery_cams, cross_camera_filter: bool = True,
                   protocol: str = "fixed", seed: int = 0) -> EvalReport:
    """Squared-Euclidean ranking (ascending, ties broken by gallery index).

    AP per query is the mean precision at each relevant position; CMC@k
    the fraction of queries with a relevant hit in the top k. With the
    cross-camera filter, same-id same-camera gallery entries are dropped
    for that query; queries left without any relevant entry are excluded
    and counted.
    """
    qf = np.asarray(query_feats)
    gf = np.asarray(gallery_feats)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    query_cams = np.asarray(query_cams)
    gallery_cams = np.asarray(gallery_cams)
    if qf.size == 0 or gf.size == 0:
        raise ValueError("empty query or gallery set")
    d2 = (qf * qf).sum(1)[:, None] + (gf * gf).sum(1)[None, :] - 2.0 * (qf @ gf.T)
    order = np.argsort(d2, axis=1, kind="stable")
    n_gallery = gf.shape[0]
    aps, hits = [], []
    excluded = 0
    cmc_counts = np.zeros(n_gallery)
    for qi in range(qf.shape[0]):
        ranked = order[qi]
        keep = np.ones(n_gallery, dtype=bool)
        if cross_camera_filter:
            keep = ~((gallery_ids == query_ids[qi]) & (gallery_cams == query_cams[qi]))
        kept = ranked[keep[ranked]]
        rel = gallery_ids[kept] == query_ids[qi]
        if not rel.any():
            excluded += 1
            continue
        pos = np.flatnonzero(rel)
        precision = np.cumsum(rel)[pos] / (pos + 1.0)
        aps.append(float(precision.mean()))
        first = pos[0]
        cmc_counts[first:] += 1.0
        hits.append(first)
    if not aps:
        raise ValueError("every query was excluded (no valid matches)")
    cmc = cmc_counts / len(aps)
    return EvalReport(
        map=float(np.mean(aps)), cmc=cmc, per_query_ap=aps,
        r1=float(cmc[0]), r5=float(cmc[min(4, n_gallery - 1)]),
        protocol=protocol, seed=seed, excluded_queries=excluded)


def evaluate_fixed(query: Dataset, gallery: Dataset, model: ANet, selector: str,
                   cross_camera_filter: bool = True) -> EvalReport:
    qf = extract_features(query, model, selector)
    gf = extract_features(gallery, model, selector)
    return rank_and_score(
        qf, query.identities(), np.array([s.camera for s in query.samples]),
        gf, gallery.identities(), np.array([s.camera for s in gallery.samples]),
        cross_camera_filter=cross_camera_filter)


def vehicleid_protocol(test_set: Dataset, model: ANet, selector: str,
                       repeats: int = 10, seed: int = 0) -> RepeatReport:
    """Repeated random-gallery protocol: per repeat, one image per identity
    goes to the gallery, the rest query it; identities with one image stay
    gallery-only. Reports mean and std of R1/R5/mAP over the repeats."""
    groups = test_set.by_identity()
    single = sum(1 for idxs in groups.values() if len(idxs) < 2)
    feats = extract_features(test_set, model, selector)
    ids = test_set.identities()
    cams = np.array([s.camera for s in test_set.samples])
    rows = []
    for rep in range(repeats):
        rng = np.random.default_rng(np.random.SeedSequence([seed, rep]))
        gallery_idx = []
        for identity in sorted(groups):
            idxs = groups[identity]
            gallery_idx.append(idxs[rng.integers(len(idxs))])
        gallery_idx = np.array(gallery_idx)
        mask = np.ones(len(test_set), dtype=bool)
        mask[gallery_idx] = False
        query_idx = np.flatnonzero(mask)
        report = rank_and_score(
            feats[query_idx], ids[query_idx], cams[query_idx],
            feats[gallery_idx], ids[gallery_idx], cams[gallery_idx],
            cross_camera_filter=False, protocol="vehicleid-repeat", seed=seed)
        rows.append({"map": report.map, "r1": report.r1, "r5": report.r5})
    arr = {k: np.array([r[k] for r in rows]) for k in ("map", "r1", "r5")}
    return RepeatReport(
        mean_map=float(arr["map"].mean()), std_map=float(arr["map"].std()),
        mean_r1=float(arr["r1"].mean()), std_r1=float(arr["r1"].std()),
        mean_r5=float(arr["r5"].mean()), std_r5=float(arr["r5"].std()),
        repeats=repeats, seed=seed, per_repeat=rows, single_image_ids=single)


def export_activation_maps(model: ANet, images: np.ndarray, out_dir: str,
                           prefix: str = "") -> list:
    """Channel-mean maps of the fused and distilled attribute features as
    8-bit graymaps, min-max normalized per image (flat maps become zeros)."""
    if model.cfg.variant not in ("anet", "anet_no_ac"):
        raise ValueError("activation export needs the additive fusion variant")
    os.makedirs(out_dir, exist_ok=True)
    with nm.no_grad():
        out = model.forward(images, train=False)
    paths = []
    for label, fmap in (("attr", out.fused_map.data), ("distilled", out.distilled_map.data)):
        maps = channel_mean_map(fmap)
        for i, m in enumerate(maps):
            lo, hi = float(m.min()), float(m.max())
            if hi > lo:
                scaled = ((m - lo) / (hi - lo) * 255.0).round().astype(np.uint8)
            else:
                scaled = np.zeros(m.shape, dtype=np.uint8)
            path = os.path.join(out_dir, f"{prefix}{i:04d}_{label}_map.pgm")
            write_pgm(path, scaled)
            paths.append(path)
    return paths


def save_report(report, path):
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
