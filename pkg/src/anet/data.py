"""Datasets: manifest loading, identity-balanced batch sampling, augmentation.

A manifest is UTF-8 JSON-lines, one record per sample:
    {"path": str, "id": int, "camera": int, "color": int|null, "type": int|null}
with image paths relative to the manifest's directory. A sibling
``meta.json`` (shared by the splits in that directory) declares the
attribute class counts used for bounds checking; without it the counts
are inferred from the data.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .images import read_ppm, resize_bilinear

ATTR_KEYS = ("color", "type")


@dataclass
class Sample:
    image: np.ndarray            # (3,H,W) float32 in [0,1]
    identity: int
    camera: int
    attributes: tuple            # per-attribute class index or None


@dataclass
class DatasetMeta:
    attr_count: int
    attr_classes: tuple
    id_count: int
    split: str = "train"


@dataclass
class Dataset:
    samples: list
    meta: DatasetMeta

    def __len__(self):
        return len(self.samples)

    def identities(self) -> np.ndarray:
        return np.array([s.identity for s in self.samples])

    def by_identity(self) -> dict:
        groups = {}
        for i, s in enumerate(self.samples):
            groups.setdefault(s.identity, []).append(i)
        return groups

    def attr_matrix(self) -> np.ndarray:
        """(N, n) int matrix, -1 where a label is absent."""
        out = np.full((len(self.samples), self.meta.attr_count), -1, dtype=np.int64)
        for i, s in enumerate(self.samples):
            for j, a in enumerate(s.attributes):
                if a is not None:
                    out[i, j] = a
        return out

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def mean_color(self) -> np.ndarray:
        return np.stack([s.image.mean(axis=(1, 2)) for s in self.samples]).mean(axis=0)


def load_manifest(path, attr_classes=None) -> Dataset:
    """Read one JSONL split; validates labels against the class counts."""
    base = os.path.dirname(os.path.abspath(path))
    if attr_classes is None:
        meta_path = os.path.join(base, "meta.json")
        if os.path.exists(meta_path):
            with open(meta_path) as fh:
                attr_classes = tuple(json.load(fh)["attr_classes"])
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                rpath = rec["path"]
                identity = int(rec["id"])
                camera = int(rec["camera"])
                attrs = tuple(None if rec.get(k) is None else int(rec[k]) for k in ATTR_KEYS)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed manifest record ({exc})") from None
            if identity < 0:
                raise ValueError(f"{path}:{lineno}: negative identity {identity}")
            records.append((lineno, rpath, identity, camera, attrs))
    if attr_classes is None:
        counts = [0] * len(ATTR_KEYS)
        for _, _, _, _, attrs in records:
            for j, a in enumerate(attrs):
                if a is not None:
                    counts[j] = max(counts[j], a + 1)
        attr_classes = tuple(counts)
    samples = []
    for lineno, rpath, identity, camera, attrs in records:
        for j, a in enumerate(attrs):
            if a is not None and not (0 <= a < attr_classes[j]):
                raise ValueError(
                    f"{path}:{lineno}: {ATTR_KEYS[j]} index {a} out of range "
                    f"[0, {attr_classes[j]})")
        image = read_ppm(os.path.join(base, rpath))
        samples.append(Sample(image, identity, camera, attrs))
    meta = DatasetMeta(len(ATTR_KEYS), tuple(attr_classes),
                       len({s.identity for s in samples}),
                       split=os.path.splitext(os.path.basename(path))[0])
    return Dataset(samples, meta)


# ---------------------------------------------------------------------------
# PK sampling
# ---------------------------------------------------------------------------

@dataclass
class PKBatch:
    samples: list
    p: int
    k: int

    def __post_init__(self):
        ids = [s.identity for s in self.samples]
        if len(set(ids)) != self.p or len(ids) != self.p * self.k:
            raise ValueError(f"batch is not {self.p} identities x {self.k} images")
        for identity in set(ids):
            if ids.count(identity) != self.k:
                raise ValueError(f"identity {identity} has {ids.count(identity)} != {self.k} images")


def pk_sample(dataset: Dataset, p: int, k: int, rng) -> PKBatch:
    """P identities without replacement, K images each (with replacement
    only when an identity has fewer than K images)."""
    groups = dataset.by_identity()
    ids = sorted(groups)
    if p > len(ids):
        raise ValueError(f"requested {p} identities but dataset has {len(ids)}")
    chosen = rng.choice(len(ids), size=p, replace=False)
    samples = []
    for ci in chosen:
        pool = groups[ids[ci]]
        take = rng.choice(len(pool), size=k, replace=len(pool) < k)
        samples.extend(dataset.samples[pool[t]] for t in take)
    return PKBatch(samples, p, k)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentPolicy:
    """Training-time image policy; labels are never touched.

    The zoom range is a documented choice (the upstream recipe names the
    augmentation without parameters); erasing follows the usual
    random-erasing ranges. fill is the per-channel dataset mean.
    """
    enabled: bool = True
    flip_p: float = 0.5
    zoom_range: tuple = (0.9, 1.1)
    erase_p: float = 0.5
    erase_area: tuple = (0.02, 0.2)
    erase_aspect: tuple = (0.3, 3.3)
    fill: tuple = (0.5, 0.5, 0.5)


def _zoom(image, scale, fill):
    c, h, w = image.shape
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    if (nh, nw) == (h, w):
        return image
    scaled = resize_bilinear(image, nh, nw)
    out = np.empty_like(image)
    out[...] = np.asarray(fill, dtype=image.dtype)[:, None, None]
    if nh >= h:
        top, left = (nh - h) // 2, (nw - w) // 2
        out = scaled[:, top:top + h, left:left + w]
    else:
        top, left = (h - nh) // 2, (w - nw) // 2
        out[:, top:top + nh, left:left + nw] = scaled
    return out


def _erase(image, rng, area_range, aspect_range, fill):
    c, h, w = image.shape
    for _ in range(10):
        area = rng.uniform(*area_range) * h * w
        aspect = rng.uniform(*aspect_range)
        eh = int(round(math.sqrt(area * aspect)))
        ew = int(round(math.sqrt(area / aspect)))
        if 0 < eh <= h and 0 < ew <= w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            out = image.copy()
            out[:, top:top + eh, left:left + ew] = \
                np.asarray(fill, dtype=image.dtype)[:, None, None]
            return out
    return image


def augment(sample: Sample, rng, policy: AugmentPolicy) -> Sample:
    """Flip / zoom / erase with a fixed draw order so runs are replayable."""
    if not policy.enabled:
        return sample
    image = sample.image
    if rng.uniform() < policy.flip_p:
        image = image[:, :, ::-1].copy()
    scale = rng.uniform(*policy.zoom_range)
    image = _zoom(image, scale, policy.fill)
    if rng.uniform() < policy.erase_p:
        image = _erase(image, rng, policy.erase_area, policy.erase_aspect, policy.fill)
    return replace(sample, image=np.ascontiguousarray(image, dtype=np.float32))
