"""Procedural synthetic vehicles for desk-scale experiments.

Each identity is a silhouette template (one per type class), a base hue
(one per color class) and a seeded high-frequency texture unique to the
identity. Each image renders that sprite under a random viewpoint affine,
illumination scaling and background clutter, so retrieval is nontrivial
while attributes stay functions of the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, DatasetMeta, Sample
from .images import affine_matrix, affine_warp, resize_bilinear


@dataclass
class SyntheticSpec:
    id_count: int = 16
    images_per_id: int = 8
    image_size: int = 64
    color_classes: int = 6
    type_classes: int = 4
    camera_count: int = 4

    def validate(self):
        if self.color_classes < 2 or self.type_classes < 2:
            raise ValueError("need at least 2 color and 2 type classes")
        if self.id_count < 1 or self.images_per_id < 1:
            raise ValueError("id_count and images_per_id must be positive")


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


def _hue_to_rgb(h):
    # simple HSV->RGB at s=0.85, v=0.85
    s, v = 0.85, 0.85
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _type_params(type_idx):
    """Silhouette parameters per type class; fixed archetypes first,
    then seeded variations for larger vocabularies."""
    archetypes = [
        dict(body_h=0.16, cabin_w=0.42, cabin_h=0.13, cabin_off=0.00, wheel_r=0.065),
        dict(body_h=0.20, cabin_w=0.62, cabin_h=0.24, cabin_off=0.10, wheel_r=0.080),
        dict(body_h=0.30, cabin_w=0.76, cabin_h=0.08, cabin_off=0.00, wheel_r=0.070),
        dict(body_h=0.14, cabin_w=0.34, cabin_h=0.17, cabin_off=-0.14, wheel_r=0.060),
        dict(body_h=0.17, cabin_w=0.30, cabin_h=0.15, cabin_off=0.18, wheel_r=0.075),
        dict(body_h=0.11, cabin_w=0.48, cabin_h=0.08, cabin_off=-0.05, wheel_r=0.055),
    ]
    if type_idx < len(archetypes):
        return archetypes[type_idx]
    r = _rng(0x7E3A, type_idx)
    return dict(body_h=r.uniform(0.12, 0.3), cabin_w=r.uniform(0.3, 0.75),
                cabin_h=r.uniform(0.08, 0.25), cabin_off=r.uniform(-0.2, 0.2),
                wheel_r=r.uniform(0.05, 0.09))


def _sprite(size, type_idx, color_idx, color_classes, id_rng):
    """Render the canonical (untransformed) vehicle sprite and its mask."""
    tp = dict(_type_params(type_idx))
    # identity geometry jitter, small enough to keep the type readable
    for key in tp:
        tp[key] *= 1.0 + id_rng.uniform(-0.06, 0.06)
    s = float(size)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    ground = 0.78 * s
    x0, x1 = 0.12 * s, 0.88 * s
    body_top = ground - tp["body_h"] * s
    body = (xs >= x0) & (xs <= x1) & (ys >= body_top) & (ys <= ground)
    ccx = (x0 + x1) / 2 + tp["cabin_off"] * s
    cw = tp["cabin_w"] * (x1 - x0) / 2
    cab_top = body_top - tp["cabin_h"] * s
    cabin = (xs >= ccx - cw) & (xs <= ccx + cw) & (ys >= cab_top) & (ys <= body_top)
    wheel_r = tp["wheel_r"] * s
    wy = ground
    wheels = ((xs - (x0 + 0.18 * (x1 - x0))) ** 2 + (ys - wy) ** 2 <= wheel_r ** 2) | \
             ((xs - (x1 - 0.18 * (x1 - x0))) ** 2 + (ys - wy) ** 2 <= wheel_r ** 2)
    mask = (body | cabin | wheels).astype(np.float32)

    base = np.array(_hue_to_rgb(color_idx / color_classes), dtype=np.float32)
    img = np.zeros((3, size, size), dtype=np.float32)
    img[:] = base[:, None, None]
    # seeded per-identity texture: coarse random grid upsampled over the sprite
    grid = id_rng.uniform(-0.22, 0.22, size=(3, 5, 9)).astype(np.float32)
    texture = resize_bilinear(grid, size, size)
    img = np.clip(img + texture, 0.0, 1.0)
    # cabin glass band and dark wheels for structure
    img[:, cabin & (ys < body_top - 0.02 * s)] *= 0.55
    img[:, wheels] = 0.12
    return img * mask[None], mask


def _background(size, rng):
    coarse = rng.uniform(0.1, 0.9, size=(3, 4, 4)).astype(np.float32)
    bg = resize_bilinear(coarse, size, size)
    for _ in range(3):
        x0, y0 = rng.integers(0, size, size=2)
        w, h = rng.integers(size // 8, size // 2, size=2)
        color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
        bg[:, y0:y0 + h, x0:x0 + w] = 0.5 * bg[:, y0:y0 + h, x0:x0 + w] + 0.5 * color[:, None, None]
    return bg


def gen_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Deterministic dataset: (seed -> samples) is a pure function."""
    spec.validate()
    size = spec.image_size
    samples = []
    for identity in range(spec.id_count):
        color = identity % spec.color_classes
        vtype = (identity // spec.color_classes) % spec.type_classes
        id_rng = _rng(seed, 1, identity)
        sprite, mask = _sprite(size, vtype, color, spec.color_classes, id_rng)
        for idx in range(spec.images_per_id):
            img_rng = _rng(seed, 2, identity, idx)
            bg = _background(size, img_rng)
            mat = affine_matrix(
                angle_deg=img_rng.uniform(-25.0, 25.0),
                scale=img_rng.uniform(0.75, 1.15),
                shear=img_rng.uniform(-0.15, 0.15),
                tx=img_rng.uniform(-0.1, 0.1) * size,
                ty=img_rng.uniform(-0.08, 0.08) * size,
            )
            flip = img_rng.uniform() < 0.3
            src = sprite[:, :, ::-1] if flip else sprite
            src_mask = mask[:, ::-1] if flip else mask
            warped = affine_warp(src, mat, np.zeros(3, dtype=np.float32))
            wmask = affine_warp(src_mask[None], mat, np.zeros(1, dtype=np.float32))[0]
            composed = bg * (1.0 - wmask[None]) + warped
            composed = composed * img_rng.uniform(0.6, 1.3)
            composed = composed + img_rng.normal(0.0, 0.02, size=composed.shape)
            image = np.clip(composed, 0.0, 1.0).astype(np.float32)
            samples.append(Sample(image, identity, idx % spec.camera_count, (color, vtype)))
    meta = DatasetMeta(2, (spec.color_classes, spec.type_classes), spec.id_count, split="all")
    return Dataset(samples, meta)


def split_synthetic(dataset: Dataset, train_id_count: int):
    """First ids form the train split; held-out ids alternate query/gallery
    by image order (cameras already alternate, so cross-camera matches exist)."""
    groups = dataset.by_identity()
    ids = sorted(groups)
    if train_id_count >= len(ids):
        raise ValueError(f"train_id_count {train_id_count} leaves no held-out identities")
    train, query, gallery = [], [], []
    for identity in ids:
        idxs = groups[identity]
        if identity < train_id_count:
            train.extend(dataset.samples[i] for i in idxs)
        else:
            for pos, i in enumerate(idxs):
                (gallery if pos % 2 == 0 else query).append(dataset.samples[i])
    meta = dataset.meta

    def make(samples, split):
        return Dataset(samples, DatasetMeta(meta.attr_count, meta.attr_classes,
                                            len({s.identity for s in samples}), split))

    return make(train, "train"), make(query, "query"), make(gallery, "gallery")
