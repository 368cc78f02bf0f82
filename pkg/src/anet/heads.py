"""Heads over the shared feature map: the global re-id head and the
per-attribute branches (channel-attention style, or the plain-FC ablation
variant that skips attention and cannot feed the fusion path).
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .layers import Linear, Module, SEBlock
from .numerics import Tensor

CLASSIFIER_STD = 0.01


class ReidHead(Module):
    """Pooled feature map -> embedding -> identity logits."""

    def __init__(self, channels, embed_dim, id_count, rng, dtype=np.float32):
        self.fc = Linear(channels, embed_dim, rng, dtype=dtype)
        self.classifier = Linear(embed_dim, id_count, rng, bias=False,
                                 init_std=CLASSIFIER_STD, dtype=dtype)

    def embed(self, fmap: Tensor) -> Tensor:
        return self.fc(nm.gap(fmap))

    def logits(self, emb: Tensor) -> Tensor:
        return self.classifier(emb)


class AttributeBranch(Module):
    """One branch per attribute.

    style 'att': a channel gate rescales the shared map into an
    attribute-focused map, which is pooled and embedded; the gated map is
    what the fusion path consumes. style 'fc' pools the shared map
    directly and produces no map, so it cannot participate in fusion.
    """

    def __init__(self, channels, embed_dim, class_count, rng,
                 style="att", se_reduction=16, dtype=np.float32):
        if style not in ("att", "fc"):
            raise ValueError(f"unknown branch style {style!r}")
        self.style = style
        self.attention = SEBlock(channels, rng, reduction=se_reduction, dtype=dtype) \
            if style == "att" else None
        self.fc = Linear(channels, embed_dim, rng, dtype=dtype)
        self.classifier = Linear(embed_dim, class_count, rng, bias=False,
                                 init_std=CLASSIFIER_STD, dtype=dtype)

    def __call__(self, fmap: Tensor):
        """Returns (gated map or None, attribute embedding, class logits)."""
        if self.style == "att":
            gate = self.attention.gate(fmap)
            n, c = gate.data.shape
            gated = nm.mul(fmap, nm.reshape(gate, (n, c, 1, 1)))
            emb = self.fc(nm.gap(gated))
            return gated, emb, self.classifier(emb)
        emb = self.fc(nm.gap(fmap))
        return None, emb, self.classifier(emb)


def concat_features(global_feat: Tensor, attr_feats) -> Tensor:
    """Order-stable [global, attr_1, ..., attr_n] concatenation."""
    parts = [global_feat] + list(attr_feats)
    if len(parts) == 1:
        return global_feat
    return nm.concat(parts, axis=1)
