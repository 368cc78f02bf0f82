"""Fusion of attribute maps and compensation onto the global feature map.

The attribute-gated maps are summed and refined with a residual 1x1
conv unit to give a unified attribute map. Two 3x3 conv units distill the
retrieval-relevant part, which is added back onto the backbone map; the
pooled result is the final matching feature. An alternative wiring
(the attention variant) gates the backbone map with a CBAM response of
the fused attribute map instead of adding a distilled residual.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .layers import CBAM, ConvNormRelu, Linear, Module
from .numerics import Tensor

from .heads import CLASSIFIER_STD


class JointModule(Module):
    def __init__(self, channels, embed_dim, id_count, rng,
                 attention_variant=False, cbam_reduction=16, dtype=np.float32):
        self.refine = ConvNormRelu(channels, channels, 1, rng, dtype=dtype)
        if attention_variant:
            self.cbam = CBAM(channels, rng, reduction=cbam_reduction, dtype=dtype)
            self.distill_a = None
            self.distill_b = None
        else:
            self.cbam = None
            self.distill_a = ConvNormRelu(channels, channels, 3, rng, dtype=dtype)
            self.distill_b = ConvNormRelu(channels, channels, 3, rng, dtype=dtype)
        self.fc = Linear(channels, embed_dim, rng, dtype=dtype)
        self.classifier = Linear(embed_dim, id_count, rng, bias=False,
                                 init_std=CLASSIFIER_STD, dtype=dtype)

    def fuse(self, attr_maps, train: bool) -> Tensor:
        """Sum the branch maps and add the refined residual."""
        if not attr_maps:
            raise ValueError("fusion needs at least one attribute map")
        total = attr_maps[0]
        for m in attr_maps[1:]:
            total = nm.add(total, m)
        return nm.add(total, self.refine(total, train))

    def distill(self, fused: Tensor, train: bool) -> Tensor:
        """Two 3x3 conv units, channel- and spatial-size-preserving."""
        return self.distill_a(self.distill_b(fused, train), train)

    def compensate(self, feature_map: Tensor, distilled: Tensor) -> Tensor:
        if feature_map.data.shape != distilled.data.shape:
            raise nm.ShapeError(
                f"compensation shape mismatch: {feature_map.data.shape} vs {distilled.data.shape}")
        return nm.add(feature_map, distilled)

    def compensate_att(self, feature_map: Tensor, fused: Tensor) -> Tensor:
        """Attention-variant wiring: gate the backbone map, keep the residual."""
        gate = self.cbam.gate(fused)
        return nm.add(nm.mul(feature_map, gate), feature_map)

    def embed(self, joint_map: Tensor) -> Tensor:
        return self.fc(nm.gap(joint_map))

    def logits(self, emb: Tensor) -> Tensor:
        return self.classifier(emb)


def pooled_attribute(fused: Tensor) -> Tensor:
    """Channel descriptor of the fused attribute map (feeds its triplet loss)."""
    return nm.gap(fused)


def channel_mean_map(fmap_data: np.ndarray) -> np.ndarray:
    """Per-image channel-mean activation map, (N,C,H,W) -> (N,H,W)."""
    return fmap_data.mean(axis=1)
