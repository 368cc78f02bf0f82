"""Variant assembly: baseline, attribute-branch network, and the full
fusion network (additive or attention-gated), with named, partitioned
parameters and the freezing hook the second training stage relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .backbone import Backbone, BackboneConfig
from .heads import AttributeBranch, ReidHead
from .joint import JointModule, pooled_attribute
from .layers import Module, Norm
from .numerics import Tensor

VARIANTS = ("baseline", "van", "anet", "anet_no_ac", "anet_att")

PARTITIONS = {
    "backbone": "backbone",
    "reid_head": "reid-head",
    "branches": "attribute-branches",
    "joint": "joint-module",
}


@dataclass
class ModelConfig:
    variant: str = "anet"
    branch_style: str = "att"
    image_size: int = 64
    stage_channels: tuple = (16, 32, 64)
    blocks_per_stage: int = 1
    ibn_enabled: bool = True
    embed_dim: int = 64        # global and joint embedding size
    attr_embed_dim: int = 16   # per-attribute embedding size
    se_reduction: int = 16
    attr_classes: tuple = (6, 4)
    id_count: int = 64

    @property
    def attr_count(self) -> int:
        return len(self.attr_classes)

    def has_branches(self) -> bool:
        return self.variant != "baseline"

    def has_joint(self) -> bool:
        return self.variant in ("anet", "anet_no_ac", "anet_att")

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.branch_style not in ("att", "fc"):
            raise ValueError(f"unknown branch style {self.branch_style!r}")
        if self.has_joint() and self.branch_style == "fc":
            raise ValueError("fc-style branches produce no attribute maps; "
                             "the fusion path requires attention branches")
        if self.has_joint() and self.attr_count == 0:
            raise ValueError("fusion variants are undefined without attributes")
        if self.id_count < 1:
            raise ValueError("id_count must be positive")
        BackboneConfig(self.stage_channels, self.blocks_per_stage,
                       self.ibn_enabled).validate(self.image_size)


@dataclass
class ModelOutputs:
    """Everything one forward pass produces; unused paths stay None."""
    feature_map: Tensor
    global_feat: Tensor
    global_logits: Tensor
    attr_maps: list = field(default_factory=list)
    attr_feats: list = field(default_factory=list)
    attr_logits: list = field(default_factory=list)
    fused_map: Tensor | None = None
    fused_vec: Tensor | None = None
    distilled_map: Tensor | None = None
    joint_map: Tensor | None = None
    joint_feat: Tensor | None = None
    joint_logits: Tensor | None = None


class ANet(Module):
    def __init__(self, cfg: ModelConfig, rng=None, dtype=np.float32):
        cfg.validate()
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        bb_cfg = BackboneConfig(cfg.stage_channels, cfg.blocks_per_stage, cfg.ibn_enabled)
        c = bb_cfg.out_channels
        self.backbone = Backbone(bb_cfg, rng, dtype=dtype)
        self.reid_head = ReidHead(c, cfg.embed_dim, cfg.id_count, rng, dtype=dtype)
        self.branches = [
            AttributeBranch(c, cfg.attr_embed_dim, m, rng, style=cfg.branch_style,
                            se_reduction=cfg.se_reduction, dtype=dtype)
            for m in (cfg.attr_classes if cfg.has_branches() else ())
        ]
        self.joint = JointModule(c, cfg.embed_dim, cfg.id_count, rng,
                                 attention_variant=(cfg.variant == "anet_att"),
                                 dtype=dtype) if cfg.has_joint() else None

    def forward(self, images, train: bool) -> ModelOutputs:
        if not isinstance(images, Tensor):
            images = Tensor(images)
        fmap = self.backbone(images, train)
        global_feat = self.reid_head.embed(fmap)
        out = ModelOutputs(
            feature_map=fmap,
            global_feat=global_feat,
            global_logits=self.reid_head.logits(global_feat),
        )
        for branch in self.branches:
            gated, emb, logits = branch(fmap)
            out.attr_maps.append(gated)
            out.attr_feats.append(emb)
            out.attr_logits.append(logits)
        if self.joint is not None:
            out.fused_map = self.joint.fuse(out.attr_maps, train)
            out.fused_vec = pooled_attribute(out.fused_map)
            if self.cfg.variant == "anet_att":
                out.joint_map = self.joint.compensate_att(fmap, out.fused_map)
            else:
                out.distilled_map = self.joint.distill(out.fused_map, train)
                out.joint_map = self.joint.compensate(fmap, out.distilled_map)
            out.joint_feat = self.joint.embed(out.joint_map)
            out.joint_logits = self.joint.logits(out.joint_feat)
        return out

    # -- state handling -----------------------------------------------------

    def partition_of(self, name: str) -> str:
        return PARTITIONS[name.split(".", 1)[0]]

    def state_arrays(self):
        """(name, array, kind) for every parameter and running-stat buffer."""
        for name, p in self.named_parameters():
            yield name, p.data, "param"
        for name, buf in self.named_buffers():
            yield name, buf, "buffer"

    def load_state(self, arrays: dict):
        """Overwrite parameters and buffers in place from name -> array.

        Rejects missing names and shape mismatches, naming the offender.
        """
        own = {n: p for n, p in self.named_parameters()}
        bufs = dict(self.named_buffers())
        for name, target in list(own.items()) + list(bufs.items()):
            if name not in arrays:
                raise KeyError(f"state is missing {name!r}")
            src = arrays[name]
            dest = target.data if isinstance(target, Tensor) else target
            if tuple(src.shape) != tuple(dest.shape):
                raise ValueError(
                    f"shape mismatch for {name!r}: checkpoint {tuple(src.shape)} "
                    f"vs model {tuple(dest.shape)}")
            dest[...] = src.astype(dest.dtype)

    def freeze_backbone(self):
        """Stage-2 freeze: trunk parameters stop updating, trunk norm layers
        switch to inference statistics and stop accumulating them."""
        for name, p in self.named_parameters():
            if name.startswith("backbone."):
                p.trainable = False
        for mod in self.backbone.modules():
            if isinstance(mod, Norm):
                mod.frozen = True

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.trainable]


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ANet:
    return ANet(cfg, np.random.default_rng(np.random.SeedSequence([seed, 0x0A11])), dtype=dtype)
