"""Training objectives.

All losses are means over the batch. Identity losses pair a batch-hard
triplet term with label-smoothed cross entropy; the fused attribute map
gets a triplet loss over full attribute patterns; the amelioration terms
are softplus penalties pushing the compensated embedding to beat the
pre-compensation one, with the pre-compensation side held constant (it is
the frozen reference during the second training stage).

Samples with missing attribute labels never contribute gradient to the
attribute terms: their rows are simply not selected, so exclusion is
exact rather than a multiply-by-zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import Tensor

OBJECTIVES = ("van", "jm", "full", "stage2", "stage2_no_ac")


@dataclass
class LossWeights:
    attr_weight: float = 1.0    # attribute CE weight inside the branch loss
    fused_weight: float = 1.0   # pattern-triplet weight inside the fusion loss
    van_weight: float = 1.0     # branch-loss weight inside the full loss
    margin: float = 0.3
    label_smooth: float = 0.1


@dataclass
class LossReport:
    """Per-term scalars for one batch; absent terms stay None."""
    tri_global: float | None = None
    ce_global: float | None = None
    attr_ce: list = field(default_factory=list)
    tri_pattern: float | None = None
    tri_joint: float | None = None
    ce_joint: float | None = None
    ac_ce: float | None = None
    ac_tri: float | None = None
    total: float = 0.0
    masked_counts: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "tri_f": self.tri_global, "id_f": self.ce_global,
            "att": list(self.attr_ce), "tri_g": self.tri_pattern,
            "tri_j": self.tri_joint, "id_j": self.ce_joint,
            "ac_id": self.ac_ce, "ac_tri": self.ac_tri,
            "total": self.total, "masked": list(self.masked_counts),
        }


def _zero(dtype):
    return Tensor(np.zeros((), dtype=dtype))


def ce_label_smooth_per_sample(logits: Tensor, targets, eps: float) -> Tensor:
    """Label-smoothed cross entropy, one value per row.

    Smoothed target puts 1-eps+eps/m on the true class and eps/m
    elsewhere, which collapses to -(1-eps)*logp_t - (eps/m)*sum_k logp_k.
    """
    targets = np.asarray(targets)
    n, m = logits.data.shape
    if np.any(targets < 0) or np.any(targets >= m):
        raise ValueError(f"targets out of range for {m} classes")
    lp = nm.log_softmax(logits, axis=1)
    picked = nm.select_pairs(lp, np.arange(n), targets)
    spread = nm.sum_(lp, axis=1)
    return nm.add(nm.mul(picked, -(1.0 - eps)), nm.mul(spread, -eps / m))


def ce_label_smooth(logits: Tensor, targets, eps: float) -> Tensor:
    return nm.mean_(ce_label_smooth_per_sample(logits, targets, eps))


def _pair_masks(ids):
    ids = np.asarray(ids)
    same = ids[:, None] == ids[None, :]
    np.fill_diagonal(same, False)
    diff = ids[:, None] != ids[None, :]
    return same, diff


def _hard_indices(dist, same, diff):
    """Per-anchor hardest positive/negative indices from a distance matrix."""
    big = np.finfo(dist.dtype).max
    pos = np.where(same, dist, -big)
    neg = np.where(diff, dist, big)
    return pos.argmax(axis=1), neg.argmin(axis=1), same.any(axis=1) & diff.any(axis=1)


def triplet_batch_hard(emb: Tensor, ids, margin: float) -> Tensor:
    """Batch-hard triplet: per anchor, farthest same-id and nearest
    other-id Euclidean distances, hinged at the margin, mean over anchors."""
    same, diff = _pair_masks(ids)
    if not diff.any():
        raise ValueError("triplet loss needs at least two identities in the batch")
    d = nm.safe_sqrt(nm.pairwise_sq_dist(emb))
    hp, hn, valid = _hard_indices(d.data, same, diff)
    anchors = np.flatnonzero(valid)
    if anchors.size == 0:
        raise ValueError("no anchor has a same-identity partner in the batch")
    dp = nm.select_pairs(d, anchors, hp[anchors])
    dn = nm.select_pairs(d, anchors, hn[anchors])
    return nm.mean_(nm.relu(nm.add(nm.add(dp, -dn), margin)))


def triplet_attribute_pattern(emb: Tensor, attr_labels, margin: float) -> Tensor:
    """Batch-hard triplet where a class is the full attribute tuple.

    Samples missing any attribute label are excluded; anchors without a
    same-pattern or different-pattern partner contribute nothing. A batch
    with no usable anchors yields exactly 0 (degenerate, not an error).
    """
    attrs = np.asarray(attr_labels)
    labeled = (attrs >= 0).all(axis=1)
    eq = (attrs[:, None, :] == attrs[None, :, :]).all(axis=2)
    pair_ok = labeled[:, None] & labeled[None, :]
    same = eq & pair_ok
    np.fill_diagonal(same, False)
    diff = ~eq & pair_ok
    d = nm.safe_sqrt(nm.pairwise_sq_dist(emb))
    hp, hn, valid = _hard_indices(d.data, same, diff)
    anchors = np.flatnonzero(valid & labeled)
    if anchors.size == 0:
        return _zero(emb.dtype)
    dp = nm.select_pairs(d, anchors, hp[anchors])
    dn = nm.select_pairs(d, anchors, hn[anchors])
    return nm.mean_(nm.relu(nm.add(nm.add(dp, -dn), margin)))


def ac_ce(ce_joint_per_sample: Tensor, ce_global_per_sample: np.ndarray) -> Tensor:
    """softplus of the per-image CE difference, averaged; the global side
    enters as a constant so no gradient tries to worsen it."""
    return nm.mean_(nm.softplus(nm.add(ce_joint_per_sample, -np.asarray(ce_global_per_sample))))


def ac_tri(joint_emb: Tensor, global_emb: np.ndarray, ids, pair_source: str = "j") -> Tensor:
    """Distance-ordering constraint between the two embeddings.

    Per anchor, with the hardest positive/negative mined in the requested
    space ('j' joint, 'f' global): softplus(d_j(a,pos) - d_f(a,pos)) +
    softplus(d_f(a,neg) - d_j(a,neg)). The global-side distances are
    constants.
    """
    if pair_source not in ("j", "f"):
        raise ValueError(f"pair_source must be 'j' or 'f', got {pair_source!r}")
    same, diff = _pair_masks(ids)
    if not diff.any():
        raise ValueError("amelioration triplet needs at least two identities")
    d_j = nm.safe_sqrt(nm.pairwise_sq_dist(joint_emb))
    g = np.asarray(global_emb)
    gram = g @ g.T
    sq = np.diagonal(gram)
    d_f = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * gram, 0.0))
    mine = d_j.data if pair_source == "j" else d_f
    hp, hn, valid = _hard_indices(mine, same, diff)
    anchors = np.flatnonzero(valid)
    if anchors.size == 0:
        raise ValueError("no anchor has a same-identity partner in the batch")
    dp_j = nm.select_pairs(d_j, anchors, hp[anchors])
    dn_j = nm.select_pairs(d_j, anchors, hn[anchors])
    dp_f = d_f[anchors, hp[anchors]]
    dn_f = d_f[anchors, hn[anchors]]
    pull = nm.softplus(nm.add(dp_j, -dp_f))
    push = nm.softplus(nm.add(-dn_j, dn_f))
    return nm.mean_(nm.add(pull, push))


def composite(parts: dict, weights: LossWeights, mode: str, stage: int = 1) -> Tensor:
    """Weighted combinations of the per-term scalars.

    Modes: 'van' (branch network), 'jm' (fusion losses), 'full'
    (jm + van), 'stage2' (full minus the global-feature losses, plus the
    amelioration terms; algebraically jm + van_weight*attr_weight*attr_ce
    + ac terms), 'stage2_no_ac' (same without the ac terms). Stage-2 modes
    are rejected outside stage 2.
    """
    if mode not in OBJECTIVES:
        raise ValueError(f"unknown objective {mode!r}, expected one of {OBJECTIVES}")
    if mode.startswith("stage2") and stage != 2:
        raise ValueError(f"objective {mode!r} is only valid in training stage 2")

    def attr_sum():
        terms = parts.get("attr_ce", [])
        if not terms:
            return None
        total = terms[0]
        for t in terms[1:]:
            total = nm.add(total, t)
        return total

    def van():
        out = nm.add(parts["tri_global"], parts["ce_global"])
        a = attr_sum()
        return out if a is None else nm.add(out, nm.mul(a, weights.attr_weight))

    def jm():
        out = nm.add(parts["tri_joint"], parts["ce_joint"])
        return nm.add(out, nm.mul(parts["tri_pattern"], weights.fused_weight))

    if mode == "van":
        return van()
    if mode == "jm":
        return jm()
    if mode == "full":
        return nm.add(jm(), nm.mul(van(), weights.van_weight))
    out = jm()
    a = attr_sum()
    if a is not None:
        out = nm.add(out, nm.mul(a, weights.van_weight * weights.attr_weight))
    if mode == "stage2":
        out = nm.add(nm.add(out, parts["ac_ce"]), parts["ac_tri"])
    return out


def compute_losses(outputs, ids, attr_labels, weights: LossWeights,
                   mode: str, stage: int = 1,
                   ac_pair_source: str = "j"):
    """Assemble every active term from one forward pass.

    ids are classifier indices (contiguous); attr_labels is (N, n) with -1
    marking an absent label. Returns (total loss tensor, LossReport).
    """
    attrs = np.asarray(attr_labels).reshape(len(np.asarray(ids)), -1)
    eps = weights.label_smooth
    report = LossReport()
    parts = {}

    ce_global_per = ce_label_smooth_per_sample(outputs.global_logits, ids, eps)
    parts["ce_global"] = nm.mean_(ce_global_per)
    parts["tri_global"] = triplet_batch_hard(outputs.global_feat, ids, weights.margin)
    report.ce_global = parts["ce_global"].item()
    report.tri_global = parts["tri_global"].item()

    parts["attr_ce"] = []
    for i, logits in enumerate(outputs.attr_logits):
        present = np.flatnonzero(attrs[:, i] >= 0)
        report.masked_counts.append(int(attrs.shape[0] - present.size))
        if present.size == 0:
            term = _zero(logits.dtype)
        else:
            safe_targets = np.where(attrs[:, i] >= 0, attrs[:, i], 0)
            per = ce_label_smooth_per_sample(logits, safe_targets, eps)
            term = nm.mean_(nm.select(per, present))
        parts["attr_ce"].append(term)
        report.attr_ce.append(term.item())

    if outputs.joint_feat is not None:
        ce_joint_per = ce_label_smooth_per_sample(outputs.joint_logits, ids, eps)
        parts["ce_joint"] = nm.mean_(ce_joint_per)
        parts["tri_joint"] = triplet_batch_hard(outputs.joint_feat, ids, weights.margin)
        parts["tri_pattern"] = triplet_attribute_pattern(outputs.fused_vec, attrs, weights.margin)
        report.ce_joint = parts["ce_joint"].item()
        report.tri_joint = parts["tri_joint"].item()
        report.tri_pattern = parts["tri_pattern"].item()
        if mode == "stage2":
            parts["ac_ce"] = ac_ce(ce_joint_per, ce_global_per.data)
            parts["ac_tri"] = ac_tri(outputs.joint_feat, outputs.global_feat.data,
                                     ids, pair_source=ac_pair_source)
            report.ac_ce = parts["ac_ce"].item()
            report.ac_tri = parts["ac_tri"].item()

    total = composite(parts, weights, mode, stage=stage)
    report.total = total.item()
    return total, report
