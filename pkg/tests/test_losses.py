"""Loss contracts against definition-level oracles."""

import math

import numpy as np
import pytest

from anet.losses import (LossWeights, ac_ce, ac_tri, ce_label_smooth,
                         ce_label_smooth_per_sample, composite, compute_losses,
                         triplet_attribute_pattern, triplet_batch_hard)
from anet.model import ANet, ModelConfig
from anet.numerics import Tensor

LN2 = math.log(2.0)


def t(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def ce_smooth_oracle(logits, target, eps):
    """Direct summation over the smoothed target distribution."""
    m = len(logits)
    z = logits - logits.max()
    logp = z - math.log(np.exp(z).sum())
    q = np.full(m, eps / m)
    q[target] += 1.0 - eps
    return float(-(q * logp).sum())


def hard_triplet_oracle(emb, same_class, margin):
    """Exhaustive anchor/positive/negative scan with hardest selection."""
    n = len(emb)
    losses = []
    for a in range(n):
        pos = [np.linalg.norm(emb[a] - emb[x]) for x in range(n)
               if x != a and same_class[a][x]]
        neg = [np.linalg.norm(emb[a] - emb[x]) for x in range(n)
               if not same_class[a][x]]
        if not pos or not neg:
            continue
        losses.append(max(0.0, margin + max(pos) - min(neg)))
    return float(np.mean(losses)) if losses else 0.0


class TestCeLabelSmooth:
    def test_uniform_logits_give_log_m(self):
        for m in (2, 5, 9):
            logits = t(np.full((3, m), 1.7))
            for eps in (0.0, 0.1, 0.5):
                out = ce_label_smooth(logits, [0, 1, m - 1], eps)
                assert abs(out.item() - math.log(m)) < 1e-9

    def test_zero_eps_is_plain_cross_entropy(self):
        logits = np.array([[4.0, 0.0, -1.0]])
        out = ce_label_smooth(t(logits), [0], 0.0)
        expected = -np.log(np.exp(4.0) / np.exp(logits).sum())
        assert abs(out.item() - expected) < 1e-9

    def test_matches_direct_summation_oracle(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((6, 5)) * 3
        targets = rng.integers(0, 5, size=6)
        per = ce_label_smooth_per_sample(t(logits), targets, 0.1)
        for i in range(6):
            assert abs(per.data[i] - ce_smooth_oracle(logits[i], targets[i], 0.1)) < 1e-7

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal((4, 6))
        a = ce_label_smooth(t(logits), [0, 1, 2, 3], 0.1).item()
        b = ce_label_smooth(t(logits + 100.0), [0, 1, 2, 3], 0.1).item()
        assert abs(a - b) < 1e-6

    def test_target_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="out of range"):
            ce_label_smooth(t(np.zeros((1, 3))), [3], 0.1)


class TestTripletBatchHard:
    def test_identical_embeddings_give_margin(self):
        emb = t(np.ones((6, 4)))
        ids = [0, 0, 0, 1, 1, 1]
        out = triplet_batch_hard(emb, ids, margin=0.3)
        assert abs(out.item() - 0.3) < 1e-12

    def test_well_separated_clusters_give_zero(self):
        emb = np.concatenate([np.zeros((3, 4)), np.full((3, 4), 100.0)])
        ids = [0, 0, 0, 1, 1, 1]
        out = triplet_batch_hard(t(emb), ids, margin=0.3)
        assert out.item() == 0.0

    def test_hand_set_points_match_exhaustive_oracle(self):
        emb = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [1.5, 2.0]])
        ids = np.array([0, 0, 1, 1])
        same = ids[:, None] == ids[None, :]
        expected = hard_triplet_oracle(emb, same, 0.3)
        out = triplet_batch_hard(t(emb), ids, margin=0.3)
        assert abs(out.item() - expected) < 1e-9

    def test_random_batches_match_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n_ids = rng.integers(2, 5)
            k = rng.integers(2, 4)
            ids = np.repeat(np.arange(n_ids), k)
            emb = rng.standard_normal((len(ids), 3))
            same = ids[:, None] == ids[None, :]
            expected = hard_triplet_oracle(emb, same, 0.3)
            out = triplet_batch_hard(t(emb), ids, 0.3)
            assert abs(out.item() - expected) < 1e-9

    def test_translation_invariance(self):
        rng = np.random.default_rng(3)
        emb = rng.standard_normal((8, 4))
        ids = [0, 0, 1, 1, 2, 2, 3, 3]
        a = triplet_batch_hard(t(emb), ids, 0.3).item()
        b = triplet_batch_hard(t(emb + 7.5), ids, 0.3).item()
        assert abs(a - b) < 1e-9

    def test_single_identity_batch_rejected(self):
        with pytest.raises(ValueError, match="two identities"):
            triplet_batch_hard(t(np.zeros((4, 2))), [5, 5, 5, 5], 0.3)


class TestTripletAttributePattern:
    def test_single_pattern_gives_zero(self):
        emb = t(np.random.default_rng(4).standard_normal((4, 3)))
        attrs = np.tile([2, 1], (4, 1))
        assert triplet_attribute_pattern(emb, attrs, 0.3).item() == 0.0

    def test_all_missing_one_attribute_gives_zero(self):
        emb = t(np.random.default_rng(5).standard_normal((4, 3)))
        attrs = np.array([[-1, 0], [-1, 0], [-1, 1], [-1, 1]])
        assert triplet_attribute_pattern(emb, attrs, 0.3).item() == 0.0

    def test_two_patterns_match_brute_force(self):
        emb = np.array([[0.0, 0.0], [0.5, 0.0], [3.0, 0.0], [3.5, 0.5]])
        attrs = np.array([[0, 0], [0, 0], [1, 0], [1, 0]])
        pattern_same = (attrs[:, None, :] == attrs[None, :, :]).all(-1)
        expected = hard_triplet_oracle(emb, pattern_same, 0.3)
        out = triplet_attribute_pattern(t(emb), attrs, 0.3)
        assert abs(out.item() - expected) < 1e-9

    def test_partially_labeled_anchor_excluded(self):
        rng = np.random.default_rng(6)
        emb = rng.standard_normal((5, 3))
        attrs = np.array([[0, 0], [0, 0], [1, 1], [1, 1], [-1, 0]])
        out = triplet_attribute_pattern(t(emb), attrs, 0.3)
        same = (attrs[:4, None, :] == attrs[None, :4, :]).all(-1)
        expected = hard_triplet_oracle(emb[:4], same, 0.3)
        assert abs(out.item() - expected) < 1e-9

    def test_masked_samples_get_no_gradient(self):
        emb = t(np.random.default_rng(7).standard_normal((5, 3)))
        attrs = np.array([[0, 0], [0, 0], [1, 1], [1, 1], [-1, 0]])
        out = triplet_attribute_pattern(emb, attrs, 5.0)  # big margin: active hinge
        out.backward()
        assert emb.grad is not None
        np.testing.assert_array_equal(emb.grad[4], 0.0)
        assert np.abs(emb.grad[:4]).sum() > 0


class TestAmeliorationConstraints:
    def test_equal_ce_gives_ln2(self):
        per_j = t(np.array([1.0, 2.0, 0.3]))
        out = ac_ce(per_j, np.array([1.0, 2.0, 0.3]))
        assert abs(out.item() - LN2) < 1e-12

    def test_much_better_joint_approaches_zero(self):
        per_j = t(np.array([0.1]))
        out = ac_ce(per_j, np.array([50.0]))
        assert 0.0 < out.item() < 1e-20 or out.item() == 0.0

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(8)
        a, b = rng.standard_normal(6), rng.standard_normal(6)
        out = ac_ce(t(a), b)
        expected = np.mean(np.log1p(np.exp(a - b)))
        assert abs(out.item() - expected) < 1e-9

    def test_monotone_in_difference(self):
        base = ac_ce(t(np.array([1.0])), np.array([1.0])).item()
        worse = ac_ce(t(np.array([1.5])), np.array([1.0])).item()
        better = ac_ce(t(np.array([0.5])), np.array([1.0])).item()
        assert better < base < worse

    def test_identical_embeddings_give_two_ln2(self):
        rng = np.random.default_rng(9)
        emb = rng.standard_normal((6, 4))
        ids = [0, 0, 0, 1, 1, 1]
        out = ac_tri(t(emb), emb.copy(), ids)
        assert abs(out.item() - 2 * LN2) < 1e-9

    def test_dominating_joint_space_approaches_zero(self):
        ids = [0, 0, 1, 1]
        # global space: same-id pairs far apart, cross-id pairs close
        f = np.array([[0.0, 0], [50.0, 0], [0.5, 0], [50.5, 0]])
        # joint space: positives coincide, negatives pushed very far
        j = np.array([[0.0, 0], [0.0, 0], [500.0, 0], [500.0, 0]])
        out = ac_tri(t(j), f, ids)
        assert out.item() < 1e-6

    def test_hand_set_batch_matches_brute_force(self):
        ids = np.array([0, 0, 1, 1])
        rng = np.random.default_rng(10)
        j = rng.standard_normal((4, 3))
        f = rng.standard_normal((4, 3))

        def dist(x, a, b):
            return np.linalg.norm(x[a] - x[b])

        total = 0.0
        for a in range(4):
            pos = [x for x in range(4) if x != a and ids[x] == ids[a]]
            neg = [x for x in range(4) if ids[x] != ids[a]]
            hp = max(pos, key=lambda x: dist(j, a, x))
            hn = min(neg, key=lambda x: dist(j, a, x))
            total += np.log1p(np.exp(dist(j, a, hp) - dist(f, a, hp)))
            total += np.log1p(np.exp(dist(f, a, hn) - dist(j, a, hn)))
        expected = total / 4
        out = ac_tri(t(j), f, ids, pair_source="j")
        assert abs(out.item() - expected) < 1e-9

    def test_f_side_receives_no_gradient(self):
        rng = np.random.default_rng(11)
        j = t(rng.standard_normal((4, 3)))
        f_t = t(rng.standard_normal((4, 3)))
        out = ac_tri(j, f_t.data, [0, 0, 1, 1])
        out.backward()
        assert j.grad is not None and np.abs(j.grad).sum() > 0
        assert f_t.grad is None

    def test_strictly_positive(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            j = rng.standard_normal((4, 3))
            f = rng.standard_normal((4, 3))
            assert ac_tri(t(j), f, [0, 0, 1, 1]).item() > 0.0
            assert ac_ce(t(rng.standard_normal(4)), rng.standard_normal(4)).item() > 0.0


class TestComposite:
    def _parts(self, rng, dtype=np.float64):
        def s(v):
            return Tensor(np.asarray(v, dtype=dtype))
        return {
            "tri_global": s(rng.uniform(0, 2)), "ce_global": s(rng.uniform(0, 2)),
            "attr_ce": [s(rng.uniform(0, 2)), s(rng.uniform(0, 2))],
            "tri_joint": s(rng.uniform(0, 2)), "ce_joint": s(rng.uniform(0, 2)),
            "tri_pattern": s(rng.uniform(0, 2)),
            "ac_ce": s(rng.uniform(0, 1)), "ac_tri": s(rng.uniform(0, 2)),
        }

    def test_all_ones_branch_loss_is_four(self):
        parts = {k: Tensor(np.float64(1.0)) for k in ("tri_global", "ce_global")}
        parts["attr_ce"] = [Tensor(np.float64(1.0)), Tensor(np.float64(1.0))]
        out = composite(parts, LossWeights(), "van")
        assert abs(out.item() - 4.0) < 1e-12

    def test_zero_van_weight_leaves_fusion_loss(self):
        rng = np.random.default_rng(13)
        parts = self._parts(rng)
        w = LossWeights(van_weight=0.0)
        full = composite(parts, w, "full").item()
        jm = composite(parts, w, "jm").item()
        assert abs(full - jm) < 1e-12

    def test_stage2_equals_literal_cancellation(self):
        """The implemented stage-2 objective must equal the literal
        full + AC - van_weight*(global losses) for arbitrary weights."""
        rng = np.random.default_rng(14)
        for _ in range(25):
            parts = self._parts(rng)
            w = LossWeights(attr_weight=rng.uniform(0.1, 3),
                            fused_weight=rng.uniform(0.1, 3),
                            van_weight=rng.uniform(0.1, 3))
            literal = (composite(parts, w, "full").item()
                       + parts["ac_tri"].item() + parts["ac_ce"].item()
                       - w.van_weight * (parts["tri_global"].item()
                                         + parts["ce_global"].item()))
            cancelled = composite(parts, w, "stage2", stage=2).item()
            assert abs(literal - cancelled) < 1e-7

    def test_stage2_outside_stage2_rejected(self):
        rng = np.random.default_rng(15)
        with pytest.raises(ValueError, match="stage 2"):
            composite(self._parts(rng), LossWeights(), "stage2", stage=1)

    def test_baseline_objective_is_global_losses_only(self):
        parts = {"tri_global": Tensor(np.float64(0.7)),
                 "ce_global": Tensor(np.float64(1.3)), "attr_ce": []}
        out = composite(parts, LossWeights(), "van")
        assert abs(out.item() - 2.0) < 1e-12


class TestComputeLosses:
    def _forward(self, variant="anet"):
        cfg = ModelConfig(variant=variant, image_size=16, stage_channels=(4, 8),
                          blocks_per_stage=1, embed_dim=8, attr_embed_dim=4,
                          se_reduction=2, attr_classes=(3, 2), id_count=2)
        model = ANet(cfg, np.random.default_rng(16))
        rng = np.random.default_rng(17)
        images = rng.uniform(0, 1, size=(4, 3, 16, 16)).astype(np.float32)
        ids = np.array([0, 0, 1, 1])
        attrs = np.array([[0, 0], [0, 0], [1, 1], [1, 1]])
        return model, model.forward(images, train=True), ids, attrs

    def test_report_total_reproduces_formula(self):
        _, out, ids, attrs = self._forward()
        w = LossWeights(attr_weight=0.7, fused_weight=1.3, van_weight=0.9)
        total, rep = compute_losses(out, ids, attrs, w, "full")
        formula = (rep.tri_joint + rep.ce_joint + w.fused_weight * rep.tri_pattern
                   + w.van_weight * (rep.tri_global + rep.ce_global
                                     + w.attr_weight * sum(rep.attr_ce)))
        assert abs(rep.total - formula) < 1e-6
        assert abs(total.item() - rep.total) < 1e-12

    def test_masked_counts_recorded(self):
        model, _, ids, _ = self._forward()
        rng = np.random.default_rng(18)
        images = rng.uniform(0, 1, size=(4, 3, 16, 16)).astype(np.float32)
        out = model.forward(images, train=True)
        attrs = np.array([[-1, 0], [0, 0], [-1, 1], [1, 1]])
        _, rep = compute_losses(out, ids, attrs, LossWeights(), "full")
        assert rep.masked_counts == [2, 0]

    def test_fully_masked_attribute_zero_branch_gradient(self):
        """Branch-0 classifier parameters see exactly zero gradient when
        every sample lacks attribute 0 (exclusion, not down-weighting)."""
        model, _, ids, _ = self._forward(variant="van")
        rng = np.random.default_rng(19)
        images = rng.uniform(0, 1, size=(4, 3, 16, 16)).astype(np.float32)
        out = model.forward(images, train=True)
        attrs = np.array([[-1, 0], [-1, 0], [-1, 1], [-1, 1]])
        total, rep = compute_losses(out, ids, attrs, LossWeights(), "van")
        model.zero_grad()
        total.backward()
        assert rep.masked_counts[0] == 4
        for name, p in model.named_parameters():
            if name.startswith("branches.0."):
                assert p.grad is None or not np.any(p.grad), name
            if name.startswith("branches.1."):
                assert p.grad is not None and np.any(p.grad), name
