"""Gradient verification suites.

Primitive scope checks every differentiable op in isolation; composed
scope runs the full model forward plus the stage-1 objective (all
parameters) and the stage-2 objective (the parameters that stage
actually trains; the global-feature side is a constant reference there,
so trunk and global-head parameters are excluded by construction).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .losses import LossWeights, compute_losses
from .model import ANet, ModelConfig
from .numerics import Tensor

PRIMITIVE_TOL = 1e-6
COMPOSED_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float
    worst_input: str = ""
    worst_index: tuple = ()

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= self.tolerance


def _t(rng, shape, shift=0.0):
    return Tensor(rng.standard_normal(shape) + shift, requires_grad=True)


def primitive_checks(h: float = 1e-5) -> list:
    rng = np.random.default_rng(2024)
    stats4 = nm.NormStats.init(4, np.float64)
    stats2 = nm.NormStats.init(2, np.float64)
    cases = [
        ("conv2d", lambda x, w, b: nm.conv2d(x, w, b, stride=2, padding=1),
         {"x": _t(rng, (2, 3, 6, 6)), "w": _t(rng, (4, 3, 3, 3)), "b": _t(rng, (4,))}),
        ("linear", lambda x, w, b: nm.linear(x, w, b),
         {"x": _t(rng, (5, 3)), "w": _t(rng, (4, 3)), "b": _t(rng, (4,))}),
        ("relu", lambda x: nm.relu(x), {"x": _t(rng, (4, 6), shift=0.2)}),
        ("sigmoid", lambda x: nm.sigmoid(x), {"x": _t(rng, (4, 6))}),
        ("softplus", lambda x: nm.softplus(x), {"x": _t(rng, (4, 6))}),
        ("softmax", lambda x: nm.softmax(x), {"x": _t(rng, (4, 6))}),
        ("gap", lambda x: nm.gap(x), {"x": _t(rng, (2, 3, 4, 4))}),
        ("add", lambda a, b: nm.add(a, b), {"a": _t(rng, (3, 4)), "b": _t(rng, (3, 4))}),
        ("mul", lambda a, b: nm.mul(a, b), {"a": _t(rng, (3, 4)), "b": _t(rng, (3, 4))}),
        ("concat", lambda a, b: nm.concat([a, b], axis=1),
         {"a": _t(rng, (3, 2)), "b": _t(rng, (3, 3))}),
        ("l2norm", lambda x: nm.l2norm(x), {"x": _t(rng, (4, 5), shift=0.3)}),
        ("pairwise_sq_dist", lambda x: nm.pairwise_sq_dist(x), {"x": _t(rng, (5, 3))}),
        ("normalize_batch",
         lambda x, gamma, beta: nm.batch_norm(x, gamma, beta, stats4, train=True),
         {"x": _t(rng, (4, 4, 3, 3)), "gamma": _t(rng, (4,), shift=1.0), "beta": _t(rng, (4,))}),
        ("normalize_instance",
         lambda x, gamma, beta: nm.instance_norm(x, gamma, beta),
         {"x": _t(rng, (3, 4, 4, 4)), "gamma": _t(rng, (4,), shift=1.0), "beta": _t(rng, (4,))}),
        ("normalize_ibn_split",
         lambda x, gi, bi, gb, bb: nm.ibn_split(x, gi, bi, gb, bb, stats2, train=True),
         {"x": _t(rng, (4, 4, 3, 3)), "gi": _t(rng, (2,), shift=1.0), "bi": _t(rng, (2,)),
          "gb": _t(rng, (2,), shift=1.0), "bb": _t(rng, (2,))}),
    ]
    results = []
    for name, fn, inputs in cases:
        rep = nm.grad_check(fn, inputs, h=h)
        results.append(CheckResult(name, rep.max_rel_err, PRIMITIVE_TOL,
                                   rep.worst_input, rep.worst_index))
    return results


def _tiny_model_and_batch():
    cfg = ModelConfig(variant="anet", image_size=8, stage_channels=(4, 6),
                      blocks_per_stage=1, ibn_enabled=True, embed_dim=8,
                      attr_embed_dim=4, se_reduction=2, attr_classes=(3, 2),
                      id_count=2)
    model = ANet(cfg, np.random.default_rng(11), dtype=np.float64)
    rng = np.random.default_rng(12)
    images = rng.uniform(0.0, 1.0, size=(4, 3, 8, 8))
    ids = np.array([0, 0, 1, 1])
    # two attribute patterns, one missing label to exercise masking
    attrs = np.array([[0, 0], [0, 0], [1, 1], [-1, 1]])
    return model, images, ids, attrs


def composed_checks(h: float = 1e-5) -> list:
    results = []
    weights = LossWeights()

    def run_case(name, mode, stage, param_filter):
        model, images, ids, attrs = _tiny_model_and_batch()
        inputs = {n.replace(".", "_"): p for n, p in model.named_parameters()
                  if param_filter(n)}

        def fn(**_ignored):
            out = model.forward(images, train=True)
            total, _ = compute_losses(out, ids, attrs, weights, mode, stage=stage)
            return total

        rep = nm.grad_check(fn, inputs, h=h)
        results.append(CheckResult(name, rep.max_rel_err, COMPOSED_TOL,
                                   rep.worst_input, rep.worst_index))

    run_case("composed_stage1_full_loss", "full", 1, lambda n: True)
    run_case("composed_stage2_ac_loss", "stage2", 2,
             lambda n: not (n.startswith("backbone.") or n.startswith("reid_head.")))
    return results


def run_suite(scope: str = "all", h: float = 1e-5) -> list:
    if scope not in ("primitive", "composed", "all"):
        raise ValueError(f"unknown scope {scope!r}")
    results = []
    if scope in ("primitive", "all"):
        results.extend(primitive_checks(h))
    if scope in ("composed", "all"):
        results.extend(composed_checks(h))
    return results


def format_results(results) -> str:
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        extra = "" if r.ok else f"  worst={r.worst_input}{list(r.worst_index)}"
        lines.append(f"{r.name:<{width}}  max_rel_err={r.max_rel_err:.3e}  "
                     f"tol={r.tolerance:.0e}  {status}{extra}")
    return "\n".join(lines)
