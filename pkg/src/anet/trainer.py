"""Two-stage training: the full objective first, then a frozen-trunk stage
where the global-feature losses are disabled and the amelioration terms
take over. Amsgrad updates throughout, step-decayed learning rate.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import save_checkpoint
from .data import AugmentPolicy, Dataset, augment, pk_sample
from .losses import LossWeights, compute_losses
from .model import ANet


@dataclass
class TrainConfig:
    epochs_total: int = 210
    stage1_epochs: int = 150
    lr: float = 0.0006
    decay_factor: float = 0.1
    decay_epochs: tuple = (60, 120, 150)
    batch_p: int = 4
    batch_k: int = 4
    steps_per_epoch: int | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    ac_pair_source: str = "j"
    # the no-AC ablation trains single-stage by default; set True to keep
    # the two-stage schedule (frozen trunk, disabled global losses) minus AC
    no_ac_two_stage: bool = False
    seed: int = 0

    def validate(self, variant: str):
        if not (0 < self.stage1_epochs <= self.epochs_total):
            raise ValueError("need 0 < stage1_epochs <= epochs_total")
        if self.ac_pair_source not in ("j", "f"):
            raise ValueError(f"ac_pair_source must be 'j' or 'f', got {self.ac_pair_source!r}")
        if self.batch_p < 2 or self.batch_k < 1:
            raise ValueError("PK batches need at least 2 identities")
        if variant in ("baseline", "van") and self.no_ac_two_stage:
            raise ValueError(f"variant {variant!r} has no second stage")


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: decay once per boundary the epoch has reached."""
    hits = sum(1 for d in cfg.decay_epochs if epoch >= d)
    return cfg.lr * cfg.decay_factor ** hits


def stage_at(cfg: TrainConfig, epoch: int, variant: str) -> int:
    if variant in ("baseline", "van"):
        return 1
    if variant == "anet_no_ac" and not cfg.no_ac_two_stage:
        return 1
    return 1 if epoch < cfg.stage1_epochs else 2


def objective_for(variant: str, stage: int) -> str:
    if variant in ("baseline", "van"):
        return "van"
    if stage == 1:
        return "full"
    return "stage2_no_ac" if variant == "anet_no_ac" else "stage2"


class Amsgrad:
    """Adam with the max-accumulated second-moment correction.

    Bias-corrected first moment; the denominator uses the elementwise
    maximum of all second-moment estimates seen so far, so it never
    decreases. Parameters whose gradient is absent are skipped entirely
    (their moments and step counts stay untouched).
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {}

    def _slot(self, name, param):
        if name not in self.state:
            self.state[name] = {
                "m": np.zeros_like(param.data),
                "v": np.zeros_like(param.data),
                "vhat": np.zeros_like(param.data),
                "t": 0,
            }
        return self.state[name]

    def step(self, named_params, lr: float):
        for name, p in named_params:
            if not p.trainable or p.grad is None:
                continue
            s = self._slot(name, p)
            g = p.grad
            s["t"] += 1
            s["m"] = self.beta1 * s["m"] + (1 - self.beta1) * g
            s["v"] = self.beta2 * s["v"] + (1 - self.beta2) * (g * g)
            np.maximum(s["vhat"], s["v"], out=s["vhat"])
            bc1 = 1 - self.beta1 ** s["t"]
            bc2 = 1 - self.beta2 ** s["t"]
            denom = np.sqrt(s["vhat"] / bc2) + self.eps
            p.data -= (lr / bc1) * s["m"] / denom


@dataclass
class TrainResult:
    model: ANet
    history: list
    checkpoints: dict


def _batch_arrays(samples):
    images = np.stack([s.image for s in samples])
    ids = np.array([s.identity for s in samples])
    attrs = np.array([[(-1 if a is None else a) for a in s.attributes] for s in samples],
                     dtype=np.int64).reshape(len(samples), -1)
    return images, ids, attrs


def train(model: ANet, dataset: Dataset, cfg: TrainConfig,
          policy: AugmentPolicy | None = None, out_dir: str | None = None,
          config_digest: str = "", log_every: int = 0) -> TrainResult:
    """Run the configured schedule over PK batches of the train split.

    Emits one history record per step (JSON-lines on disk when out_dir is
    given) and checkpoints at the stage boundary and at the end.
    """
    variant = model.cfg.variant
    cfg.validate(variant)
    policy = policy or AugmentPolicy(fill=tuple(dataset.mean_color().tolist()))
    ids_all = sorted({s.identity for s in dataset.samples})
    if len(ids_all) < 2:
        raise ValueError("training needs at least two identities")
    id_index = {identity: i for i, identity in enumerate(ids_all)}
    if model.cfg.id_count != len(ids_all):
        raise ValueError(f"model expects {model.cfg.id_count} identities, "
                         f"dataset has {len(ids_all)}")

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xDA7A]))
    steps = cfg.steps_per_epoch or max(1, math.ceil(len(dataset) / (cfg.batch_p * cfg.batch_k)))
    opt = Amsgrad()
    history = []
    checkpoints = {}
    log_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "loss_log.jsonl"), "w")
    try:
        prev_stage = 1
        for epoch in range(cfg.epochs_total):
            stage = stage_at(cfg, epoch, variant)
            if stage == 2 and prev_stage == 1:
                model.freeze_backbone()
                if out_dir:
                    path = os.path.join(out_dir, "stage1.ckpt")
                    save_checkpoint(path, model, optimizer=opt, epoch=epoch,
                                    rng_state=rng.bit_generator.state,
                                    config_digest=config_digest)
                    checkpoints["stage1"] = path
            prev_stage = stage
            lr = lr_at(cfg, epoch)
            mode = objective_for(variant, stage)
            for step in range(steps):
                batch = pk_sample(dataset, cfg.batch_p, cfg.batch_k, rng)
                samples = [augment(s, rng, policy) for s in batch.samples]
                images, raw_ids, attrs = _batch_arrays(samples)
                targets = np.array([id_index[i] for i in raw_ids])
                out = model.forward(images, train=True)
                total, report = compute_losses(out, targets, attrs, cfg.weights,
                                               mode, stage=stage,
                                               ac_pair_source=cfg.ac_pair_source)
                model.zero_grad()
                total.backward()
                opt.step(model.named_parameters(), lr)
                rec = {"epoch": epoch, "step": step, "stage": stage, "lr": lr,
                       **report.to_dict()}
                history.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                if log_every and (len(history) % log_every == 0):
                    print(f"epoch {epoch} step {step} stage {stage} "
                          f"total {report.total:.4f}")
        if out_dir:
            path = os.path.join(out_dir, "final.ckpt")
            save_checkpoint(path, model, optimizer=opt, epoch=cfg.epochs_total,
                            rng_state=rng.bit_generator.state,
                            config_digest=config_digest)
            checkpoints["final"] = path
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(model, history, checkpoints)
