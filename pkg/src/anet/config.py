"""Run configuration: flat ``section.key = value`` text, merged with CLI
overrides, fully resolved before anything runs, and serialized verbatim
into every output directory. The sha256 of the canonical serialization is
the digest stamped into checkpoints.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

from .data import AugmentPolicy
from .losses import LossWeights
from .model import ModelConfig
from .trainer import TrainConfig


@dataclass
class DataSpec:
    id_count: int = 80
    train_id_count: int = 64
    images_per_id: int = 8
    image_size: int = 64
    color_classes: int = 6
    type_classes: int = 4
    camera_count: int = 4
    seed: int = 0


@dataclass
class EvalSpec:
    selector: str = "auto"     # auto: j for fusion variants, f otherwise
    protocol: str = "fixed"    # fixed | vehicleid
    repeats: int = 10
    seed: int = 0
    cross_camera_filter: bool = True


SECTIONS = (("data", DataSpec), ("model", ModelConfig), ("train", TrainConfig),
            ("loss", LossWeights), ("aug", AugmentPolicy), ("eval", EvalSpec))
# fields resolved from the dataset or composed from other sections
_SKIP = {("train", "weights"), ("aug", "fill")}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    aug: AugmentPolicy = field(default_factory=AugmentPolicy)
    eval: EvalSpec = field(default_factory=EvalSpec)

    def section(self, name):
        for sec, _ in SECTIONS:
            if sec == name:
                return getattr(self, sec)
        raise ConfigError(f"unknown config section {name!r}")

    def set_key(self, dotted: str, raw: str):
        try:
            sec_name, fname = dotted.split(".", 1)
        except ValueError:
            raise ConfigError(f"config key {dotted!r} is not of the form section.field") from None
        sec = self.section(sec_name)
        valid = {f.name for f in dataclasses.fields(sec)}
        if (sec_name, fname) in _SKIP or fname not in valid:
            raise ConfigError(f"unknown config key {dotted!r}")
        setattr(sec, fname, _parse_value(raw, getattr(sec, fname), dotted))

    def to_text(self, sections=None) -> str:
        lines = []
        for sec_name, _ in SECTIONS:
            if sections is not None and sec_name not in sections:
                continue
            sec = self.section(sec_name)
            for f in dataclasses.fields(sec):
                if (sec_name, f.name) in _SKIP:
                    continue
                lines.append(f"{sec_name}.{f.name} = {_format_value(getattr(sec, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        """Digest of the sections that define the trained artifact; the
        eval section is intentionally outside it (eval-time knobs must not
        invalidate a checkpoint)."""
        text = self.to_text(sections=("data", "model", "train", "loss", "aug"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def train_config(self) -> TrainConfig:
        tc = dataclasses.replace(self.train)
        tc.weights = self.loss
        return tc

    def resolved_selector(self) -> str:
        if self.eval.selector != "auto":
            return self.eval.selector
        return "j" if self.model.variant in ("anet", "anet_no_ac", "anet_att") else "f"

    def resolve_from_dataset(self, attr_classes, id_count):
        self.model.attr_classes = tuple(attr_classes)
        self.model.id_count = int(id_count)


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if raw.lower() == "none":
            return None
        if default is None:
            return int(raw)  # the only nullable fields are optional ints
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            out = []
            for item in items:
                try:
                    out.append(int(item))
                except ValueError:
                    out.append(float(item))
            return tuple(out)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        cfg.set_key(key.strip(), raw)
    return cfg


def load_config(path: str | None, overrides=()) -> RunConfig:
    """defaults <- config file <- --set overrides, in that order."""
    cfg = RunConfig()
    if path:
        with open(path, encoding="utf-8") as fh:
            parse_config_text(fh.read(), cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        cfg.set_key(key.strip(), raw)
    return cfg


def write_resolved(cfg: RunConfig, out_dir: str):
    import os
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.resolved.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    return path
