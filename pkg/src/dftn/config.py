"""Run configuration: one flat dataclass, named presets, strict key checking.

Every field has a single meaning across the code base:

  seed                 master seed; all randomness derives from it
  num_classes          label vocabulary size
  clip_len             frames per clip (T)
  frame_size           stored frame resolution before cropping
  crop_size            square crop fed to the classifier
  augment              random crop window and horizontal flip at train time
                       (evaluation always center-crops and never flips)
  dfn_width            base channel width of the flow network encoder
  classifier_width     base channel width of each classifier branch
  hidden_size          GRU hidden units; null means twice the per-frame
                       feature width
  lr                   starting learning rate for classifier training
  lr_dfn               starting learning rate for flow-network training
  batch_clips          clips per classifier optimization step
  batch_pairs          frame pairs per flow-network optimization step
  epochs_dfn           self-supervised flow training epochs
  epochs_branch        single-branch classifier training epochs
  epochs_joint         two-stream mutual-distillation epochs
  epochs_finetune      flow-encoder refinement epochs under the label loss
  lr_finetune          learning rate for that refinement
  temperature          softening temperature for distillation targets
  lambda_init          initial weight of the distillation term
  patience             evaluations without improvement before stagnation
  min_delta            improvement below this counts as no improvement
  distill_mode         none | bikd | g2d | d2g
  eval_every           optimization epochs between evaluations
"""

import dataclasses
import hashlib
import json

from .errors import ConfigError


@dataclasses.dataclass
class Config:
    preset: str = "desk"
    seed: int = 0
    num_classes: int = 10
    clip_len: int = 29
    frame_size: int = 96
    crop_size: int = 88
    augment: bool = True
    dfn_width: int = 8
    classifier_width: int = 8
    hidden_size: int | None = None
    lr: float = 1e-3
    lr_dfn: float = 1e-3
    batch_clips: int = 16
    batch_pairs: int = 32
    epochs_dfn: int = 10
    epochs_branch: int = 10
    epochs_joint: int = 10
    epochs_finetune: int = 2
    lr_finetune: float = 1e-4
    temperature: float = 20.0
    lambda_init: float = 100.0
    patience: int = 3
    min_delta: float = 1e-4
    distill_mode: str = "bikd"
    eval_every: int = 1

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.lambda_init < 0:
            raise ConfigError(f"lambda_init must be non-negative, got {self.lambda_init}")
        if self.patience < 1:
            raise ConfigError(f"patience must be at least 1, got {self.patience}")
        if self.crop_size > self.frame_size:
            raise ConfigError(
                f"crop_size {self.crop_size} exceeds frame_size {self.frame_size}"
            )
        if self.distill_mode not in ("none", "bikd", "g2d", "d2g"):
            raise ConfigError(f"unknown distill_mode {self.distill_mode!r}")
        for name in ("lr", "lr_dfn", "lr_finetune", "min_delta"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")

    def to_dict(self):
        return dataclasses.asdict(self)

    def content_hash(self):
        """Stable digest of the full configuration, for provenance stamps."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


# Named starting points.  The two full-scale presets mirror the published
# training recipes for the 500-word and 1000-word benchmarks; the desk
# presets shrink widths and epochs to what a CPU test run can afford.
PRESETS = {
    "paper_lrw": dict(
        preset="paper_lrw",
        num_classes=500,
        classifier_width=64,
        dfn_width=32,
        lr=1e-4,
        lr_dfn=1e-4,
        batch_clips=32,
        epochs_dfn=40,
        epochs_branch=40,
        epochs_joint=40,
    ),
    "paper_lrw1000": dict(
        preset="paper_lrw1000",
        num_classes=1000,
        classifier_width=64,
        dfn_width=32,
        lr=1e-3,
        lr_dfn=1e-3,
        batch_clips=32,
        epochs_dfn=40,
        epochs_branch=40,
        epochs_joint=40,
        augment=False,
    ),
    "desk": dict(preset="desk"),
    "desk_small": dict(
        preset="desk_small",
        num_classes=4,
        clip_len=12,
        frame_size=48,
        crop_size=44,
        dfn_width=4,
        classifier_width=4,
        epochs_dfn=4,
        epochs_branch=4,
        epochs_joint=4,
        batch_clips=8,
    ),
}


def make_config(preset="desk", **overrides):
    """Build a Config from a preset plus explicit overrides.

    Unknown keys are rejected rather than ignored, so typos fail loudly.
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
    values = dict(PRESETS[preset])
    known = {f.name for f in dataclasses.fields(Config)}
    for key in overrides:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
    values.update(overrides)
    return Config(**values)


def config_from_dict(data):
    """Rebuild a Config from a stored to_dict() mapping, strictly."""
    known = {f.name for f in dataclasses.fields(Config)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return Config(**data)


def _coerce(name, text):
    """Parse one config value from text using the field's declared type."""
    text = text.strip()
    types = {f.name: f.type for f in dataclasses.fields(Config)}
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    target = types[name]
    if text.lower() in ("none", "null"):
        return None
    if target is bool or target == "bool":
        if text.lower() in ("true", "yes", "1"):
            return True
        if text.lower() in ("false", "no", "0"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    if target is int or target == "int":
        return int(text)
    if target is float or target == "float":
        return float(text)
    if target in (str, "str"):
        return text
    # Optional ints et al.: try int, then float, else keep the string.
    try:
        return int(text)
    except ValueError:
        try:
            return float(text)
        except ValueError:
            return text


def parse_config_file(path):
    """Read a flat `key = value` file into an overrides dict.

    Blank lines and `#` comments are ignored.  Unknown keys and
    malformed lines are rejected.
    """
    known = {f.name for f in dataclasses.fields(Config)}
    overrides = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {raw!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            overrides[key] = _coerce(key, value)
    return overrides
