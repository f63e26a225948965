"""Run configuration: defaults, validation, flat-text serialization, digest.

The config file is plain INI-style text (sections are cosmetic; the key
namespace is flat).  CLI overrides are applied after file values, and
defaults fill everything else.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import math
import os
from dataclasses import dataclass, field
from typing import Mapping

from maskdistill.errors import ConfigError, ValidationError

ENV_CONFIG_VAR = "CMID_CONFIG"

MASK_STRATEGIES = ("mean_add", "zero_replace")
SCALE_MODES = ("area", "side")


@dataclass(frozen=True)
class LossWeights:
    """Per-branch weights for the total loss."""

    mim: float = 1.0
    glob: float = 1.0
    local: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    # geometry of the input
    image_size: int = 224
    patch_size: int = 32

    # masking
    mask_ratio: float = 0.6
    mask_strategy: str = "mean_add"

    # cropping
    scale_min: float = 0.5
    scale_max: float = 1.0
    scale_mode: str = "area"  # "side" interprets scale as a side-length fraction

    # local branch
    num_matched_pairs: int = 20
    num_prototypes: int = 2048
    proto_dim: int = 256
    tau_s: float = 0.2
    tau_t: float = 0.07
    bipartite_pairs: bool = False
    literal_local_loss: bool = False  # student rows as target (zero-gradient form)
    center_teacher: bool = False

    # global branch
    tau: float = 0.2
    queue_size: int = 65536
    global_dim: int = 128
    global_hidden: int = 2048
    local_hidden: int = 2048
    literal_nce_denominator: bool = False  # queue-only denominator

    # teacher momentum
    ema_base: float = 0.996

    # loss weights and branch toggles
    lambda_mim: float = 1.0
    lambda_global: float = 1.0
    lambda_local: float = 1.0
    branch_mim: bool = True
    branch_global: bool = True
    branch_local: bool = True

    # backbone
    backbone_channels: tuple[int, ...] = (64, 128, 256, 512)
    stem_stride: int = 4

    # augmentation
    photometric_strength: float = 1.0
    student_photometric: bool = False

    # optimization
    epochs: int = 100
    batch_size: int = 64
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    lr_floor: float = 1e-6
    grad_clip: float = 0.0

    # run control
    seed: int = 0
    deterministic: bool = True
    strict_queue: bool = False
    log_every: int = 1
    checkpoint_every: int = 0  # steps; 0 = final checkpoint only

    @property
    def total_stride(self) -> int:
        return self.stem_stride * 2 ** (len(self.backbone_channels) - 1)

    @property
    def grid_size(self) -> int:
        """Patch-grid side length."""
        return self.image_size // self.patch_size

    @property
    def feature_grid(self) -> int:
        """Final feature-map side length."""
        return self.image_size // self.total_stride

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_mim, self.lambda_global, self.lambda_local)

    def validate(self) -> "RunConfig":
        def err(fieldname, msg):
            raise ValidationError(fieldname, msg)

        if self.image_size <= 0:
            err("image_size", "must be positive")
        if self.patch_size <= 0:
            err("patch_size", "must be positive")
        if self.image_size % self.patch_size != 0:
            err("patch_size", f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not (0.0 < self.mask_ratio < 1.0):
            err("mask_ratio", "must lie in (0, 1)")
        if self.mask_strategy not in MASK_STRATEGIES:
            err("mask_strategy", f"must be one of {MASK_STRATEGIES}")
        if not (0.0 < self.scale_min <= self.scale_max <= 1.0):
            err("scale_min", "need 0 < scale_min <= scale_max <= 1")
        if self.scale_mode not in SCALE_MODES:
            err("scale_mode", f"must be one of {SCALE_MODES}")
        if self.num_matched_pairs <= 0:
            err("num_matched_pairs", "must be positive")
        if self.num_prototypes <= 0:
            err("num_prototypes", "must be positive")
        if self.proto_dim <= 0:
            err("proto_dim", "must be positive")
        for name in ("tau", "tau_s", "tau_t"):
            if getattr(self, name) <= 0:
                err(name, "temperature must be > 0")
        if self.queue_size <= 0:
            err("queue_size", "must be positive")
        if self.strict_queue and self.queue_size % self.batch_size != 0:
            err("queue_size", f"{self.queue_size} is not a multiple of batch_size {self.batch_size} (strict mode)")
        if not (0.0 < self.ema_base < 1.0):
            err("ema_base", "must lie in (0, 1)")
        for name in ("lambda_mim", "lambda_global", "lambda_local"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                err(name, "must be finite and nonnegative")
        if not self.backbone_channels:
            err("backbone_channels", "need at least one stage")
        if self.stem_stride <= 0:
            err("stem_stride", "must be positive")
        if self.image_size % self.total_stride != 0:
            err("backbone_channels", f"image_size {self.image_size} not divisible by total stride {self.total_stride}")
        if self.patch_size % self.stem_stride != 0:
            err("patch_size", f"must be divisible by stem_stride {self.stem_stride} for mask-token injection")
        if self.epochs < 0 or self.batch_size <= 0:
            err("batch_size", "epochs must be >= 0 and batch_size >= 1")
        if self.base_lr < 0 or self.weight_decay < 0 or self.warmup_epochs < 0:
            err("base_lr", "training scalars must be nonnegative")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(name: str, raw, lineno=None):
    f = _FIELDS[name]
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if f.type in ("bool", bool) or isinstance(f.default, bool):
            if isinstance(raw, bool):
                return raw
            low = str(raw).lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(f.default, tuple):
            if isinstance(raw, (tuple, list)):
                return tuple(int(v) for v in raw)
            parts = [p for p in str(raw).replace(",", " ").split() if p]
            return tuple(int(p) for p in parts)
        if isinstance(f.default, int):
            return int(str(raw), 0) if isinstance(raw, str) else int(raw)
        if isinstance(f.default, float):
            return float(raw)
        return str(raw)
    except (TypeError, ValueError) as e:
        where = f" (line {lineno})" if lineno else ""
        raise ValidationError(name, f"cannot parse value {raw!r}{where}: {e}") from None


def _coerce(values: Mapping[str, object]) -> dict:
    out = {}
    for key, raw in values.items():
        name = key.replace("-", "_")
        if name not in _FIELDS:
            raise ValidationError(name, "unknown configuration key")
        out[name] = _parse_value(name, raw)
    return out


def load_config(path: str | os.PathLike | None = None,
                overrides: Mapping[str, object] | None = None) -> RunConfig:
    """Build a validated RunConfig from an optional file plus overrides.

    Falls back to the path in $CMID_CONFIG when ``path`` is None; with
    neither, defaults only.  Overrides win over file values.
    """
    if path is None:
        path = os.environ.get(ENV_CONFIG_VAR) or None

    file_values: dict[str, str] = {}
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from None
        # configparser requires a section header; tolerate bare key=value files
        if text.strip() and not text.lstrip().startswith("["):
            text = "[run]\n" + text
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as e:
            raise ConfigError(f"parse failure in {path}: {e}") from None
        for section in parser.sections():
            for key, value in parser.items(section):
                file_values[key] = value

    merged = _coerce(file_values)
    if overrides:
        merged.update(_coerce(overrides))
    return RunConfig(**merged).validate()


def serialize_config(cfg: RunConfig) -> str:
    """Canonical flat-text form; stable field order, one key per line."""
    buf = io.StringIO()
    buf.write("[run]\n")
    for f in dataclasses.fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = " ".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        buf.write(f"{f.name} = {v}\n")
    return buf.getvalue()


def save_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))


def config_digest(cfg: RunConfig) -> str:
    """Content hash over the canonical serialization."""
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()
