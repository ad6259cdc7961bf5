"""Architecture and training configuration.

Both configs are flat dataclasses so they serialize to the same ``key = value``
text format the CLI reads with ``--config``.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

VARIANTS = ("baseline", "gcm", "tran_gcn")
TOKEN_MODES = ("rawp", "cnn", "keypoint")


@dataclass
class ArchConfig:
    image_size: tuple[int, int] = (64, 32)
    variant: str = "tran_gcn"
    tokens: str = "keypoint"
    num_classes: int = 8
    num_keypoints: int = 18
    # pose branch: five stride-2 stages, C_pe = pose_channels[-1]
    pose_channels: tuple[int, ...] = (8, 16, 32, 32, 64)
    pose_hidden: int = 64
    # conv branch: stem + four residual stages
    stem_channels: int = 16
    conv_channels: tuple[int, ...] = (16, 32, 48, 64)
    blocks_per_stage: int = 1
    stage4_stride: int = 1
    embed_dim: int = 64
    # transformer branch
    d_model: int = 64
    heads: int = 4
    depth: int = 2
    ffn_mult: int = 4
    patch_size: int = 16
    kp_window: int = 3
    kp_threshold: float = 0.1
    # graph module
    node_conf_dim: int = 1
    d_res: int = 32
    d_trans: int = 32
    gcn_dims: tuple[int, ...] = (64, 64)
    final_dim: int = 64
    aggregate: str = "mean"

    @property
    def num_limbs(self) -> int:
        from .pose import default_topology

        return len(default_topology(self.num_keypoints))

    def validate(self) -> "ArchConfig":
        if self.variant not in VARIANTS:
            raise ConfigError("variant", f"must be one of {{{','.join(VARIANTS)}}}, got {self.variant!r}")
        if self.tokens not in TOKEN_MODES:
            raise ConfigError("tokens", f"must be one of {{{','.join(TOKEN_MODES)}}}, got {self.tokens!r}")
        if self.aggregate not in ("mean", "max"):
            raise ConfigError("aggregate", f"must be 'mean' or 'max', got {self.aggregate!r}")
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "kp_threshold":
                continue
            items = value if isinstance(value, tuple) else (value,)
            for v in items:
                if isinstance(v, int) and not isinstance(v, bool) and v <= 0:
                    raise ConfigError(f.name, f"dimensions must be positive, got {value!r}")
        if len(self.image_size) != 2:
            raise ConfigError("image_size", "expected two dimensions")
        if any(s % 32 for s in self.image_size):
            raise ConfigError("image_size", f"each dimension must be a multiple of 32, got {self.image_size}")
        if len(self.pose_channels) != 5:
            raise ConfigError("pose_channels", "five downsampling stages are required")
        if len(self.conv_channels) != 4:
            raise ConfigError("conv_channels", "four residual stages are required")
        if self.stage4_stride not in (1, 2):
            raise ConfigError("stage4_stride", "must be 1 or 2")
        if self.d_model % self.heads:
            raise ConfigError("heads", f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.kp_window % 2 == 0:
            raise ConfigError("kp_window", f"window must be odd, got {self.kp_window}")
        if self.tokens == "rawp" and any(s % self.patch_size for s in self.image_size):
            raise ConfigError("patch_size", f"{self.patch_size} does not divide image size {self.image_size}")
        return self


@dataclass
class TrainConfig:
    pose_epochs: int = 60
    conv_epochs: int = 30
    trans_epochs: int = 30
    joint_epochs: int = 120
    pose_lr: float = 0.5
    conv_lr: float = 0.02
    trans_lr: float = 0.02
    joint_lr: float = 0.1
    batch_size: int = 64
    contrastive_margin: float = 1.0
    triplet_margin: float = 0.3
    contrastive_form: str = "literal"
    unfreeze: bool = False
    joint_loss: bool = False
    embedding: str = "final"
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self) -> "TrainConfig":
        for name in ("pose_epochs", "conv_epochs", "trans_epochs", "joint_epochs", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "epoch counts must be >= 0")
        for name in ("contrastive_margin", "triplet_margin"):
            if getattr(self, name) <= 0:
                raise ConfigError(name, "margins must be > 0")
        if self.batch_size <= 0:
            raise ConfigError("batch_size", "must be positive")
        if self.contrastive_form not in ("literal", "conventional"):
            raise ConfigError("contrastive_form", "must be 'literal' or 'conventional'")
        if self.embedding not in ("final", "combined"):
            raise ConfigError("embedding", "must be 'final' or 'combined'")
        return self


def _coerce(template: Any, raw: str, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(template, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(template, tuple):
            sep = "x" if key == "image_size" else ","
            return tuple(int(p) for p in raw.replace(" ", "").split(sep) if p)
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r}") from None
    return raw


def from_flat(cls, values: dict[str, Any]):
    """Build ``cls`` from a flat mapping, ignoring keys that belong elsewhere."""
    defaults = cls()
    kwargs = {}
    for f in fields(cls):
        if f.name in values and values[f.name] is not None:
            v = values[f.name]
            kwargs[f.name] = _coerce(getattr(defaults, f.name), v, f.name) if isinstance(v, str) else v
    return cls(**kwargs)


def to_flat(cfg) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def format_value(v: Any) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def config_hash(values: dict[str, Any]) -> str:
    text = "\n".join(f"{k}={format_value(values[k])}" for k in sorted(values))
    return hashlib.sha256(text.encode()).hexdigest()
