"""Run configuration: dataclasses plus the flat key=value file format.

A config file holds one ``key = value`` pair per line with ``#`` comments.
Keys are the union of the field names below; CLI flags override file values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .autodiff import ConfigError


@dataclass
class SynthConfig:
    """Synthetic scene generator settings."""

    scene_count: int = 20
    boxes_min: int = 1
    boxes_max: int = 3
    points_per_box_min: int = 100
    points_per_box_max: int = 150
    box_extent_min: float = 0.4
    box_extent_max: float = 1.0
    background_points: int = 100
    category_count: int = 4
    superpoints_per_box: int = 4
    seed: int = 0
    room_x: float = 4.0
    room_y: float = 4.0
    room_z: float = 2.4
    background_cell: float = 1.0  # background superpoint grid pitch (m)

    def validate(self):
        if self.scene_count < 1:
            raise ConfigError("scene_count must be >= 1")
        if not (1 <= self.boxes_min <= self.boxes_max):
            raise ConfigError("need 1 <= boxes_min <= boxes_max")
        if not (1 <= self.points_per_box_min <= self.points_per_box_max):
            raise ConfigError("need 1 <= points_per_box_min <= points_per_box_max")
        if not (0.0 < self.box_extent_min <= self.box_extent_max):
            raise ConfigError("need 0 < box_extent_min <= box_extent_max")
        if self.background_points < 0:
            raise ConfigError("background_points must be >= 0")
        if self.category_count < self.boxes_max:
            raise ConfigError("category_count must cover boxes_max distinct categories")
        if self.superpoints_per_box < 1:
            raise ConfigError("superpoints_per_box must be >= 1")
        if self.points_per_box_min < self.superpoints_per_box:
            raise ConfigError("points_per_box_min must be >= superpoints_per_box")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if min(self.room_x, self.room_y, self.room_z) <= 0 or self.background_cell <= 0:
            raise ConfigError("room extents and background_cell must be positive")
        if self.box_extent_max >= min(self.room_x, self.room_y, self.room_z):
            raise ConfigError("box_extent_max must fit inside the room")
        return self


@dataclass
class DecoderConfig:
    """Decoder topology. Desk-scale defaults; a full-scale run would use
    queries=400, width=256 with the same code paths."""

    queries: int = 8          # K
    width: int = 32           # C
    heads: int = 8            # H
    layers: int = 6           # L
    refine_every: int = 3     # r: superpoint refinement every r-th layer
    sincos_d: int = 16        # sinusoidal lift width per scalar
    mask_threshold: float = 0.5
    category_count: int = 4
    use_adaptive_pool: bool = True
    use_refinement: bool = True
    use_contrastive: bool = True
    use_relation_bias: bool = True
    supervise_initial: bool = True  # include the layer-0 prediction in the loss

    def validate(self):
        if self.queries < 1:
            raise ConfigError("queries must be >= 1")
        if self.width < 1 or self.heads < 1 or self.width % self.heads != 0:
            raise ConfigError("width must be a positive multiple of heads")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        # refine_every may exceed layers: that simply disables refinement
        if self.refine_every < 1:
            raise ConfigError("refine_every must be >= 1")
        if self.sincos_d < 2 or self.sincos_d % 2 != 0:
            raise ConfigError("sincos_d must be even and >= 2")
        if not (0.0 < self.mask_threshold < 1.0):
            raise ConfigError("mask_threshold must lie in (0, 1)")
        if self.category_count < 1:
            raise ConfigError("category_count must be >= 1")
        return self

    @property
    def refine_stages(self):
        return self.layers // self.refine_every


@dataclass
class TrainConfig:
    """Optimization settings (poly-decayed AdamW over single-scene steps)."""

    epochs: int = 300
    base_lr: float = 2e-4
    poly_power: float = 0.9
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 1.0
    lambda_ce: float = 0.5
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    lambda_center: float = 0.5
    lambda_score: float = 0.5
    lambda_cont: float = 1.0
    voxel_size: float = 0.02
    shuffle: bool = True
    seed: int = 0
    nms_iou: float = 0.75
    confidence_floor: float = 0.05

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.poly_power <= 0:
            raise ConfigError("poly_power must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.grad_clip <= 0:
            raise ConfigError("weight_decay must be >= 0 and grad_clip > 0")
        for name in ("ce", "bce", "dice", "center", "score", "cont"):
            if getattr(self, f"lambda_{name}") < 0:
                raise ConfigError(f"lambda_{name} must be >= 0")
        if self.voxel_size < 0:
            raise ConfigError("voxel_size must be >= 0 (0 disables voxelization)")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if not (0.0 < self.nms_iou <= 1.0):
            raise ConfigError("nms_iou must lie in (0, 1]")
        if not (0.0 <= self.confidence_floor < 1.0):
            raise ConfigError("confidence_floor must lie in [0, 1)")
        return self

    @property
    def lambdas(self):
        return (
            self.lambda_ce,
            self.lambda_bce,
            self.lambda_dice,
            self.lambda_center,
            self.lambda_score,
            self.lambda_cont,
        )


# -- flat key=value parsing --------------------------------------------------


def parse_config_text(text):
    """Parse ``key = value`` lines into a string map; '#' starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if not key or not val:
            raise ConfigError(f"config line {lineno}: empty key or value")
        values[key] = val
    return values


def load_config_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def _coerce(raw, typ, key):
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}") from exc


def build_configs(values):
    """Split a flat key=value map into (SynthConfig, DecoderConfig, TrainConfig).

    A key may feed several configs when they share a field name (for example
    ``category_count`` and ``seed``). Unknown keys are rejected.
    """
    classes = (SynthConfig, DecoderConfig, TrainConfig)
    fields = {cls: {f.name: f.type for f in dataclasses.fields(cls)} for cls in classes}
    known = set().union(*(fm.keys() for fm in fields.values()))
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    built = []
    for cls in classes:
        kwargs = {}
        for name in fields[cls]:
            if name in values:
                typ = {f.name: f.type for f in dataclasses.fields(cls)}[name]
                pytype = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, typ)
                kwargs[name] = _coerce(values[name], pytype, name)
        built.append(cls(**kwargs).validate())
    return tuple(built)
