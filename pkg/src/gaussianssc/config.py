"""Flat key=value run configuration with documented defaults.

Configs are UTF-8 text, one `key = value` per line, `#` comments.
Unknown keys are rejected by name; every accepted config fully
determines a run.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .tensor import ConfigError
from .geometry import VoxelGridSpec
from .synth import default_camera


@dataclass
class RunConfig:
    # grid
    grid_dims: tuple = (64, 64, 8)        # voxel counts (X, Y, Z)
    grid_origin: tuple = (0.0, 0.0, 0.0)  # ROI min corner, meters
    grid_resolution: float = 0.2          # meters per voxel

    # camera / synthetic imaging
    image_width: int = 320
    image_height: int = 240
    focal: float = 220.0                  # fx = fy, pixels

    # channel widths
    d: int = 32                           # triplane / descriptor width
    d_token: int = 32                     # stage-2 token width
    d_embed: int = 8                      # axis positional embedding width
    d_code: int = 16                      # fused plane-code width
    feat_channels: int = 8                # synthetic image feature channels

    # Gaussian parameters
    window_radius: int = 2                # stage-1 anchor window (5x5)
    sigma_lo: float = 0.3                 # scale clamp band, texels/cells
    sigma_hi: float = 4.0
    sigma0: float = 1.0                   # regularizer reference scale
    beta: float = 0.5                     # stage-2 local/global blend
    k_points: int = 4                     # deformable sampling points

    # losses
    occ_alpha: float = 0.54               # w1 = alpha, w0 = 1 - alpha
    lambda_sigma: float = 1e-3
    lambda_delta: float = 1e-4
    lambda_ce: float = 1.0
    lambda_sem: float = 1.0
    neg_ratio: float = 2.0
    neg_floor: int = 256                  # negatives when a batch has no positives
    negative_sampling: bool = True

    # optimizer
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    # training
    steps: int = 2000
    eval_interval: int = 25
    early_stop_metric: float = 0.0        # stop when held-out target reached (0 = off)
    seed: int = 0
    threads: int = 1                      # 1 = reference mode; reductions stay ordered
    stage: int = 1
    use_gt_occupancy: bool = True         # stage 2: gate with ground truth occupancy
    anchor_mode: str = "gaussian"         # or "point" (single-pixel baseline)

    # scene suite
    num_classes: int = 4
    num_train_scenes: int = 8
    num_eval_scenes: int = 2
    boxes_per_scene: int = 3
    pillars_per_scene: int = 2
    noise_sigma: float = 0.01
    query_dropout: float = 0.1
    query_jitter: float = 0.0

    out_dir: str = "runs/default"

    def grid(self) -> VoxelGridSpec:
        return VoxelGridSpec(origin=tuple(self.grid_origin),
                             dims=tuple(int(v) for v in self.grid_dims),
                             resolution=self.grid_resolution)

    def camera(self):
        return default_camera(self.grid(), width=self.image_width,
                              height=self.image_height, focal=self.focal)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p for p in raw.replace(",", " ").split() if p]
            conv = float if any(isinstance(v, float) for v in default) else int
            return tuple(conv(p) for p in parts)
        return raw
    except ValueError as e:
        raise ConfigError(f"config key {key!r}: cannot parse value {raw!r}") from e


def parse_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
                key, raw = line.split("=", 1)
                key = key.strip()
                if key not in _FIELDS:
                    raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
                setattr(cfg, key, _parse_value(key, raw, getattr(RunConfig, key)))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, value)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if not (0.0 <= cfg.beta <= 1.0):
        raise ConfigError(f"beta must be in [0,1], got {cfg.beta}")
    if not (0.0 < cfg.sigma_lo < cfg.sigma_hi):
        raise ConfigError(f"need 0 < sigma_lo < sigma_hi, got {cfg.sigma_lo}, {cfg.sigma_hi}")
    if cfg.stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {cfg.stage}")
    if cfg.threads < 1:
        raise ConfigError(f"threads must be >= 1, got {cfg.threads}")
    if not (0.0 < cfg.occ_alpha < 1.0):
        raise ConfigError(f"occ_alpha must be in (0,1), got {cfg.occ_alpha}")
    if cfg.window_radius < 1:
        raise ConfigError(f"window_radius must be >= 1, got {cfg.window_radius}")


def dump_defaults() -> str:
    """Documented defaults in config-file syntax (used by README/--help)."""
    lines = []
    for f in fields(RunConfig):
        v = getattr(RunConfig, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
