"""Run configuration: nested dataclasses loaded from / echoed to YAML."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError


@dataclass
class SyntheticConfig:
    pairs: int = 50
    held_out: int = 20
    n_points: int = 4096
    structure: str = "boxes"
    jitter: float = 0.01
    overlap: float = 0.9


@dataclass
class DataConfig:
    kind: str = "synthetic"          # synthetic | kitti
    sequence_dir: str | None = None  # directory holding *.bin scans
    poses: str | None = None         # KITTI pose text file
    calibration: str | None = None   # optional Tr (velodyne->camera) file
    train_stride: int = 10
    test_window: int = 5
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass
class PreprocessConfig:
    voxel_size: float = 0.1
    k_normal: int = 16
    n_points: int = 16384


@dataclass
class ModelConfig:
    n_candidates: int = 512
    K: int = 128
    alpha_d: int = 2
    dilation: str = "random"              # random | dpc
    attention_head: str = "channel_max"   # channel_max | linear
    detector_widths: list[int] = field(default_factory=lambda: [64, 64, 64])
    saliency_widths: list[int] = field(default_factory=lambda: [64, 1])
    descriptor_widths1: list[int] = field(default_factory=lambda: [64, 64])
    descriptor_widths2: list[int] = field(default_factory=lambda: [128, 128])
    use_attentive_map: bool = True
    normalize_descriptors: bool = False
    in_channels: int = 4


@dataclass
class LossConfig:
    temperature: float = 0.1
    sigma_max: float = 1.0
    lambda_p2p: float = 1.0
    use_weights: bool = True
    stage2_keep_detector_loss: bool = False


@dataclass
class TrainConfig:
    stage1_epochs: int = 20
    stage2_epochs: int = 20
    batch_size: int = 1
    lr: float = 1e-3
    momentum: float = 0.9
    checkpoint_every: int = 5
    freeze_detector: bool = False
    grad_clip: float | None = None   # global L2 norm cap per step; None disables


@dataclass
class RansacConfig:
    confidence: float = 0.99
    max_iterations: int = 10000
    inlier_threshold: float = 1.0
    sample_size: int = 3
    seed: int = 0
    mutual: bool = False

    def __post_init__(self):
        if not 0 < self.confidence < 1:
            raise ConfigError("ransac confidence must lie in (0, 1)")
        if self.sample_size < 3:
            raise ConfigError("ransac sample_size must be >= 3")
        if self.max_iterations < 1 or self.inlier_threshold <= 0:
            raise ConfigError("ransac max_iterations and inlier_threshold must be positive")


@dataclass
class EvalConfig:
    eps_r: float = 0.5
    eps_p: float = 1.0
    rte_max: float = 2.0
    rre_max: float = 5.0
    keypoint_counts: list[int] = field(default_factory=lambda: [128, 256, 512])
    ransac: RansacConfig = field(default_factory=RansacConfig)

    def __post_init__(self):
        if min(self.eps_r, self.eps_p, self.rte_max, self.rre_max) <= 0:
            raise ConfigError("evaluation thresholds must be positive")


@dataclass
class RunConfig:
    name: str = "default"
    seed: int = 0
    precision: str = "float32"   # float32 | float64
    threads: int = 1
    deterministic: bool = True
    output_root: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def dtype(self):
        import numpy as np
        return np.float64 if self.precision == "float64" else np.float32

    @property
    def run_dir(self) -> Path:
        return Path(self.output_root) / self.name

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if dataclasses.is_dataclass(cls) else None
        key = f"{where}.{name}".strip(".")
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key)
        else:
            kwargs[name] = _check_type(default, value, key)
    return cls(**kwargs)


def _check_type(default, value, key: str):
    """Accept ``value`` if it has the kind of the field's default (ints widen to float)."""
    if default is None:
        ok = value is None or isinstance(value, (int, float, str)) and not isinstance(value, bool)
    elif isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


def from_dict(data: dict | None) -> RunConfig:
    cfg = _build(RunConfig, data or {}, "")
    validate(cfg)
    return cfg


def _parse_scalar(text: str) -> Any:
    return yaml.safe_load(text)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides (values parsed as YAML scalars)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = _parse_scalar(value)
    return data


def load(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(apply_overrides(data, overrides or []))


def validate(cfg: RunConfig) -> None:
    m, ls = cfg.model, cfg.loss
    if cfg.precision not in ("float32", "float64"):
        raise ConfigError("precision must be float32 or float64")
    if m.dilation not in ("random", "dpc"):
        raise ConfigError("model.dilation must be 'random' or 'dpc'")
    if m.attention_head not in ("channel_max", "linear"):
        raise ConfigError("model.attention_head must be 'channel_max' or 'linear'")
    if m.K < 1 or m.alpha_d < 1 or m.n_candidates < 1:
        raise ConfigError("model.K, model.alpha_d and model.n_candidates must be >= 1")
    if ls.temperature <= 0 or ls.sigma_max <= 0:
        raise ConfigError("loss.temperature and loss.sigma_max must be positive")
    if cfg.train.lr <= 0 or cfg.train.stage1_epochs < 0 or cfg.train.stage2_epochs < 0:
        raise ConfigError("train.lr must be positive and epochs non-negative")
    if cfg.train.grad_clip is not None and cfg.train.grad_clip <= 0:
        raise ConfigError("train.grad_clip must be positive or null")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    if cfg.data.kind not in ("synthetic", "kitti"):
        raise ConfigError("data.kind must be 'synthetic' or 'kitti'")
