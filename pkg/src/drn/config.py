"""Run configuration: nested dataclasses with strict JSON loading.

Every field has a default; unknown keys are errors. CLI overrides are applied
after the config file, so the precedence is defaults < file < flags.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field


class ConfigError(Exception):
    pass


@dataclass
class ModelConfig:
    channels: int = 64              # pyramid width c
    feature_dim: int = 64           # input segment-feature channels
    word_dim: int = 32
    lstm_hidden: int = 64           # per direction
    levels: int = 3
    segments: int = 32              # K
    location_embedding_dim: int = 256
    kernel_size: int = 3
    multi_level_fusion: bool = True
    mlf_same: bool = False
    location_embedding: bool = True
    quality_head: str = "iou"       # iou | centerness | none
    head_batchnorm: bool = False
    vocab_size: int = 0             # 0 = take from the dataset at build time

    def __post_init__(self):
        if self.quality_head not in ("iou", "centerness", "none"):
            raise ConfigError(f"quality_head must be iou|centerness|none, got {self.quality_head!r}")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.segments % (2 ** (self.levels - 1)) != 0:
            raise ConfigError(
                f"segments={self.segments} not divisible by 2^(levels-1)={2 ** (self.levels - 1)}"
            )

    def apply_paper_dims(self) -> None:
        self.word_dim = 300
        self.lstm_hidden = 512


@dataclass
class SynthConfig:
    num_train: int = 2000
    num_val: int = 500
    num_test: int = 500
    segments: int = 32
    feature_dim: int = 64
    num_event_words: int = 20
    events_min: int = 1
    events_max: int = 3
    event_len_min: int = 4
    event_len_max: int = 10
    noise_std: float = 0.25
    temporal_fraction: float = 0.3
    seconds_per_segment: float = 2.0

    def __post_init__(self):
        if not (1 <= self.events_min <= self.events_max):
            raise ConfigError("need 1 <= events_min <= events_max")
        if self.event_len_min < 1 or self.event_len_max < self.event_len_min:
            raise ConfigError("invalid event length range")
        if self.events_max * self.event_len_max > self.segments:
            raise ConfigError("events cannot fit: events_max * event_len_max exceeds segments")
        # the temporal construction pins A-occurrences to the first/last third
        if self.temporal_fraction > 0 and self.event_len_min > self.segments // 3:
            raise ConfigError("events cannot fit: temporal queries need event_len_min <= segments/3")


@dataclass
class TrainConfig:
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-5   # stage-1 rate decayed by a factor of 100
    lr_stage3: float = 1e-6
    batch_size: int = 32
    epochs_stage1: int = 12
    epochs_stage2: int = 6
    epochs_stage3: int = 3
    sampling: str = "All"     # All | Half | Random | Center
    grad_clip: float = 10.0   # 0 disables
    iou_positives_only: bool = False
    iou_loss_mean: bool = False
    loss_weight_loc: float = 1.0
    loss_weight_match: float = 1.0
    loss_weight_quality: float = 1.0

    def __post_init__(self):
        for lr in (self.lr_stage1, self.lr_stage2, self.lr_stage3):
            if lr <= 0:
                raise ConfigError("learning rates must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.sampling not in ("All", "Half", "Random", "Center"):
            raise ConfigError(f"sampling must be All|Half|Random|Center, got {self.sampling!r}")


@dataclass
class EvalConfig:
    top_ns: tuple = (1, 5)
    iou_thresholds: tuple = (0.3, 0.5, 0.7)
    nms_threshold: float = 0.5


@dataclass
class AblateConfig:
    # grid axes: cross product over shared seeds
    sampling: tuple = ("All", "Center")
    quality: tuple = ("iou", "none")
    fusion: tuple = ("full", "none")   # full | mlf | loc | none | mlf_same
    seeds: tuple = (0, 1, 2)
    # grid runs use the default task scale (the orderings only emerge near
    # convergence); the temporal-subset comparison uses a longer timeline so
    # conv receptive fields cannot reach across the queried pair
    num_train: int = 2000
    num_val: int = 0
    num_test: int = 500
    epochs_stage1: int = 12
    epochs_stage2: int = 6
    epochs_stage3: int = 3
    temporal_segments: int = 64
    temporal_num_train: int = 1000
    temporal_num_test: int = 400
    temporal_fraction: float = 0.4
    temporal_epochs: tuple = (10, 5, 2)


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)


_FUSION_MODES = ("full", "mlf", "loc", "none", "mlf_same")


def apply_fusion_mode(model: ModelConfig, mode: str) -> None:
    """Map an ablation fusion label onto the model flags."""
    if mode not in _FUSION_MODES:
        raise ConfigError(f"fusion mode must be one of {_FUSION_MODES}, got {mode!r}")
    model.multi_level_fusion = mode in ("full", "mlf", "mlf_same")
    model.mlf_same = mode == "mlf_same"
    model.location_embedding = mode in ("full", "loc", "mlf_same")


def _from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    hints = typing.get_type_hints(cls)
    valid = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in valid:
            raise ConfigError(f"unknown config key {where!r}")
        ftype = hints[key]
        if dataclasses.is_dataclass(ftype):
            kwargs[key] = _from_dict(ftype, value, where)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config section {path or '<root>'}: {exc}") from exc


def run_config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data, "")


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return run_config_from_dict(data)


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def model_digest(model: ModelConfig) -> bytes:
    """sha256 over the canonical model-config JSON; stored in checkpoints."""
    payload = json.dumps(dataclasses.asdict(model), sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).digest()
