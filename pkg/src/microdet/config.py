"""Flat INI run configuration with full defaults and strict key checking.

Every knob lives in one of five sections; a missing file or empty section
falls back to defaults, and any unknown section or key is rejected by
name.  The MICRODET_SEED environment variable overrides [train] seed.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace

from microdet.model import ModelConfig
from microdet.synth import SynthConfig


class ConfigError(ValueError):
    """Unknown key/section or unparseable value."""


@dataclass(frozen=True)
class OptimizerConfig:
    eta_muon: float = 0.02
    eta_sgd: float = 0.1
    momentum: float = 0.9
    ns_steps: int = 5
    ns_coeff_a: float = 3.4445
    ns_coeff_b: float = -4.7750
    ns_coeff_c: float = 2.0315
    muon_enabled: bool = True
    backbone_only: bool = False
    lr_final_frac: float = 0.05


@dataclass(frozen=True)
class LossSettings:
    lambda_kd: float = 0.5
    temperature: float = 3.0
    small_target_alpha: float = 1.0
    small_target_area: float = 400.0
    small_target_boost: bool = True
    wiou_alpha: float = 1.9
    wiou_delta: float = 3.0
    wiou_momentum: float = 0.99
    dfl_weight: float = 0.5
    cls_pos_weight: float = 1.0
    box_weight_initial: float = 1.0
    box_weight_final: float = 2.0
    cls_weight_initial: float = 1.0
    cls_weight_final: float = 0.5
    assign_topk: int = 10
    assign_alpha: float = 0.5
    assign_beta: float = 6.0
    center_radius: float = 2.5


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 96
    count: int = 200
    split: tuple[float, ...] = (0.7, 0.2, 0.1)
    min_targets: int = 1
    max_targets: int = 3
    size_min: float = 4.0
    size_max: float = 24.0
    small_bias: float = 0.7
    small_cutoff: float = 18.0
    max_birds: int = 3
    max_clouds: int = 4
    max_edges: int = 2
    condition_weights: tuple[float, ...] = (0.4, 0.2, 0.2, 0.2)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            image_size=self.image_size, min_targets=self.min_targets,
            max_targets=self.max_targets, size_min=self.size_min,
            size_max=self.size_max, small_bias=self.small_bias,
            small_cutoff=self.small_cutoff, max_birds=self.max_birds,
            max_clouds=self.max_clouds, max_edges=self.max_edges,
            condition_weights=tuple(self.condition_weights))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    val_every: int = 0          # 0: evaluate on the val split only at the end
    conf_thresh: float = 0.25
    iou_thresh: float = 0.5     # NMS threshold for the suppression decode
    decode: str = "o2o"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss: LossSettings = field(default_factory=LossSettings)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


_SECTIONS = {
    "model": ModelConfig,
    "optimizer": OptimizerConfig,
    "loss": LossSettings,
    "data": DataConfig,
    "train": TrainConfig,
}


def _parse_value(name: str, raw: str, annotation, section: str):
    raw = raw.strip()
    try:
        if annotation is bool:
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        if annotation is str:
            return raw
        # tuple-valued fields: comma separated
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if name == "levels":
            return tuple(parts)
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {name} = {raw!r}: {exc}") from None


def _build_section(cls, section: str, items: dict[str, str]):
    known = {f.name: f.type for f in fields(cls)}
    values = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        ann = known[key]
        if isinstance(ann, str):
            ann = {"int": int, "float": float, "bool": bool, "str": str}.get(
                ann.split("[")[0].strip(), tuple)
        values[key] = _parse_value(key, raw, ann, section)
    try:
        return cls(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None) -> RunConfig:
    """Parse a config file (or return all defaults for ``None``)."""
    sections: dict[str, dict[str, str]] = {}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            sections[section] = dict(parser.items(section))
    cfg = RunConfig(**{name: _build_section(cls, name, sections.get(name, {}))
                       for name, cls in _SECTIONS.items()})
    env_seed = os.environ.get("MICRODET_SEED")
    if env_seed is not None:
        try:
            cfg.train = replace(cfg.train, seed=int(env_seed))
        except ValueError:
            raise ConfigError(f"MICRODET_SEED={env_seed!r} is not an integer") from None
    return cfg


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name in _SECTIONS:
        obj = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(obj):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def write_model_sidecar(model_cfg: ModelConfig, path) -> None:
    """Persist the [model] section next to a checkpoint."""
    lines = ["[model]"]
    for f in fields(ModelConfig):
        lines.append(f"{f.name} = {_format_value(getattr(model_cfg, f.name))}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_model_sidecar(path) -> ModelConfig:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"model sidecar not found: {path}")
    if parser.sections() != ["model"]:
        raise ConfigError(f"{path}: expected a single [model] section")
    return _build_section(ModelConfig, "model", dict(parser.items("model")))
