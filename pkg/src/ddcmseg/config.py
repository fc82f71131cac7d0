"""Experiment configuration: plain-text INI sections with strict keys.

Defaults reproduce the reference training recipe (patch 256, 5000 patches
per epoch, batch 5, Adam+AMSGrad at 8.5e-5/sqrt(2) with 2x bias LR, poly and
0.85-per-15-epochs decay, 448/100 TTA windows).  Unknown sections or keys are
hard errors so typos cannot silently fall back to defaults; every key that a
file sets explicitly is echoed as an override into the run manifest.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .ddcm import DdcmConfig
from .errors import ConfigError
from .models import BackboneSpec, DdcmR50Spec, build_ddcm_r50
from .optim import TrainSchedule


@dataclass
class ModelConfig:
    backbone: str = "resnet50-trunc3"
    num_classes: int = 6
    bands: int = 3
    encoder_rates: tuple[int, ...] = (1, 2, 3, 5, 7, 9)
    encoder_block_channels: int = 3
    encoder_merge_channels: int = 3
    encoder_kernel: int = 3
    decoder1_rates: tuple[int, ...] = (1, 2, 3, 4)
    decoder1_block_channels: int = 36
    decoder1_merge_channels: int = 36
    decoder2_rates: tuple[int, ...] = (1,)
    decoder2_block_channels: int = 18
    decoder2_merge_channels: int = 18
    decoder_kernel: int = 3


@dataclass
class TrainConfig:
    base_lr: float = 8.5e-5 / math.sqrt(2.0)
    bias_lr_mult: float = 2.0
    weight_decay: float = 5e-5
    poly_power: float = 0.9
    poly_max_iter: float = 1e8
    step_gamma: float = 0.85
    step_period: int = 15
    batch_size: int = 5
    patch_size: int = 256
    patches_per_epoch: int = 5000
    epochs: int = 50
    seed: int = 1


@dataclass
class InferConfig:
    window: int = 448
    stride: int = 100
    tta: bool = True


@dataclass
class DataConfig:
    root: str = ""
    palette: str = ""


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "infer": InferConfig,
    "data": DataConfig,
}


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    data: DataConfig = field(default_factory=DataConfig)
    overrides: list[str] = field(default_factory=list)

    @classmethod
    def load(cls, path=None) -> "ExperimentConfig":
        cfg = cls()
        if path is None:
            return cfg
        parser = configparser.ConfigParser()
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file {path}: {exc}") from exc
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"{path}: unknown section [{section}]; "
                                  f"expected one of {sorted(_SECTIONS)}")
            target = getattr(cfg, section)
            known = {f.name: f for f in fields(target)}
            for key, raw in parser.items(section):
                if key not in known:
                    raise ConfigError(f"{path}: unknown key {key!r} in section [{section}]")
                value = _convert(section, key, raw, getattr(target, key))
                setattr(target, key, value)
                cfg.overrides.append(f"{section}.{key}={raw}")
        return cfg

    def to_manifest(self) -> dict:
        out = {}
        for section in _SECTIONS:
            values = dataclasses.asdict(getattr(self, section))
            out[section] = {k: list(v) if isinstance(v, tuple) else v
                            for k, v in values.items()}
        out["overrides"] = list(self.overrides)
        return out


def _convert(section: str, key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(p) for p in raw.replace(" ", "").split(",") if p)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for [{section}] {key}: {exc}") from exc


def model_spec(cfg: ExperimentConfig) -> DdcmR50Spec:
    m = cfg.model
    backbone = BackboneSpec(m.backbone)
    return DdcmR50Spec(
        num_classes=m.num_classes,
        bands=m.bands,
        backbone=backbone,
        encoder=DdcmConfig(m.bands, m.encoder_block_channels, tuple(m.encoder_rates),
                           kernel=m.encoder_kernel,
                           merge_out_channels=m.encoder_merge_channels),
        decoder1=DdcmConfig(backbone.out_channels, m.decoder1_block_channels,
                            tuple(m.decoder1_rates), kernel=m.decoder_kernel,
                            merge_out_channels=m.decoder1_merge_channels),
        decoder2=DdcmConfig(m.decoder1_merge_channels, m.decoder2_block_channels,
                            tuple(m.decoder2_rates), kernel=m.decoder_kernel,
                            merge_out_channels=m.decoder2_merge_channels),
    )


def build_model(cfg: ExperimentConfig, seed: int | None = None):
    return build_ddcm_r50(model_spec(cfg), seed=cfg.train.seed if seed is None else seed)


def schedule_from(cfg: ExperimentConfig) -> TrainSchedule:
    t = cfg.train
    return TrainSchedule(
        base_lr=t.base_lr,
        bias_lr_mult=t.bias_lr_mult,
        poly_power=t.poly_power,
        max_iter=t.poly_max_iter,
        step_gamma=t.step_gamma,
        step_period=t.step_period,
    )
