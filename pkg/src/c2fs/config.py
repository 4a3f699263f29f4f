"""Run configuration: sectioned TOML with strict keys and documented defaults."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Union

import tomli
import tomli_w

from .calibrate import CalibrationConfig
from .data import AugmentConfig, LabelHierarchy, SynthConfig
from .losses import LossWeights
from .model import EncoderConfig
from .trainer import TrainConfig, relative_schedule


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    mode: str = "vector"
    coarse_count: int = 4
    fine_per_coarse: Union[int, list] = 5
    intrinsic_dim: int = 16
    ambient_dim: int = 64
    coarse_radius: float = 1.0
    fine_radius: float = 0.4
    noise_sigma: float = 0.15
    image_shape: list = field(default_factory=lambda: [3, 32, 32])
    train_per_fine: int = 100
    test_per_fine: int = 20
    train_path: str = ""
    test_path: str = ""


@dataclass
class ArchitectureSection:
    stage_channels: list = field(default_factory=lambda: [128, 128, 128, 128])
    stage_strides: list = field(default_factory=lambda: [2, 2, 2, 2])
    embedding_dim: int = 64
    projector_dim: int = 32
    projector_hidden: int = 64
    decoder_channels: list = field(default_factory=lambda: [64, 64, 64, 64])


@dataclass
class TrainingSection:
    epochs: int = 60
    batch_size: int = 64
    initial_lr: float = 0.01
    momentum: float = 0.9
    lr_decay_points: list = field(default_factory=lambda: [0.7, 0.9])
    lr_decay_factor: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    tie_alpha_beta: bool = True
    use_contrastive: bool = True
    detach_align_stages: bool = False
    align_reduction: str = "mean"
    checkpoint_every: int = 10
    crop_scale_min: float = 0.6
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    vector_jitter: float = 0.08


@dataclass
class ContrastiveSection:
    temperature: float = 0.2
    queue_capacity: int = 256
    ema_coeff: float = 0.99


@dataclass
class CalibrationSection:
    k: int = 10
    m: int = 20
    n: int = 100
    use_true_coarse: bool = False
    pool: str = "coarse"
    prototype_update: str = "sum_of_means"
    head: str = "logistic"


@dataclass
class EvaluationSection:
    way: Union[int, str] = 5
    shot: int = 1
    queries_per_class: int = 15
    episodes: int = 1000
    episode_seed: int = 0


SECTIONS = {
    "data": DataSection,
    "architecture": ArchitectureSection,
    "training": TrainingSection,
    "contrastive": ContrastiveSection,
    "calibration": CalibrationSection,
    "evaluation": EvaluationSection,
}


def _coerce(section: str, key: str, default: Any, value: Any):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if key in ("way", "fine_per_coarse"):
            return value
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return value
    return value


@dataclass
class RunConfig:
    seed: int
    data: DataSection = field(default_factory=DataSection)
    architecture: ArchitectureSection = field(default_factory=ArchitectureSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    contrastive: ContrastiveSection = field(default_factory=ContrastiveSection)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    # parsing ------------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict, extra_sections: tuple[str, ...] = ()) -> "RunConfig":
        unknown = [k for k in raw if k not in SECTIONS and k != "seed" and k not in extra_sections]
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
        if "seed" not in raw:
            raise ConfigError("seed: required top-level key is missing")
        seed = raw["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"seed: expected an unsigned integer, got {seed!r}")
        kwargs = {}
        for name, klass in SECTIONS.items():
            body = raw.get(name, {})
            if not isinstance(body, dict):
                raise ConfigError(f"{name}: expected a section")
            defaults = klass()
            known = {f.name for f in fields(klass)}
            bad = sorted(set(body) - known)
            if bad:
                raise ConfigError(f"unknown key {name}.{bad[0]}")
            values = {k: _coerce(name, k, getattr(defaults, k), v) for k, v in body.items()}
            kwargs[name] = klass(**values)
        cfg = cls(seed=seed, **kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, extra_sections: tuple[str, ...] = ()) -> "RunConfig":
        try:
            raw = tomli.loads(Path(path).read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(raw, extra_sections)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())

    def validate(self) -> None:
        """Build every derived object once so bad values fail with the section name."""
        for section, build in (("data", self.synth_config), ("architecture", self.encoder_config),
                               ("training", self.train_config), ("calibration", self.calibration_config)):
            try:
                build()
            except ConfigError:
                raise
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{section}: {exc}") from exc
        way = self.evaluation.way
        if not (way == "all" or (isinstance(way, int) and not isinstance(way, bool) and way > 0)):
            raise ConfigError(f"evaluation.way: expected a positive integer or \"all\", got {way!r}")
        if self.calibration.head not in ("logistic", "prototype"):
            raise ConfigError(f"calibration.head: unknown head {self.calibration.head!r}")

    # derived objects -------------------------------------------------------

    def hierarchy(self) -> LabelHierarchy:
        d = self.data
        fpc = d.fine_per_coarse
        if isinstance(fpc, int):
            return LabelHierarchy.uniform(d.coarse_count, fpc)
        if isinstance(fpc, list):
            return LabelHierarchy(d.coarse_count, tuple(fpc))
        raise ConfigError(f"data.fine_per_coarse: expected an integer or list, got {fpc!r}")

    def synth_config(self) -> SynthConfig:
        d = self.data
        return SynthConfig(hierarchy=self.hierarchy(), intrinsic_dim=d.intrinsic_dim,
                           ambient_dim=d.ambient_dim, coarse_radius=d.coarse_radius,
                           fine_radius=d.fine_radius, noise_sigma=d.noise_sigma, seed=self.seed,
                           mode=d.mode, image_shape=tuple(d.image_shape))

    def input_shape(self) -> tuple[int, int, int]:
        if self.data.mode == "vector":
            return (self.data.ambient_dim, 1, 1)
        return tuple(self.data.image_shape)

    def encoder_config(self, input_shape=None, coarse_count=None) -> EncoderConfig:
        a = self.architecture
        return EncoderConfig(
            input_shape=tuple(input_shape or self.input_shape()),
            stage_channels=tuple(a.stage_channels), stage_strides=tuple(a.stage_strides),
            embedding_dim=a.embedding_dim, projector_dim=a.projector_dim,
            projector_hidden=a.projector_hidden, decoder_channels=tuple(a.decoder_channels),
            coarse_count=coarse_count or self.data.coarse_count,
            ema_coeff=self.contrastive.ema_coeff)

    def train_config(self) -> TrainConfig:
        t, c = self.training, self.contrastive
        weights = LossWeights(t.alpha, t.beta, t.tie_alpha_beta)
        aug = AugmentConfig(t.crop_scale_min, t.flip_prob, t.brightness, t.contrast,
                            t.saturation, t.vector_jitter)
        return TrainConfig(
            epochs=t.epochs, batch_size=t.batch_size, initial_lr=t.initial_lr, momentum=t.momentum,
            lr_schedule=relative_schedule(t.epochs, tuple(t.lr_decay_points), t.lr_decay_factor),
            weights=weights, contrastive=t.use_contrastive,
            detach_align_stages=t.detach_align_stages, align_reduction=t.align_reduction,
            ema_coeff=c.ema_coeff,
            temperature=c.temperature, queue_capacity=c.queue_capacity, seed=self.seed,
            checkpoint_every=t.checkpoint_every, augment=aug)

    def calibration_config(self) -> CalibrationConfig:
        c = self.calibration
        return CalibrationConfig(k=c.k, m=c.m, n=c.n, use_true_coarse=c.use_true_coarse,
                                 pool=c.pool, prototype_update=c.prototype_update)
