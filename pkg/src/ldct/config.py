"""Experiment configuration: one TOML file, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .diffusion import build_schedule
from .dose import DoseConfig
from .errors import ConfigurationError
from .fusion import FusionConfig
from .manifest import config_hash
from .pipeline import desk_geometry
from .projection import ProjNetConfig, ProjTrainConfig
from .refiner import RefinerNetConfig, RefinerTrainConfig

VERSION = "1"
OUTPUT_ROOT_ENV = "LDCT_OUTPUT_ROOT"


@dataclass
class GeometrySection:
    image_size: int = 64
    num_views: int = 180
    pixel_spacing: float = 0.68359375
    num_detector_bins: int | None = None

    def build(self):
        return desk_geometry(self.image_size, self.num_views, self.pixel_spacing, self.num_detector_bins)


@dataclass
class DataSection:
    kind: str = "random-ellipses"
    num_phantoms: int = 200
    num_train: int = 180  # seeds [0, num_train) train, the rest test

    @property
    def train_seeds(self):
        return list(range(self.num_train))

    @property
    def test_seeds(self):
        return list(range(self.num_train, self.num_phantoms))


@dataclass
class DoseSection:
    incident_photons: float = 1.5e5
    electronic_noise_variance: float = 10.0
    doses: list = field(default_factory=lambda: [0.5, 0.25, 0.1])
    train_dose: float = 0.25

    def build(self, seed: int) -> DoseConfig:
        return DoseConfig(self.incident_photons, self.electronic_noise_variance, 1.0, seed)


@dataclass
class SamplerSection:
    patch_size: int | None = 48  # sub-sampled crops are half this size


@dataclass
class ProjectionSection:
    base_channels: int = 16
    depth: int = 3
    activation: str = "leaky_relu"
    alpha: float = 0.02
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 84
    lr_halving_period: int = 20

    def build(self, seed: int, patch_size):
        net = ProjNetConfig(self.base_channels, self.depth, self.activation)
        train = ProjTrainConfig(self.alpha, self.lr, self.batch_size, self.epochs, self.lr_halving_period,
                                seed=seed, patch_size=patch_size)
        return net, train


@dataclass
class RefinerSection:
    hidden_channels: int = 64
    latent_channels: int = 32
    model_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 4
    beta_ssim: float = 1.0
    gamma_grad: float = 2.0
    eta_l1: float = 0.5
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 120
    T: int = 1000
    T_L: int = 5

    def build(self, seed: int):
        net = RefinerNetConfig(self.hidden_channels, self.latent_channels, model_dim=self.model_dim,
                               num_heads=self.num_heads, num_blocks=self.num_blocks)
        train = RefinerTrainConfig(self.beta_ssim, self.gamma_grad, self.eta_l1, self.lr,
                                   batch_size=self.batch_size, epochs=self.epochs, seed=seed)
        return net, train

    def schedule(self):
        return build_schedule(self.T, self.T_L)


@dataclass
class FusionSection:
    k1: float = 10.0
    k2: float = 10.0
    tau_e: float = 0.15
    tau_n: float = 0.3
    dose_shift: float = 0.0
    noise_window: int = 7
    gradient_operator: str = "sobel"
    percentile: float = 99.0

    def build(self, dose_shift: float | None = None) -> FusionConfig:
        values = dataclasses.asdict(self)
        if dose_shift is not None:
            values["dose_shift"] = dose_shift
        return FusionConfig(**values)


@dataclass
class MetricsSection:
    window: list = field(default_factory=lambda: [-1024.0, 3072.0])


@dataclass
class PathsSection:
    root: str = ""  # empty: the env variable, else ./runs

    def resolve(self) -> Path:
        return Path(self.root or os.environ.get(OUTPUT_ROOT_ENV, "runs"))


SECTIONS = {
    "geometry": GeometrySection,
    "data": DataSection,
    "dose": DoseSection,
    "sampler": SamplerSection,
    "projection": ProjectionSection,
    "refiner": RefinerSection,
    "fusion": FusionSection,
    "metrics": MetricsSection,
    "paths": PathsSection,
}


@dataclass
class ExperimentConfig:
    geometry: GeometrySection = field(default_factory=GeometrySection)
    data: DataSection = field(default_factory=DataSection)
    dose: DoseSection = field(default_factory=DoseSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    projection: ProjectionSection = field(default_factory=ProjectionSection)
    refiner: RefinerSection = field(default_factory=RefinerSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    paths: PathsSection = field(default_factory=PathsSection)
    seed: int = 0
    version: str = VERSION

    def __post_init__(self):
        if self.data.num_train < 1 or self.data.num_train >= self.data.num_phantoms:
            raise ConfigurationError("data.num_train must leave at least one test phantom")
        if self.dose.train_dose not in self.dose.doses:
            raise ConfigurationError(f"train_dose {self.dose.train_dose} is not among doses {self.dose.doses}")
        lo, hi = self.metrics.window
        if lo >= hi:
            raise ConfigurationError("metrics.window must be increasing")
        # fail early on values the stage configs reject
        self.projection.build(self.seed, self.sampler.patch_size)
        self.refiner.build(self.seed)
        self.refiner.schedule()
        self.fusion.build()
        self.dose.build(self.seed)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def hash(self) -> str:
        """Hash of everything except the output location."""
        d = self.as_dict()
        d.pop("paths")
        return config_hash(d)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        kwargs = {}
        for name in ("seed", "version"):
            if name in raw:
                kwargs[name] = raw.pop(name)
        for name, value in raw.items():
            if name not in SECTIONS:
                raise ConfigurationError(f"unknown config section [{name}]")
            if not isinstance(value, dict):
                raise ConfigurationError(f"[{name}] must be a table")
            allowed = {f.name for f in fields(SECTIONS[name])}
            unknown = sorted(set(value) - allowed)
            if unknown:
                raise ConfigurationError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
            kwargs[name] = SECTIONS[name](**value)
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from exc


def load_config(path=None) -> ExperimentConfig:
    """Read a TOML experiment file; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} not found")
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw)
