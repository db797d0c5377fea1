"""Run configuration: JSON sections with strict keys, desk-scale presets and echo-back."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Mapping

from .datapipe import AugmentSpec, PreprocessConfig
from .metrics import KidConfig
from .nets import DiscriminatorConfig, FeatureExtractorSpec, GeneratorConfig, UNetConfig
from .projector import FpdSimSpec, ProjectionGeometry
from .trainer import LossWeights, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSection:
    cases: int = 16
    frames_per_case: int = 4
    extents: tuple[int, int, int] = (96, 72, 96)
    spacing: tuple[float, float, float] = (4.0, 4.0, 4.0)
    shift_min_mm: float = 3.0
    shift_max_mm: float = 8.0
    roll_max_deg: float = 10.0
    marker: bool = False


@dataclass(frozen=True)
class GeometrySection:
    source_to_detector: float = 2390.0
    source_to_isocenter: float = 1690.0
    detector_shape: tuple[int, int] = (768, 768)
    pixel_pitch: float = 0.388
    binning: int = 1
    step_mm: float = 1.0
    mu_water: float = 0.02

    def geometry(self, couch_roll_deg: float = 0.0) -> ProjectionGeometry:
        g = ProjectionGeometry(
            self.source_to_detector, self.source_to_isocenter, tuple(self.detector_shape), self.pixel_pitch, couch_roll_deg, self.step_mm
        )
        return g.binned(self.binning) if self.binning > 1 else g


@dataclass(frozen=True)
class FpdSection:
    gamma: float = 0.55
    noise_sigma: float = 0.02
    photon_scale: float = 3000.0
    scatter_fraction: float = 0.25
    scatter_sigma_px: float = 6.0
    port_edge: bool = True
    call_cable: bool = True

    def spec(self, seed: int, shift_mm=(0.0, 0.0, 0.0)) -> FpdSimSpec:
        return FpdSimSpec(**asdict(self), shift_mm=tuple(shift_mm), seed=seed)


@dataclass(frozen=True)
class DatapipeSection:
    border: int = 20
    resize: int = 384
    subimage_size: int = 144
    subimages_per_image: int = 20
    air_threshold: float = 0.40
    attempt_budget: int = 1000
    crop: int = 124
    max_shift: int = 20
    flip_lr: float = 0.5
    flip_ud: float = 0.5
    test_cases: int = 4
    # 0 keeps every pair; otherwise a seeded subset of that size
    selected_pairs: int = 0
    # how many selected training pairs are cut into subimages (0: all of them)
    subdivided_pairs: int = 0

    def preprocess(self) -> PreprocessConfig:
        return PreprocessConfig(
            self.border, self.resize, self.subimage_size, self.subimages_per_image, self.air_threshold, self.attempt_budget
        )

    def augment(self, seed: int) -> AugmentSpec:
        return AugmentSpec(self.crop, self.max_shift, self.flip_lr, self.flip_ud, seed)


@dataclass(frozen=True)
class ModelSection:
    generator_divisor: int = 1
    residual_blocks: int = 9
    discriminator_divisor: int = 1
    extractor_divisor: int = 1
    extractor_weights: str = "random"
    extractor_input: str = "unit"
    unet_base_channels: int = 32
    unet_depth: int = 4

    def generator(self) -> GeneratorConfig:
        return GeneratorConfig.scaled(self.generator_divisor, self.residual_blocks)

    def discriminator(self) -> DiscriminatorConfig:
        return DiscriminatorConfig.scaled(self.discriminator_divisor)

    def extractor(self, seed: int = 0) -> FeatureExtractorSpec:
        return FeatureExtractorSpec(
            width_divisor=self.extractor_divisor, weight_source=self.extractor_weights, seed=seed, input_mode=self.extractor_input
        )

    def unet(self) -> UNetConfig:
        return UNetConfig(self.unet_base_channels, self.unet_depth)


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 550
    batch_size: int = 16
    lr: float = 2e-4
    lr_drop_epoch: int = 500
    lr_drop_factor: float = 0.1
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-7
    adversarial_mode: str = "non_saturating"
    checkpoint_every: int = 50
    lambda_cycle: float = 5.0
    lambda_identity: float = 5.0
    lambda_style: float = 2e-5

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_cycle, self.lambda_identity, self.lambda_style)

    def config(self, augment: AugmentSpec, seed: int) -> TrainConfig:
        return TrainConfig(
            self.epochs, self.batch_size, self.lr, self.lr_drop_epoch, self.lr_drop_factor, self.beta1, self.beta2,
            self.epsilon, self.adversarial_mode, seed, self.checkpoint_every, augment,
        )  # fmt: skip


@dataclass(frozen=True)
class EvalSection:
    kid_block_size: int = 16
    kid_blocks: int = 10
    warmup: int = 1

    def kid(self, extractor: FeatureExtractorSpec, seed: int) -> KidConfig:
        return KidConfig(extractor, block_size=self.kid_block_size, n_blocks=self.kid_blocks, seed=seed)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "run"
    toy: bool = False
    phantom: PhantomSection = field(default_factory=PhantomSection)
    geometry: GeometrySection = field(default_factory=GeometrySection)
    fpd: FpdSection = field(default_factory=FpdSection)
    datapipe: DatapipeSection = field(default_factory=DatapipeSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "RunConfig":
        """Build every downstream object once so bad values fail before any work starts."""
        try:
            self.geometry.geometry()
            self.fpd.spec(self.seed)
            pre = self.datapipe.preprocess()
            aug = self.datapipe.augment(self.seed)
            aug.check(pre.subimage_size)
            self.model.generator()
            self.model.discriminator()
            self.model.extractor()
            self.train.config(aug, self.seed)
            self.train.weights()
            self.eval.kid(self.model.extractor(), self.seed)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        p = self.phantom
        if p.cases < 1 or p.frames_per_case < 1:
            raise ConfigError("phantom.cases and phantom.frames_per_case must be >= 1")
        if not 0 <= p.shift_min_mm <= p.shift_max_mm <= 10.0:
            raise ConfigError("need 0 <= shift_min_mm <= shift_max_mm <= 10")
        if not 0 <= self.datapipe.test_cases < p.cases:
            raise ConfigError("datapipe.test_cases must leave at least one training case")
        if self.datapipe.selected_pairs < 0 or self.datapipe.subdivided_pairs < 0:
            raise ConfigError("datapipe.selected_pairs and datapipe.subdivided_pairs must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


# desk-scale preset: detector binned 8x, 64 px images, narrow networks, short schedule
TOY_OVERRIDES: dict[str, dict[str, Any]] = {
    "geometry": {"binning": 8},
    "datapipe": {"border": 2, "resize": 64, "subimage_size": 56, "subimages_per_image": 4, "crop": 48, "max_shift": 4},
    "model": {"generator_divisor": 8, "discriminator_divisor": 8, "extractor_divisor": 8, "unet_base_channels": 8, "unet_depth": 3},
    "train": {"epochs": 12, "batch_size": 4, "lr_drop_epoch": 11, "checkpoint_every": 3},
}


def _coerce(cls, value: Any, where: str):
    if not isinstance(value, Mapping):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(value).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(value) - set(known))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kw = {}
    for name, v in value.items():
        at = f"{where}.{name}" if where else name
        default = getattr(cls(), name) if name in known else None
        if is_dataclass(default):
            kw[name] = _coerce(type(default), v, at)
        elif isinstance(default, tuple):
            if not isinstance(v, (list, tuple)) or len(v) != len(default):
                raise ConfigError(f"{at}: expected a list of {len(default)} values")
            kw[name] = tuple(type(d)(x) for d, x in zip(default, v))
        elif isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{at}: expected true/false")
            kw[name] = v
        elif isinstance(default, (int, float)):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{at}: expected a number")
            if isinstance(default, int) and float(v) != int(v):
                raise ConfigError(f"{at}: expected an integer")
            kw[name] = type(default)(v)
        else:
            kw[name] = v
    return cls(**kw)


def _merge(base: dict, update: Mapping) -> dict:
    out = dict(base)
    for k, v in update.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, toy: bool = False, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults < toy preset < config file < explicit overrides; unknown keys are errors."""
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
    toy = toy or bool(doc.get("toy", False))
    merged: dict = {"toy": toy}
    if toy:
        merged = _merge(merged, TOY_OVERRIDES)
    merged = _merge(merged, doc)
    merged = _merge(merged, dict(overrides or {}))
    merged["toy"] = toy
    return _coerce(RunConfig, merged, "").validate()


def write_effective(cfg: RunConfig, directory) -> Path:
    path = Path(directory) / "effective-config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return path


def with_section(cfg: RunConfig, section: str, **changes) -> RunConfig:
    return replace(cfg, **{section: replace(getattr(cfg, section), **changes)})
