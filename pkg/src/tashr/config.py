"""Pipeline configuration: one YAML file with ``generator``, ``training``, ``losses`` and
``evaluation`` sections. Unknown keys are errors.

Example::

    generator:
      seed: 0
      samples_per_clean_image: 4
      size: 512
    training:
      batch_size: 4
      max_steps: 20000
    losses:
      tv_mode: as_printed
      feature_provider: {kind: vgg16, weights: weights/vgg16.pth}
      text_det_provider: {kind: vgg16, weights: weights/ctpn_vgg16.pth,
                          layers: [relu3_3, relu4_3, relu5_3]}
      text_rec_provider: {kind: densenet121, weights: weights/densenet.pth,
                          layers: [denseblock3]}
    evaluation:
      ocr_command: "python my_ocr.py"
      iou_thresh: 0.5
"""

from dataclasses import dataclass, field, fields, asdict, replace
from pathlib import Path

import yaml

from .errors import ConfigError
from .losses import TV_MODES
from .providers import ProviderConfig, build_provider
from .synthgen import GeneratorConfig
from .trainer import TrainConfig, Providers

SNAPSHOT_NAME = "config.resolved.yaml"


@dataclass
class LossConfig:
    tv_mode: str = "as_printed"
    feature_provider: ProviderConfig = field(default_factory=lambda: ProviderConfig(seed=0))
    text_det_provider: ProviderConfig = field(default_factory=lambda: ProviderConfig(seed=1))
    text_rec_provider: ProviderConfig = field(default_factory=lambda: ProviderConfig(seed=2))

    def build_providers(self):
        return Providers(
            build_provider(self.feature_provider, ("relu2_2", "relu3_3", "relu4_3"), "feature"),
            build_provider(self.text_det_provider, ("relu3_3", "relu4_3", "relu5_3"), "text_det"),
            build_provider(self.text_rec_provider, ("denseblock3",), "text_rec"),
        )


@dataclass
class EvalConfig:
    ocr_command: str = None
    ocr_cache: str = None
    ocr_timeout: float = 120.0
    iou_thresh: float = 0.5
    case_sensitive: bool = False
    workers: int = 1


@dataclass
class PipelineConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        d = asdict(self)
        # tv_mode lives in the losses section; the training copy is derived
        d["training"].pop("tv_mode")
        return d

    def snapshot(self, directory):
        path = Path(directory) / SNAPSHOT_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path


def _build(cls, d, where):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from e


def from_dict(d):
    d = dict(d or {})
    unknown = sorted(set(d) - {"generator", "training", "losses", "evaluation"})
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}")
    losses = dict(d.get("losses") or {})
    for key in ("feature_provider", "text_det_provider", "text_rec_provider"):
        if key in losses:
            losses[key] = _build(ProviderConfig, losses[key], f"losses.{key}")
    loss_cfg = _build(LossConfig, losses, "losses")
    if loss_cfg.tv_mode not in TV_MODES:
        raise ConfigError(f"losses.tv_mode must be one of {TV_MODES}")
    training = dict(d.get("training") or {})
    if "tv_mode" in training:
        raise ConfigError("tv_mode belongs in the losses section")
    training["tv_mode"] = loss_cfg.tv_mode
    return PipelineConfig(
        _build(GeneratorConfig, d.get("generator"), "generator"),
        _build(TrainConfig, training, "training"),
        loss_cfg,
        _build(EvalConfig, d.get("evaluation"), "evaluation"),
    )


def load_config(path=None, overrides=None):
    """Read a YAML config (or defaults when ``path`` is None) and apply ``{section: {key: value}}`` overrides."""
    d = {}
    if path is not None:
        try:
            d = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("config root must be a mapping")
    for section, values in (overrides or {}).items():
        d.setdefault(section, {})
        d[section] = {**(d[section] or {}), **values}
    return from_dict(d)


def with_training(cfg, **changes):
    return replace(cfg, training=replace(cfg.training, **changes))
