"""Run configuration: defaults, ``key = value`` files and flag overrides.

Precedence is flags > config file > defaults.  Every key in a file must be a
known field; anything else is a :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .convlstm import ModelConfig, TrainConfig
from .segnet import SegConfig
from .synth import GrowthConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


@dataclass
class RunConfig:
    seed: int = 42
    out: str = "out"
    threshold: float = 0.5
    tile_size: int = 256
    block_size: int = 1024
    urban_label: int | None = None
    reference: str | None = None

    # synthetic series
    width: int = 128
    height: int = 128
    dates: int = 3
    initial_fraction: float = 0.15
    growth_rate: float = 0.05
    noise: float = 0.05

    # segmentation
    seg_components: int = 3
    seg_features: int = 100
    seg_labels: int = 100
    seg_continuity: float = 5.0
    seg_lr: float = 0.1
    seg_momentum: float = 0.9
    seg_max_iters: int = 500
    seg_min_labels: int = 3

    # mask cleanup
    min_area: int = 64
    morph_radius: int = 1
    connectivity: int = 8

    # model and training
    layers: int = 4
    filters: int = 40
    kernel: int = 3
    output_peephole: str = "prev"
    batch_size: int = 10
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 32
    patience: int = 5

    def growth(self) -> GrowthConfig:
        return GrowthConfig(width=self.width, height=self.height, dates=self.dates, seed=self.seed,
                            initial_fraction=self.initial_fraction, growth_rate=self.growth_rate,
                            noise=self.noise)

    def seg(self) -> SegConfig:
        return SegConfig(n_components=self.seg_components, n_features=self.seg_features,
                         n_labels=self.seg_labels, continuity_weight=self.seg_continuity,
                         lr=self.seg_lr, momentum=self.seg_momentum, max_iters=self.seg_max_iters,
                         min_labels=self.seg_min_labels)

    def model(self, in_channels: int = 1) -> ModelConfig:
        return ModelConfig(in_channels=in_channels, n_layers=self.layers, filters=self.filters,
                           kernel=self.kernel, output_peephole=self.output_peephole, seed=self.seed)

    def train(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                           eps=self.adam_eps, epochs_max=self.epochs, patience=self.patience,
                           threshold=self.threshold, seed=self.seed)

    def validate(self) -> None:
        if self.tile_size < 8:
            raise ConfigError(f"tile_size: must be >= 8, got {self.tile_size}")
        if self.block_size < 8:
            raise ConfigError(f"block_size: must be >= 8, got {self.block_size}")
        if not 0 <= self.threshold <= 1:
            raise ConfigError(f"threshold: must be in [0, 1], got {self.threshold}")
        if self.connectivity not in (4, 8):
            raise ConfigError(f"connectivity: must be 4 or 8, got {self.connectivity}")
        if self.min_area < 1:
            raise ConfigError(f"min_area: must be >= 1, got {self.min_area}")
        if self.morph_radius < 0:
            raise ConfigError(f"morph_radius: must be >= 0, got {self.morph_radius}")
        if self.output_peephole not in ("prev", "new"):
            raise ConfigError(f"output_peephole: must be 'prev' or 'new', got {self.output_peephole!r}")
        if self.urban_label is not None and self.urban_label < 0:
            raise ConfigError(f"urban_label: must be >= 0, got {self.urban_label}")
        for build, prefix in ((self.growth, ""), (self.seg, "seg_"), (self.model, ""),
                              (self.train, "")):
            try:
                build().validate()
            except ValueError as exc:
                raise ConfigError(f"{prefix}{exc}") from exc


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _FIELDS[key].type
    optional = "None" in kind
    text = raw.strip()
    if optional and text.lower() in ("", "none"):
        return None
    try:
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.split(' ')[0]}, got {text!r}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then non-``None`` ``overrides``."""
    values = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"{p}: cannot read config ({exc.strerror})") from None
        values.update(parse_config_text(text, str(p)))
    for key, val in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        if val is not None:
            values[key] = val
    cfg = dataclasses.replace(RunConfig(), **values)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {'none' if v is None else v}\n" for k, v in dataclasses.asdict(cfg).items())
