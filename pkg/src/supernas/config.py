"""Experiment configuration: YAML in, validated dataclasses out.

Every section and key is optional; missing values take the defaults below.
Unknown keys and wrongly typed values are rejected with the dotted path of
the offending entry (``stages[1].lr_init``).
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .space import RESNET20_LAYER_OPTIONS, SearchSpace, SearchSpaceError, build_search_space, enhance_candidates
from .training import GRAD_NORMALIZATIONS, TrainConfig

TOY_LAYERS = [[4, 8, 12, 16]] * 6

VARIANTS = {
    # name: (channel proxy, PReLU)
    "base": (False, False),
    "OE": (True, False),
    "PReLU+OE": (True, True),
}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class SpaceConfig:
    mode: str = "custom"  # custom | resnet20
    layers: Optional[list] = None
    stem_width: int = 16
    activation: str = "relu"


@dataclass
class EnhancementConfig:
    proxy: bool = False
    prelu: bool = False


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # synthetic | cifar | cached
    seed: int = 0
    n_per_class: int = 150
    num_classes: int = 20
    shape: list = field(default_factory=lambda: [3, 8, 8])
    noise: float = 0.5
    max_shift: int = 1
    path: Optional[str] = None
    variant: str = "c10"


@dataclass
class StageConfig:
    iterations: int = 300
    samples_per_step: int = 8
    batch_size: int = 64
    lr_init: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    alpha: float = 0.5
    grad_normalization: str = "mean_over_networks"
    warmup_iterations: int = 0
    warmup_lr: float = 0.1
    augment: bool = False

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **dataclasses.asdict(self))


@dataclass
class EvalConfig:
    encodings: Optional[str] = None
    num_encodings: int = 24
    recalibrate: bool = True
    calib_batches: int = 20
    calib_batch_size: int = 64


@dataclass
class StandaloneConfig:
    iterations: int = 300
    batch_size: int = 64
    lr_init: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = False
    seeds: list = field(default_factory=lambda: [0])

    def train_config(self) -> TrainConfig:
        return TrainConfig(iterations=self.iterations, batch_size=self.batch_size, lr_init=self.lr_init,
                           momentum=self.momentum, weight_decay=self.weight_decay, augment=self.augment,
                           samples_per_step=0)


@dataclass
class AblationConfig:
    variants: list = field(default_factory=lambda: ["base", "PReLU+OE"])
    supernet_seeds: list = field(default_factory=lambda: [0])


def default_stages() -> list[StageConfig]:
    return [
        StageConfig(lr_init=0.01, warmup_iterations=100),
        StageConfig(lr_init=0.001, iterations=150),
        StageConfig(lr_init=0.001, iterations=150),
    ]


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/experiment"
    space: SpaceConfig = field(default_factory=SpaceConfig)
    enhancement: EnhancementConfig = field(default_factory=EnhancementConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    stages: list = field(default_factory=default_stages)
    eval: EvalConfig = field(default_factory=EvalConfig)
    standalone: StandaloneConfig = field(default_factory=StandaloneConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def input_shape(self) -> tuple[int, int, int]:
        if self.dataset.kind == "cifar":
            return (3, 32, 32)
        return tuple(self.dataset.shape)

    def num_classes(self) -> int:
        if self.dataset.kind == "cifar":
            return 10 if self.dataset.variant == "c10" else 100
        return self.dataset.num_classes

    def base_space(self) -> SearchSpace:
        """The space without enhancement (stand-alone ground truth uses this)."""
        sc = self.space
        layers = sc.layers if sc.layers is not None else (
            [list(o) for o in RESNET20_LAYER_OPTIONS] if sc.mode == "resnet20" else TOY_LAYERS
        )
        return build_search_space(layers, sc.activation, self.num_classes(), self.input_shape(),
                                  sc.stem_width, resnet20_mode=sc.mode == "resnet20")

    def supernet_space(self, variant: Optional[str] = None) -> SearchSpace:
        proxy, prelu = VARIANTS[variant] if variant else (self.enhancement.proxy, self.enhancement.prelu)
        space = self.base_space()
        if proxy or prelu:
            space = enhance_candidates(space, proxy=proxy, activation=prelu)
        return space

    def train_configs(self, seed: Optional[int] = None) -> list[TrainConfig]:
        s = self.seed if seed is None else seed
        return [st.train_config(s) for st in self.stages]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _check_scalar(value, typ, path):
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if typ is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported type {typ}")


def _build(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(where, "unknown key")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        typ = hints[name]
        if typing.get_origin(typ) is typing.Union:
            if value is None:
                kwargs[name] = None
                continue
            typ = next(a for a in typing.get_args(typ) if a is not type(None))
        if dataclasses.is_dataclass(typ):
            kwargs[name] = _build(typ, value, sub)
        else:
            kwargs[name] = _check_scalar(value, typ, sub)
    return cls(**kwargs)


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.space.mode not in ("custom", "resnet20"):
        raise ConfigError("space.mode", "must be 'custom' or 'resnet20'")
    if cfg.space.activation not in ("relu", "prelu"):
        raise ConfigError("space.activation", "must be 'relu' or 'prelu'")
    if cfg.space.layers is not None:
        for i, opts in enumerate(cfg.space.layers):
            if not isinstance(opts, list) or not all(isinstance(o, int) and not isinstance(o, bool) for o in opts):
                raise ConfigError(f"space.layers[{i}]", "expected a list of integers")
    if cfg.dataset.kind not in ("synthetic", "cifar", "cached"):
        raise ConfigError("dataset.kind", "must be 'synthetic', 'cifar' or 'cached'")
    if cfg.dataset.kind != "synthetic" and not cfg.dataset.path:
        raise ConfigError("dataset.path", f"required for dataset kind {cfg.dataset.kind!r}")
    if cfg.dataset.variant not in ("c10", "c100"):
        raise ConfigError("dataset.variant", "must be 'c10' or 'c100'")
    if cfg.dataset.num_classes < 2:
        raise ConfigError("dataset.num_classes", "must be at least 2")
    if len(cfg.dataset.shape) != 3 or not all(isinstance(v, int) and v > 0 for v in cfg.dataset.shape):
        raise ConfigError("dataset.shape", "expected [channels, height, width]")
    if not 1 <= len(cfg.stages) <= 3:
        raise ConfigError("stages", "between one and three stages are required")
    for i, st in enumerate(cfg.stages):
        if st.grad_normalization not in GRAD_NORMALIZATIONS:
            raise ConfigError(f"stages[{i}].grad_normalization", f"must be one of {GRAD_NORMALIZATIONS}")
        try:
            st.train_config(cfg.seed)
        except ValueError as exc:
            raise ConfigError(f"stages[{i}]", str(exc)) from None
    for i, v in enumerate(cfg.ablation.variants):
        if v not in VARIANTS:
            raise ConfigError(f"ablation.variants[{i}]", f"unknown variant {v!r}; choose from {list(VARIANTS)}")
    if cfg.eval.num_encodings < 2:
        raise ConfigError("eval.num_encodings", "need at least two encodings to correlate")
    if cfg.eval.calib_batches < 1:
        raise ConfigError("eval.calib_batches", "must be at least 1")
    try:
        cfg.supernet_space()
    except SearchSpaceError as exc:
        raise ConfigError("space.layers", str(exc)) from None


def config_from_dict(data: Any) -> ExperimentConfig:
    data = dict(data or {})
    stages = data.pop("stages", None)
    cfg = _build(ExperimentConfig, data, "")
    if stages is not None:
        if not isinstance(stages, list):
            raise ConfigError("stages", "expected a list of stage mappings")
        defaults = default_stages()
        built = []
        for i, st in enumerate(stages):
            base = dataclasses.asdict(defaults[min(i, 2)])
            if isinstance(st, dict):
                base.update(st)
            else:
                base = st
            built.append(_build(StageConfig, base, f"stages[{i}]"))
        cfg.stages = built
    _validate(cfg)
    return cfg


def parse_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"not valid YAML: {exc}") from None
    return config_from_dict(data)
