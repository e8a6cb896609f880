"""Channel search space over a ResNet-style backbone.

A space is an ordered list of searchable convolution layers. When the
number of searchable layers is odd the first one is the stem and the rest
pair up into residual blocks; when it is even the stem has a fixed width and
every searchable layer belongs to a block. Blocks are spread over at most
three stages, with stride 2 on the first block of stages two and three.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

RESNET20_LAYER_OPTIONS: tuple[tuple[int, ...], ...] = (
    (4, 8, 12, 16),
) * 7 + (tuple(range(4, 33, 4)),) * 6 + (tuple(range(4, 65, 4)),) * 6

# ceilings of the ResNet20 space, per 1-based layer range
_RESNET20_LIMITS = ((1, 7, 16), (8, 13, 32), (14, 19, 64))

DEFAULT_PROXY = {4: 5, 8: 9}


class SearchSpaceError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    index: int
    options: tuple[int, ...]
    role: str
    stride: int = 1

    @property
    def max_option(self) -> int:
        return self.options[-1]


@dataclass(frozen=True)
class Block:
    """One residual block: two searchable convs plus a projection shortcut."""

    conv1: int  # 0-based position in SearchSpace.layers
    conv2: int
    stride: int
    source: Optional[int]  # layer feeding the block; None for the fixed stem


@dataclass(frozen=True)
class EnhancementMap:
    """Maps nominal channel options to executed (physical) widths."""

    channel_proxy: dict = field(default_factory=lambda: dict(DEFAULT_PROXY))
    activation_target: str = "prelu"

    def width(self, option: int) -> int:
        return self.channel_proxy.get(option, option)


@dataclass(frozen=True)
class SearchSpace:
    layers: tuple[LayerSpec, ...]
    activation_kind: str = "relu"
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    stem_width: Optional[int] = None
    channel_proxy: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if not self.layers:
            raise SearchSpaceError("search space needs at least one layer")
        for layer in self.layers:
            if not layer.options:
                raise SearchSpaceError(f"layer {layer.index} has no channel options")
            if any(b <= a for a, b in zip(layer.options, layer.options[1:])):
                raise SearchSpaceError(f"layer {layer.index} options must be strictly increasing: {layer.options}")
            if layer.options[0] <= 0:
                raise SearchSpaceError(f"layer {layer.index} options must be positive")
        if self.activation_kind not in ("relu", "prelu"):
            raise SearchSpaceError(f"unknown activation {self.activation_kind!r}")
        if self.num_classes < 2:
            raise SearchSpaceError("num_classes must be at least 2")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def has_searchable_stem(self) -> bool:
        return self.layers[0].role == "stem"

    @property
    def proxy(self) -> dict[int, int]:
        return dict(self.channel_proxy)

    @property
    def enhanced(self) -> bool:
        return bool(self.channel_proxy)

    def executed_width(self, option: int) -> int:
        return self.proxy.get(option, option)

    def executed_options(self, layer: int) -> tuple[int, ...]:
        return tuple(self.executed_width(o) for o in self.layers[layer].options)

    def max_width(self, layer: int) -> int:
        return self.executed_width(self.layers[layer].max_option)

    def blocks(self) -> list[Block]:
        out = []
        first = 1 if self.has_searchable_stem else 0
        for pos in range(first, self.num_layers, 2):
            source = pos - 1 if pos > 0 else None
            out.append(Block(pos, pos + 1, self.layers[pos].stride, source))
        return out

    def feeding_layer(self, layer: int) -> Optional[int]:
        """Layer whose output is this layer's input; None for the image or fixed stem."""
        if layer == 0:
            return None
        return layer - 1

    def max_encoding(self) -> "SubnetEncoding":
        return SubnetEncoding(tuple(l.max_option for l in self.layers))

    def min_encoding(self) -> "SubnetEncoding":
        return SubnetEncoding(tuple(l.options[0] for l in self.layers))

    def validate(self, enc: "SubnetEncoding") -> None:
        if len(enc.choices) != self.num_layers:
            raise SearchSpaceError(f"encoding has {len(enc.choices)} choices, space has {self.num_layers} layers")
        for layer, c in zip(self.layers, enc.choices):
            if c not in layer.options:
                raise SearchSpaceError(f"choice {c} not an option of layer {layer.index} {layer.options}")

    def to_dict(self) -> dict:
        return {
            "layers": [list(l.options) for l in self.layers],
            "activation": self.activation_kind,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "stem_width": self.stem_width,
            "channel_proxy": [list(p) for p in self.channel_proxy],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        space = build_search_space(
            d["layers"],
            activation=d.get("activation", "relu"),
            num_classes=d.get("num_classes", 10),
            input_shape=tuple(d.get("input_shape", (3, 32, 32))),
            stem_width=d.get("stem_width"),
        )
        proxy = tuple(tuple(p) for p in d.get("channel_proxy", ()))
        return replace(space, channel_proxy=proxy) if proxy else space


@dataclass(frozen=True)
class SubnetEncoding:
    """One channel choice per searchable layer, named by nominal options."""

    choices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple(int(c) for c in self.choices))

    def __str__(self) -> str:
        return "-".join(str(c) for c in self.choices)

    @classmethod
    def parse(cls, text: str) -> "SubnetEncoding":
        text = text.strip()
        try:
            return cls(tuple(int(t) for t in text.split("-")))
        except ValueError:
            raise SearchSpaceError(f"malformed encoding {text!r}") from None


def _stage_sizes(n_blocks: int) -> list[int]:
    n_stages = min(3, n_blocks)
    if n_stages == 0:
        return []
    base, extra = divmod(n_blocks, n_stages)
    return [base + (1 if s < extra else 0) for s in range(n_stages)]


def build_search_space(
    layer_options: Sequence[Iterable[int]],
    activation: str = "relu",
    num_classes: int = 10,
    input_shape: tuple[int, int, int] = (3, 32, 32),
    stem_width: Optional[int] = None,
    resnet20_mode: bool = False,
) -> SearchSpace:
    """Validate per-layer option lists and map them onto the backbone.

    With an even layer count a fixed stem is required; it defaults to 16
    channels, the ResNet20 stem width.
    """
    options = [tuple(int(o) for o in opts) for opts in layer_options]
    if not options:
        raise SearchSpaceError("search space needs at least one layer")
    searchable_stem = len(options) % 2 == 1
    if searchable_stem:
        stem_width = None
    elif stem_width is None:
        stem_width = 16
    n_blocks = (len(options) - (1 if searchable_stem else 0)) // 2
    strides = []
    for s, size in enumerate(_stage_sizes(n_blocks)):
        strides += [2 if (s > 0 and b == 0) else 1 for b in range(size)]

    layers = []
    pos = 0
    if searchable_stem:
        layers.append(LayerSpec(1, options[0], "stem", 1))
        pos = 1
    for stride in strides:
        layers.append(LayerSpec(pos + 1, options[pos], "block_conv1", stride))
        layers.append(LayerSpec(pos + 2, options[pos + 1], "block_conv2", 1))
        pos += 2
    if resnet20_mode:
        _check_resnet20_options(layers)
    return SearchSpace(tuple(layers), activation, num_classes, tuple(input_shape), stem_width)


def _check_resnet20_options(layers: Sequence[LayerSpec]) -> None:
    for layer in layers:
        ceiling = next((c for lo, hi, c in _RESNET20_LIMITS if lo <= layer.index <= hi), None)
        if ceiling is None:
            raise SearchSpaceError(f"ResNet20 space has 19 layers; layer {layer.index} is out of range")
        for o in layer.options:
            if o % 4 or not 4 <= o <= ceiling:
                raise SearchSpaceError(
                    f"layer {layer.index}: option {o} must be a multiple of 4 in [4, {ceiling}]"
                )


def resnet20_search_space(activation: str = "relu", num_classes: int = 100) -> SearchSpace:
    """The 19-layer ResNet20 channel space."""
    return build_search_space(RESNET20_LAYER_OPTIONS, activation, num_classes, (3, 32, 32), resnet20_mode=True)


def count_subnets(space: SearchSpace) -> int:
    return math.prod(len(l.options) for l in space.layers)


def enhance_candidates(space: SearchSpace, mapping: Optional[EnhancementMap] = None,
                       proxy: bool = True, activation: bool = True) -> SearchSpace:
    """Apply the channel proxy and/or activation conversion.

    Encodings keep naming candidates by their nominal options; only the
    executed widths and the activation kind change.
    """
    mapping = mapping or EnhancementMap()
    kw = {}
    if proxy:
        kw["channel_proxy"] = tuple(sorted(mapping.channel_proxy.items()))
    if activation:
        kw["activation_kind"] = mapping.activation_target
    enhanced = replace(space, **kw)
    for i in range(enhanced.num_layers):
        widths = enhanced.executed_options(i)
        if any(b <= a for a, b in zip(widths, widths[1:])):
            raise SearchSpaceError(f"proxy breaks the option ordering of layer {i + 1}: {widths}")
    return enhanced
