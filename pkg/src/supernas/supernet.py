"""Weight-sharing supernet with branch groups and dense sub-network extraction.

Every searchable layer owns one or more :class:`BranchGroup` objects. A
group serves a contiguous run of the layer's options and stores its weights
at the widest executed width among them; a candidate of width ``c`` uses the
leading ``c`` output channels and the leading input channels matching the
executed width of the layer that feeds it.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .space import Block, SearchSpace, SearchSpaceError, SubnetEncoding

PRELU_INIT = 0.25


@dataclass(kw_only=True)
class ConvUnit:
    """A 3x3 convolution followed by batch norm and (optionally) a PReLU slope."""

    weight: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    bn_mean: np.ndarray
    bn_var: np.ndarray
    prelu_slope: Optional[Tensor] = None

    @property
    def out_width(self) -> int:
        return self.weight.shape[0]

    def tensors(self) -> Iterator[tuple[str, Tensor, bool]]:
        yield "weight", self.weight, True
        yield "bn_gamma", self.bn_gamma, False
        yield "bn_beta", self.bn_beta, False
        if self.prelu_slope is not None:
            yield "prelu_slope", self.prelu_slope, False

    def buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "bn_mean", self.bn_mean
        yield "bn_var", self.bn_var

    def sliced_copy(self, c_out: int, c_in: Optional[int] = None) -> "ConvUnit":
        c_in = self.weight.shape[1] if c_in is None else c_in
        return ConvUnit(
            weight=Tensor(self.weight.data[:c_out, :c_in].copy(), requires_grad=True),
            bn_gamma=Tensor(self.bn_gamma.data[:c_out].copy(), requires_grad=True),
            bn_beta=Tensor(self.bn_beta.data[:c_out].copy(), requires_grad=True),
            bn_mean=self.bn_mean[:c_out].copy(),
            bn_var=self.bn_var[:c_out].copy(),
            prelu_slope=None if self.prelu_slope is None
            else Tensor(self.prelu_slope.data[:c_out].copy(), requires_grad=True),
        )


@dataclass(kw_only=True)
class BranchGroup(ConvUnit):
    member_options: tuple[int, ...]


@dataclass
class SupernetParams:
    space: SearchSpace
    layers: list[list[BranchGroup]]
    shortcuts: list[Tensor]
    fc_weight: Tensor
    fc_bias: Tensor
    stem: Optional[ConvUnit] = None
    stage: int = 1
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def named_tensors(self) -> Iterator[tuple[str, Tensor, bool]]:
        """(name, tensor, weight-decay flag) for every learnable tensor, in a fixed order."""
        if self.stem is not None:
            for n, t, d in self.stem.tensors():
                yield f"stem.{n}", t, d
        for i, groups in enumerate(self.layers):
            for g, grp in enumerate(groups):
                for n, t, d in grp.tensors():
                    yield f"layer{i + 1}.group{g}.{n}", t, d
        for b, sc in enumerate(self.shortcuts):
            yield f"block{b + 1}.shortcut", sc, True
        yield "fc.weight", self.fc_weight, True
        yield "fc.bias", self.fc_bias, False

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        if self.stem is not None:
            for n, a in self.stem.buffers():
                yield f"stem.{n}", a
        for i, groups in enumerate(self.layers):
            for g, grp in enumerate(groups):
                for n, a in grp.buffers():
                    yield f"layer{i + 1}.group{g}.{n}", a

    def zero_grad(self) -> None:
        for _, t, _ in self.named_tensors():
            t.zero_grad()

    def group(self, layer: int, option: int) -> BranchGroup:
        return self.layers[layer][group_of(layer, option, self)]


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _new_unit(rng, c_out: int, c_in: int, k: int, prelu: bool, cls=ConvUnit, **extra) -> ConvUnit:
    return cls(
        weight=Tensor(_he_normal(rng, (c_out, c_in, k, k)), requires_grad=True),
        bn_gamma=Tensor(np.ones(c_out), requires_grad=True),
        bn_beta=Tensor(np.zeros(c_out), requires_grad=True),
        bn_mean=np.zeros(c_out),
        bn_var=np.ones(c_out),
        prelu_slope=Tensor(np.full(c_out, PRELU_INIT), requires_grad=True) if prelu else None,
        **extra,
    )


def input_max_width(space: SearchSpace, layer: int) -> int:
    """Widest executed input any candidate can feed into ``layer``."""
    if layer == 0:
        return space.stem_width if space.stem_width is not None else space.input_shape[0]
    return space.max_width(layer - 1)


def input_width(space: SearchSpace, enc: SubnetEncoding, layer: int) -> int:
    if layer == 0:
        return space.stem_width if space.stem_width is not None else space.input_shape[0]
    return space.executed_width(enc.choices[layer - 1])


def block_source_width(space: SearchSpace, widths, block: Block) -> int:
    if block.source is None:
        return space.stem_width
    return widths[block.source]


def init_supernet(space: SearchSpace, seed: int) -> SupernetParams:
    """Stage-1 supernet: one group per layer at the layer's maximum executed width."""
    rng = np.random.default_rng(seed)
    prelu = space.activation_kind == "prelu"
    stem = None
    if space.stem_width is not None:
        stem = _new_unit(rng, space.stem_width, space.input_shape[0], 3, prelu)
    layers = []
    for i, spec in enumerate(space.layers):
        unit = _new_unit(rng, space.max_width(i), input_max_width(space, i), 3, prelu,
                         cls=BranchGroup, member_options=spec.options)
        layers.append([unit])
    maxw = [space.max_width(i) for i in range(space.num_layers)]
    shortcuts = [
        Tensor(_he_normal(rng, (maxw[b.conv2], block_source_width(space, maxw, b), 1, 1)), requires_grad=True)
        for b in space.blocks()
    ]
    f = maxw[-1]
    fc_w = Tensor(rng.normal(0.0, np.sqrt(1.0 / f), size=(space.num_classes, f)), requires_grad=True)
    fc_b = Tensor(np.zeros(space.num_classes), requires_grad=True)
    return SupernetParams(space, layers, shortcuts, fc_w, fc_b, stem=stem, stage=1)


def group_of(layer: int, option: int, params: SupernetParams) -> int:
    for g, grp in enumerate(params.layers[layer]):
        if option in grp.member_options:
            return g
    raise SearchSpaceError(f"option {option} is not served by any group of layer {layer + 1}")


def _split_options(options: tuple[int, ...], stage_to: int) -> list[tuple[int, ...]]:
    if stage_to == 3:
        return [(o,) for o in options]
    half = (len(options) + 1) // 2
    return [p for p in (options[:half], options[half:]) if p]


def progressive_split(params: SupernetParams) -> SupernetParams:
    """Duplicate each group's weights into narrower child groups.

    Stage 1 -> 2 halves every layer's option list (the lower half takes the
    extra option when the count is odd); stage 2 -> 3 gives every option its
    own group. Children hold leading-channel copies of the parent tensors,
    so every candidate computes exactly what it computed before.
    """
    if params.stage not in (1, 2):
        raise ValueError(f"cannot split a stage-{params.stage} supernet")
    new = copy.deepcopy(params)
    space = params.space
    target = params.stage + 1
    for i, groups in enumerate(params.layers):
        children = []
        for grp in groups:
            for opts in _split_options(grp.member_options, target):
                c_out = space.executed_width(opts[-1])
                unit = grp.sliced_copy(c_out)
                children.append(BranchGroup(member_options=opts, **vars(unit)))
        new.layers[i] = children
    new.stage = target
    return new


def _bn(x, unit, c, key, mode, bn_stats, collector, momentum, eps):
    gamma = ad.leading_slice(unit.bn_gamma, (c,))
    beta = ad.leading_slice(unit.bn_beta, (c,))
    if bn_stats is not None and mode == "eval":
        mean, var = bn_stats[key]
    else:
        mean, var = unit.bn_mean[:c], unit.bn_var[:c]
    return ad.batchnorm2d(x, gamma, beta, mean, var, mode=mode, momentum=momentum, eps=eps,
                          collector=collector, key=key)


def _act(x, kind, unit, c):
    if kind == "prelu":
        return ad.prelu(x, ad.leading_slice(unit.prelu_slope, (c,)))
    return ad.relu(x)


def _conv_bn(x, unit, c_out, c_in, stride, key, mode, bn_stats, collector, momentum, eps):
    w = ad.leading_slice(unit.weight, (c_out, c_in))
    h = ad.conv2d(x, w, stride=stride, padding=1)
    return _bn(h, unit, c_out, key, mode, bn_stats, collector, momentum, eps)


def _run_network(space, units, widths, shortcuts, fc_w, fc_b, stem, x, mode, bn_stats, collector,
                 momentum, eps, record=None):
    """Shared topology walk; ``units[i]`` and ``widths[i]`` give the conv and its width."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.data.ndim != 4 or x.shape[1:] != tuple(space.input_shape):
        raise ad.ShapeError(f"input batch shape {x.shape} does not match {space.input_shape}")
    kind = space.activation_kind
    common = dict(mode=mode, bn_stats=bn_stats, collector=collector, momentum=momentum, eps=eps)
    h = x
    if stem is not None:
        h = _conv_bn(h, stem, space.stem_width, space.input_shape[0], 1, "stem", **common)
        h = _act(h, kind, stem, space.stem_width)
    else:
        h = _conv_bn(h, units[0], widths[0], space.input_shape[0], 1, "layer1", **common)
        h = _act(h, kind, units[0], widths[0])
        if record is not None:
            record.append(h)
    for b, blk in enumerate(space.blocks()):
        c_src = block_source_width(space, widths, blk)
        c1, c2 = widths[blk.conv1], widths[blk.conv2]
        u1, u2 = units[blk.conv1], units[blk.conv2]
        t = _conv_bn(h, u1, c1, c_src, blk.stride, f"layer{blk.conv1 + 1}", **common)
        t = _act(t, kind, u1, c1)
        if record is not None:
            record.append(t)
        t = _conv_bn(t, u2, c2, c1, 1, f"layer{blk.conv2 + 1}", **common)
        sc = ad.conv2d(h, ad.leading_slice(shortcuts[b], (c2, c_src)), stride=blk.stride, padding=0)
        h = _act(ad.add(t, sc), kind, u2, c2)
        if record is not None:
            record.append(h)
    pooled = ad.global_avg_pool(h)
    return ad.linear(pooled, ad.leading_slice(fc_w, (fc_w.shape[0], widths[-1])), fc_b)


def slice_forward(
    params: SupernetParams,
    enc: SubnetEncoding,
    batch,
    mode: str = "train",
    bn_stats: Optional[dict] = None,
    collector: Optional[ad.BNCollector] = None,
    record: Optional[list] = None,
) -> Tensor:
    """Logits of candidate ``enc`` using weights sliced from the supernet.

    ``bn_stats`` overrides the shared running statistics in eval mode (keys
    ``"layer<i>"``/``"stem"``); ``record``, when given, collects the output
    of every searchable layer in order.
    """
    space = params.space
    space.validate(enc)
    widths = [space.executed_width(c) for c in enc.choices]
    units = [params.group(i, c) for i, c in enumerate(enc.choices)]
    return _run_network(space, units, widths, params.shortcuts, params.fc_weight, params.fc_bias,
                        params.stem, batch, mode, bn_stats, collector, params.bn_momentum,
                        params.bn_eps, record)


@dataclass
class DenseNet:
    """Stand-alone network with unshared, exactly-sized parameters."""

    space: SearchSpace
    widths: tuple[int, ...]
    units: list[ConvUnit]
    shortcuts: list[Tensor]
    fc_weight: Tensor
    fc_bias: Tensor
    stem: Optional[ConvUnit] = None
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def forward(self, batch, mode: str = "train", bn_stats=None, collector=None) -> Tensor:
        return _run_network(self.space, self.units, self.widths, self.shortcuts, self.fc_weight,
                            self.fc_bias, self.stem, batch, mode, bn_stats, collector,
                            self.bn_momentum, self.bn_eps)

    def named_tensors(self) -> Iterator[tuple[str, Tensor, bool]]:
        if self.stem is not None:
            for n, t, d in self.stem.tensors():
                yield f"stem.{n}", t, d
        for i, u in enumerate(self.units):
            for n, t, d in u.tensors():
                yield f"layer{i + 1}.{n}", t, d
        for b, sc in enumerate(self.shortcuts):
            yield f"block{b + 1}.shortcut", sc, True
        yield "fc.weight", self.fc_weight, True
        yield "fc.bias", self.fc_bias, False

    def zero_grad(self) -> None:
        for _, t, _ in self.named_tensors():
            t.zero_grad()

    def num_parameters(self) -> int:
        return sum(t.data.size for _, t, _ in self.named_tensors())


def extract_subnet(params: SupernetParams, enc: SubnetEncoding) -> DenseNet:
    """Copy the weights candidate ``enc`` inherits into a self-contained network."""
    space = params.space
    space.validate(enc)
    widths = tuple(space.executed_width(c) for c in enc.choices)
    units = []
    for i, c in enumerate(enc.choices):
        unit = params.group(i, c).sliced_copy(widths[i], input_width(space, enc, i))
        units.append(unit)
    shortcuts = []
    for b, blk in enumerate(space.blocks()):
        c_src = block_source_width(space, widths, blk)
        shortcuts.append(Tensor(params.shortcuts[b].data[:widths[blk.conv2], :c_src].copy(), requires_grad=True))
    stem = params.stem.sliced_copy(space.stem_width) if params.stem is not None else None
    return DenseNet(
        space=space,
        widths=widths,
        units=units,
        shortcuts=shortcuts,
        fc_weight=Tensor(params.fc_weight.data[:, :widths[-1]].copy(), requires_grad=True),
        fc_bias=Tensor(params.fc_bias.data.copy(), requires_grad=True),
        stem=stem,
        bn_momentum=params.bn_momentum,
        bn_eps=params.bn_eps,
    )


def init_dense(space: SearchSpace, enc: SubnetEncoding, seed: int) -> DenseNet:
    """Freshly initialized stand-alone network for ``enc``, at the space's executed widths."""
    space.validate(enc)
    rng = np.random.default_rng(seed)
    prelu = space.activation_kind == "prelu"
    widths = tuple(space.executed_width(c) for c in enc.choices)
    stem = None
    if space.stem_width is not None:
        stem = _new_unit(rng, space.stem_width, space.input_shape[0], 3, prelu)
    units = []
    for i in range(space.num_layers):
        c_in = space.input_shape[0] if (i == 0 and stem is None) else (space.stem_width if i == 0 else widths[i - 1])
        units.append(_new_unit(rng, widths[i], c_in, 3, prelu))
    shortcuts = [
        Tensor(_he_normal(rng, (widths[b.conv2], block_source_width(space, widths, b), 1, 1)), requires_grad=True)
        for b in space.blocks()
    ]
    f = widths[-1]
    fc_w = Tensor(rng.normal(0.0, np.sqrt(1.0 / f), size=(space.num_classes, f)), requires_grad=True)
    fc_b = Tensor(np.zeros(space.num_classes), requires_grad=True)
    return DenseNet(space, widths, units, shortcuts, fc_w, fc_b, stem=stem)
