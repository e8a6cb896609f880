"""What the candidate enhancement and the progressive split do to a supernet.

No training here; the point is to look at widths, groups and outputs.
"""
import numpy as np

from supernas import (
    SubnetEncoding,
    Tensor,
    build_search_space,
    count_subnets,
    enhance_candidates,
    init_supernet,
    no_grad,
    progressive_split,
    resnet20_search_space,
    slice_forward,
)

big = resnet20_search_space()
print(f"ResNet20 channel space: {count_subnets(big):,} candidates over {big.num_layers} layers")

space = build_search_space([[4, 8, 12, 16]] * 6, "relu", num_classes=5, input_shape=(3, 8, 8), stem_width=16)
enh = enhance_candidates(space)
print("nominal options, layer 1:", space.layers[0].options)
print("executed widths, layer 1:", enh.executed_options(0))
print("activation:", space.activation_kind, "->", enh.activation_kind)
print("candidate count unchanged:", count_subnets(space) == count_subnets(enh))

params = init_supernet(enh, seed=0)
x = Tensor(np.random.default_rng(1).normal(size=(4, 3, 8, 8)))
enc = SubnetEncoding((8, 4, 16, 12, 8, 16))

# Each split only reorganizes weights into more groups; the function of
# every candidate stays bit-identical until fine-tuning moves it.
with no_grad():
    before = slice_forward(params, enc, x, mode="train").data
    for _ in range(2):
        params = progressive_split(params)
        groups = [[list(g.member_options) for g in layer] for layer in params.layers]
        after = slice_forward(params, enc, x, mode="train").data
        print(f"stage {params.stage}: layer-1 groups {groups[0]}, max |diff| {np.abs(after - before).max():.1e}")
