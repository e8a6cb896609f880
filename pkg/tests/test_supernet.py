import copy

import numpy as np
import pytest

from supernas import autodiff as ad
from supernas.autodiff import Tensor
from supernas.space import SubnetEncoding, build_search_space, enhance_candidates
from supernas.supernet import (
    extract_subnet,
    group_of,
    init_supernet,
    progressive_split,
    slice_forward,
)


def random_encodings(space, n, seed):
    rng = np.random.default_rng(seed)
    return [SubnetEncoding(tuple(int(rng.choice(l.options)) for l in space.layers)) for _ in range(n)]


def perturbed_supernet(space, seed):
    """Fresh supernet with non-trivial BN affine params, running stats and slopes."""
    params = init_supernet(space, seed)
    rng = np.random.default_rng(seed + 1)
    for _, t, _ in params.named_tensors():
        if t.data.ndim == 1:
            t.data[...] = t.data + rng.normal(scale=0.2, size=t.shape)
    for _, buf in params.named_buffers():
        buf[...] = rng.uniform(0.5, 1.5, size=buf.shape)
    return params


@pytest.fixture(params=["base", "enhanced"])
def spaces(request, toy_space):
    return toy_space if request.param == "base" else enhance_candidates(toy_space)


def test_slice_matches_dense_extraction(spaces):
    params = perturbed_supernet(spaces, 3)
    x = np.random.default_rng(0).normal(size=(4, 3, 8, 8))
    worst = 0.0
    for enc in random_encodings(spaces, 50, 7):
        for mode in ("eval", "train"):
            p = copy.deepcopy(params) if mode == "train" else params
            a = slice_forward(p, enc, Tensor(x), mode=mode).data
            b = extract_subnet(params, enc).forward(Tensor(x), mode=mode).data
            worst = max(worst, float(np.abs(a - b).max()))
    assert worst < 1e-9


def test_odd_layer_space_slices_match():
    space = build_search_space([[2, 4], [2, 3, 4], [1, 4], [2, 4], [3, 4]], "prelu", 3, (2, 6, 6))
    assert space.has_searchable_stem
    params = perturbed_supernet(space, 0)
    x = np.random.default_rng(1).normal(size=(3, 2, 6, 6))
    for enc in random_encodings(space, 20, 2):
        a = slice_forward(params, enc, Tensor(x), mode="eval").data
        b = extract_subnet(params, enc).forward(Tensor(x), mode="eval").data
        assert np.abs(a - b).max() < 1e-9


def test_split_is_function_preserving(spaces):
    params = perturbed_supernet(spaces, 5)
    x = np.random.default_rng(2).normal(size=(4, 3, 8, 8))
    encs = random_encodings(spaces, 50, 11)
    before = [slice_forward(params, e, Tensor(x), mode="eval").data for e in encs]
    s2 = progressive_split(params)
    s3 = progressive_split(s2)
    for p in (s2, s3):
        for e, ref in zip(encs, before):
            assert np.array_equal(slice_forward(p, e, Tensor(x), mode="eval").data, ref)
        # train-mode (batch statistics) outputs are preserved too
        for e in encs[:10]:
            a = slice_forward(copy.deepcopy(params), e, Tensor(x), mode="train").data
            b = slice_forward(copy.deepcopy(p), e, Tensor(x), mode="train").data
            assert np.array_equal(a, b)


def test_split_group_structure(toy_space):
    params = init_supernet(toy_space, 0)
    assert [[g.member_options for g in gs] for gs in params.layers][0] == [(4, 8, 12, 16)]
    s2 = progressive_split(params)
    assert [g.member_options for g in s2.layers[0]] == [(4, 8), (12, 16)]
    assert [g.out_width for g in s2.layers[0]] == [8, 16]
    s3 = progressive_split(s2)
    assert [g.member_options for g in s3.layers[0]] == [(4,), (8,), (12,), (16,)]
    assert [g.out_width for g in s3.layers[0]] == [4, 8, 12, 16]
    with pytest.raises(ValueError):
        progressive_split(s3)
    # the source is untouched
    assert params.stage == 1 and len(params.layers[0]) == 1


def test_split_odd_option_count_favours_lower_half():
    space = build_search_space([[2, 4, 6]] * 2, num_classes=2, input_shape=(1, 4, 4))
    s2 = progressive_split(init_supernet(space, 0))
    assert [g.member_options for g in s2.layers[0]] == [(2, 4), (6,)]


def test_enhanced_split_uses_proxy_widths(toy_space):
    s3 = progressive_split(progressive_split(init_supernet(enhance_candidates(toy_space), 0)))
    assert [g.out_width for g in s3.layers[0]] == [5, 9, 12, 16]


def test_split_groups_train_independently(toy_space):
    s2 = progressive_split(init_supernet(toy_space, 0))
    x = np.random.default_rng(0).normal(size=(2, 3, 8, 8))
    s2.zero_grad()
    enc = SubnetEncoding((4, 4, 4, 4, 4, 4))
    ad.tensor_sum(slice_forward(s2, enc, Tensor(x))).backward()
    small, large = s2.layers[2]
    assert np.any(small.weight.grad != 0)
    assert np.all(large.weight.grad == 0)
    assert group_of(2, 12, s2) == 1


def test_slice_gradient_touches_only_leading_channels(toy_space):
    params = init_supernet(toy_space, 0)
    params.zero_grad()
    x = np.random.default_rng(0).normal(size=(2, 3, 8, 8))
    ad.tensor_sum(slice_forward(params, SubnetEncoding((8, 4, 12, 4, 8, 4)), Tensor(x))).backward()
    g = params.layers[0][0].weight.grad
    assert np.any(g[:8] != 0) and np.all(g[8:] == 0)
    assert np.all(params.fc_weight.grad[:, 4:] == 0)


def test_prelu_supernet_has_slopes(toy_space):
    params = init_supernet(enhance_candidates(toy_space), 0)
    assert np.all(params.layers[0][0].prelu_slope.data == 0.25)
    assert params.layers[0][0].out_width == 16


def test_init_is_deterministic(toy_space):
    a, b = init_supernet(toy_space, 9), init_supernet(toy_space, 9)
    for (n1, t1, _), (n2, t2, _) in zip(a.named_tensors(), b.named_tensors()):
        assert n1 == n2 and np.array_equal(t1.data, t2.data)


def test_wrong_input_shape_raises(toy_space):
    params = init_supernet(toy_space, 0)
    with pytest.raises(ad.ShapeError):
        slice_forward(params, toy_space.max_encoding(), Tensor(np.zeros((1, 3, 6, 6))))
