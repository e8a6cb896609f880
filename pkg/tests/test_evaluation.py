import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from supernas.autodiff import Tensor
from supernas.data import synth_dataset
from supernas.evaluation import (
    AccuracyRecord,
    PairingError,
    ZeroVarianceError,
    calibration_batches,
    eval_accuracy,
    evaluate_supernet,
    kendall_tau_b,
    pearson,
    rank_correlations,
    read_accuracy_table,
    recalibrate_bn,
    spearman,
    write_accuracy_table,
)
from supernas.space import SubnetEncoding
from supernas.supernet import init_supernet, slice_forward

TOL = 1e-12


# brute-force O(n^2) references -------------------------------------------------

def pearson_pairs(x, y):
    n = len(x)
    sxy = sxx = syy = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            dx, dy = x[i] - x[j], y[i] - y[j]
            sxy += dx * dy
            sxx += dx * dx
            syy += dy * dy
    return sxy / math.sqrt(sxx * syy)


def average_ranks(x):
    n = len(x)
    return [1 + sum(x[j] < x[i] for j in range(n)) + 0.5 * sum(x[j] == x[i] for j in range(n) if j != i)
            for i in range(n)]


def spearman_pairs(x, y):
    return pearson_pairs(average_ranks(x), average_ranks(y))


def kendall_pairs(x, y):
    n = len(x)
    conc = disc = tx = ty = 0
    for i in range(n):
        for j in range(i + 1, n):
            a = np.sign(x[i] - x[j])
            b = np.sign(y[i] - y[j])
            if a == 0:
                tx += 1
            if b == 0:
                ty += 1
            if a * b > 0:
                conc += 1
            elif a * b < 0:
                disc += 1
    n0 = n * (n - 1) // 2
    return (conc - disc) / math.sqrt((n0 - tx) * (n0 - ty))


def random_vectors(count=100, seed=0):
    rng = np.random.default_rng(seed)
    for k in range(count):
        n = int(rng.integers(3, 201))
        if k % 3 == 0:
            # integer-valued draws produce ties
            x = rng.integers(0, 6, size=n).astype(float)
            y = rng.integers(0, 6, size=n).astype(float)
        else:
            x = rng.normal(size=n)
            y = 0.6 * x + rng.normal(size=n)
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            continue
        yield x, y


def test_correlations_match_brute_force():
    checked = 0
    for x, y in random_vectors():
        xl, yl = x.tolist(), y.tolist()
        assert abs(pearson(x, y) - pearson_pairs(xl, yl)) < TOL
        assert abs(spearman(x, y) - spearman_pairs(xl, yl)) < TOL
        assert abs(kendall_tau_b(x, y) - kendall_pairs(xl, yl)) < TOL
        checked += 1
    assert checked >= 95


def test_pearson_affine_invariance():
    rng = np.random.default_rng(1)
    for x, y in random_vectors(100, 2):
        a = rng.uniform(0.1, 10) * rng.choice([-1, 1])
        b = rng.normal() * 5
        assert abs(abs(pearson(a * x + b, y)) - abs(pearson(x, y))) < TOL


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(-1000, 1000), st.integers(-1000, 1000)), min_size=3, max_size=40))
def test_correlation_properties(pairs):
    x = np.array([p[0] for p in pairs], dtype=float)
    y = np.array([p[1] for p in pairs], dtype=float)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return
    for f in (pearson, spearman, kendall_tau_b):
        r = f(x, y)
        assert -1.0 <= r <= 1.0
        assert abs(r - f(y, x)) < 1e-9
    # rank statistics ignore strictly monotone maps (cubes of integers stay exact)
    assert spearman(x, y) == spearman(x ** 3, y)
    assert kendall_tau_b(x, y) == kendall_tau_b(x ** 3, y)


def test_known_values():
    assert pearson([1, 2, 3], [2, 4, 6]) == 1.0
    assert pearson([1, 2, 3], [3, 2, 1]) == -1.0
    assert kendall_tau_b([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(2 / 3, abs=TOL)


def test_zero_variance_refused():
    with pytest.raises(ZeroVarianceError):
        pearson([0.5, 0.5], [0.1, 0.9])
    with pytest.raises(ZeroVarianceError):
        kendall_tau_b([1, 2], [3, 3])


def rec(enc, acc, source, seed=0):
    return AccuracyRecord(SubnetEncoding.parse(enc), acc, source, seed)


def test_rank_report_pairs_and_averages():
    recs = [rec("4-8", 0.2, "supernet"), rec("8-8", 0.4, "supernet"), rec("8-16", 0.5, "supernet"),
            rec("4-8", 0.6, "standalone", 0), rec("4-8", 0.8, "standalone", 1),
            rec("8-8", 0.75, "standalone"), rec("8-16", 0.9, "standalone")]
    rep = rank_correlations(recs)
    assert rep.n == 3
    assert [str(e) for e in rep.encodings] == ["4-8", "8-16", "8-8"]
    assert rep.standalone == pytest.approx([0.7, 0.9, 0.75], abs=1e-15)
    assert rep.pearson_abs == abs(pearson(rep.standalone, [0.2, 0.5, 0.4]))
    assert rep.scatter()[0] == (rep.standalone[0], 0.2)


def test_rank_report_names_orphans():
    with pytest.raises(PairingError) as err:
        rank_correlations([rec("4-8", 0.2, "supernet"), rec("8-8", 0.3, "standalone")])
    assert err.value.orphans == ["4-8", "8-8"]


def test_accuracy_table_round_trip(tmp_path):
    recs = [rec("4-8-12", 1 / 3, "supernet", 2), rec("16-8-4", 0.125, "standalone", 0)]
    write_accuracy_table(recs, tmp_path / "t.csv")
    assert read_accuracy_table(tmp_path / "t.csv") == recs


def test_accuracy_record_validation():
    with pytest.raises(ValueError):
        rec("4", 1.5, "supernet")
    with pytest.raises(ValueError):
        rec("4", 0.5, "oracle")


@pytest.fixture(scope="module")
def small_data():
    return synth_dataset(3, 10, 5, (3, 8, 8))


def test_recalibration_from_one_batch_reproduces_batch_statistics(toy_space, small_data):
    params = init_supernet(toy_space, 0)
    x = small_data.calib.normalize(small_data.calib.images)
    enc = SubnetEncoding((8, 4, 12, 16, 4, 8))
    stats_ = recalibrate_bn(params, enc, [x])
    a = slice_forward(params, enc, Tensor(x), mode="eval", bn_stats=stats_).data
    b = slice_forward(copy.deepcopy(params), enc, Tensor(x), mode="train").data
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)


def test_recalibration_leaves_params_untouched(toy_space, small_data):
    params = init_supernet(toy_space, 0)
    before = copy.deepcopy(params)
    batches = calibration_batches(small_data.calib, 3, 4)
    recalibrate_bn(params, toy_space.max_encoding(), batches)
    for (_, a), (_, b) in zip(params.named_buffers(), before.named_buffers()):
        assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        recalibrate_bn(params, toy_space.max_encoding(), [])


def test_stem_stats_pool_all_calibration_samples(toy_space, small_data):
    from supernas import autodiff as ad

    params = init_supernet(toy_space, 0)
    batches = calibration_batches(small_data.calib, 5, 3)
    stats_ = recalibrate_bn(params, toy_space.min_encoding(), batches)
    conv = ad.conv2d(Tensor(np.concatenate(batches)), params.stem.weight, 1, 1).data
    np.testing.assert_allclose(stats_["stem"][0], conv.mean(axis=(0, 2, 3)), rtol=1e-10)
    np.testing.assert_allclose(stats_["stem"][1], conv.var(axis=(0, 2, 3)), rtol=1e-10)


def test_evaluate_supernet_records(toy_space, small_data):
    params = init_supernet(toy_space, 0)
    encs = [toy_space.min_encoding(), toy_space.max_encoding()]
    recs = evaluate_supernet(params, encs, small_data, calib_batches=2, calib_batch_size=8, seed=4)
    assert [r.encoding for r in recs] == encs
    assert all(r.source == "supernet" and r.seed == 4 and 0 <= r.accuracy <= 1 for r in recs)
    assert recs[0].accuracy == eval_accuracy(params, encs[0], small_data.val,
                                             recalibrate_bn(params, encs[0], calibration_batches(small_data.calib, 2, 8)))
