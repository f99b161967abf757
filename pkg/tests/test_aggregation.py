"""Scatter pooling and adaptive superpoint aggregation."""

import numpy as np
import pytest

from instseg import autodiff as ad
from instseg.aggregation import (
    AggregationParams,
    SuperpointPartition,
    adaptive_aggregate,
    aggregation_init,
    broadcast_to_points,
    scatter_pool,
    superpoint_softmax,
)
from instseg.autodiff import ConfigError, ContractError, Tensor, grad_check
from instseg.layers import named_parameters


def scatter_oracle(x, seg, m, mode):
    out = np.zeros((m, x.shape[1]))
    for s in range(m):
        rows = [i for i in range(len(seg)) if seg[i] == s]
        for c in range(x.shape[1]):
            vals = [x[i, c] for i in rows]
            out[s, c] = max(vals) if mode == "max" else sum(vals) / len(vals)
    return out


def random_partition(rng, n, m):
    seg = rng.integers(0, m, size=n)
    seg[:m] = np.arange(m)  # ensure occupancy
    return SuperpointPartition.from_index(rng.permutation(seg))


def test_partition_rejects_gaps():
    with pytest.raises(ContractError):
        SuperpointPartition.from_index(np.array([0, 0, 2]))
    with pytest.raises(ContractError):
        SuperpointPartition.from_index(np.array([0, 1, 2]), count=4)


def test_scatter_pool_single_superpoint():
    part = SuperpointPartition.from_index(np.zeros(3, dtype=int))
    x = Tensor(np.array([[1.0, -2.0], [5.0, 0.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(scatter_pool(x, part, "max").data, [[5.0, 4.0]])
    np.testing.assert_allclose(scatter_pool(x, part, "mean").data, [[3.0, 2.0 / 3.0]])


def test_scatter_pool_matches_oracle_many():
    rng = np.random.default_rng(0)
    for _ in range(100):
        part = random_partition(rng, 50, 7)
        x = rng.standard_normal((50, 8))
        for mode in ("max", "mean"):
            got = scatter_pool(Tensor(x), part, mode).data
            np.testing.assert_allclose(got, scatter_oracle(x, part.index, 7, mode), atol=1e-10)


def test_scatter_pool_unknown_mode():
    part = SuperpointPartition.from_index(np.zeros(2, dtype=int))
    with pytest.raises(ConfigError):
        scatter_pool(Tensor(np.zeros((2, 2))), part, "sum")


def test_broadcast_expands_rows():
    part = SuperpointPartition.from_index(np.array([0, 1, 1, 0]))
    sp = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = broadcast_to_points(sp, part).data
    np.testing.assert_array_equal(out, [[1, 2], [3, 4], [3, 4], [1, 2]])
    with pytest.raises(ContractError):
        broadcast_to_points(Tensor(np.zeros((3, 2))), part)


def test_superpoint_softmax_sums_to_one():
    rng = np.random.default_rng(1)
    part = random_partition(rng, 30, 5)
    # extreme scores must stay stable; far-from-max entries may underflow to 0
    w = superpoint_softmax(Tensor(rng.uniform(-1e3, 1e3, size=(30, 1))), part).data
    sums = np.zeros(5)
    np.add.at(sums, part.index, w[:, 0])
    np.testing.assert_allclose(sums, np.ones(5), atol=1e-9)
    assert np.all(w >= 0)
    w2 = superpoint_softmax(Tensor(rng.uniform(-2.0, 2.0, size=(30, 1))), part).data
    assert np.all(w2 > 0)


def test_superpoint_softmax_uniform_for_constant_scores():
    part = SuperpointPartition.from_index(np.array([0, 0, 0, 1]))
    w = superpoint_softmax(Tensor(np.full((4, 1), 2.5)), part).data
    np.testing.assert_allclose(w[:, 0], [1 / 3, 1 / 3, 1 / 3, 1.0], atol=1e-12)


def _zeroed_params(width):
    rng = np.random.default_rng(0)
    params = aggregation_init(rng, width)
    for mlp in (params.mlp_max, params.mlp_mean):
        for lyr in mlp.layers:
            lyr.w.data[...] = 0.0
            lyr.b.data[...] = 0.0
    return params


def test_adaptive_aggregate_zero_mlps_reduce_to_mean():
    # zero score MLPs give uniform weights, so both branches mean-pool
    rng = np.random.default_rng(2)
    part = random_partition(rng, 12, 3)
    x = Tensor(rng.standard_normal((12, 4)))
    params = _zeroed_params(4)
    got = adaptive_aggregate(x, part, params).data
    mean = scatter_pool(x, part, "mean").data
    want = np.concatenate([mean, mean], axis=1) @ params.fuse.w.data + params.fuse.b.data
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_adaptive_aggregate_singleton_superpoints_pass_through():
    rng = np.random.default_rng(3)
    part = SuperpointPartition.from_index(np.arange(5))
    x = Tensor(rng.standard_normal((5, 4)))
    params = aggregation_init(rng, 4)
    got = adaptive_aggregate(x, part, params).data
    want = np.concatenate([x.data, x.data], axis=1) @ params.fuse.w.data + params.fuse.b.data
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_adaptive_aggregate_equivariant_to_point_order():
    rng = np.random.default_rng(4)
    part = random_partition(rng, 20, 4)
    x = rng.standard_normal((20, 6))
    params = aggregation_init(rng, 6)
    base = adaptive_aggregate(Tensor(x), part, params).data
    perm = rng.permutation(20)
    part2 = SuperpointPartition.from_index(part.index[perm])
    shuffled = adaptive_aggregate(Tensor(x[perm]), part2, params).data
    np.testing.assert_allclose(shuffled, base, atol=1e-10)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_adaptive_aggregate_finite_differences(seed):
    rng = np.random.default_rng(seed)
    part = random_partition(rng, 12, 3)
    x = Tensor(rng.standard_normal((12, 4)), requires_grad=True)
    params = aggregation_init(rng, 4)
    w = rng.standard_normal((3, 4))
    leaves = {"x": x, **named_parameters(params, "agg")}

    def fn():
        return ad.mean(adaptive_aggregate(x, part, params) * w)

    report = grad_check(fn, leaves, eps=1e-5, tol=1e-6)
    assert report.passed, report.to_dict()


def test_aggregation_params_registry_complete():
    params = aggregation_init(np.random.default_rng(0), 8)
    names = set(named_parameters(params))
    # 2 layers x (w, b) per mlp, plus fuse w and b
    assert len(names) == 2 * 4 + 2
    assert isinstance(params, AggregationParams)
