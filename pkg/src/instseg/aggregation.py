"""Superpoint feature aggregation: scatter pooling plus an adaptive variant.

Plain scatter pooling compresses each superpoint's points with max or mean.
The adaptive path scores every point by how far it sits from its
superpoint's pooled feature, softmax-normalizes the scores within each
superpoint, and pools with those weights instead, fusing the max- and
mean-anchored results with a single linear map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ConfigError,
    ContractError,
    concat,
    exp,
    gather_rows,
    mul,
    segment_max,
    segment_mean,
    segment_sum,
    sub,
)
from .layers import Linear, Mlp, linear_init, mlp_init


@dataclass
class SuperpointPartition:
    """Dense point -> superpoint index plus cached member lists."""

    index: np.ndarray  # (n,) intp in [0, m)
    count: int         # m

    @classmethod
    def from_index(cls, index, count=None):
        index = np.asarray(index, dtype=np.intp)
        if index.ndim != 1 or index.size == 0:
            raise ContractError(f"partition index must be 1-D nonempty, got {index.shape}")
        m = int(index.max()) + 1 if count is None else int(count)
        occupancy = np.bincount(index, minlength=m)
        if index.min() < 0 or len(occupancy) > m or np.any(occupancy == 0):
            raise ContractError("partition ids must be dense in [0, m) with no empty superpoint")
        return cls(index=index, count=m)

    @classmethod
    def from_scene(cls, scene):
        return cls.from_index(scene.superpoint_id)

    @property
    def sizes(self):
        return np.bincount(self.index, minlength=self.count)

    @property
    def n_points(self):
        return self.index.shape[0]


def scatter_pool(features, part, mode):
    """Pool (n, c) point features to (m, c) per-superpoint rows."""
    if mode == "max":
        return segment_max(features, part.index, part.count)
    if mode == "mean":
        return segment_mean(features, part.index, part.count)
    raise ConfigError(f"unknown pool mode {mode!r}")


def broadcast_to_points(sp_features, part):
    """Expand (m, c) superpoint rows back to their (n, c) member points."""
    if sp_features.shape[0] != part.count:
        raise ContractError(
            f"superpoint rows {sp_features.shape[0]} != partition count {part.count}"
        )
    return gather_rows(sp_features, part.index)


def superpoint_softmax(scores, part):
    """Softmax of (n, 1) scores within each superpoint (max-shifted)."""
    shift = scores.data.copy()
    m = np.full(part.count, -np.inf)
    np.maximum.at(m, part.index, shift[:, 0])
    e = exp(sub(scores, m[part.index][:, None]))  # constant shift per superpoint
    denom = segment_sum(e, part.index, part.count)  # (m, 1)
    return mul(e, gather_rows(denom, part.index) ** -1.0)


@dataclass
class AggregationParams:
    mlp_max: Mlp    # c -> c -> 1 point scores against the max-pooled anchor
    mlp_mean: Mlp   # c -> c -> 1 against the mean-pooled anchor
    fuse: Linear    # 2c -> c


def aggregation_init(rng, width):
    return AggregationParams(
        mlp_max=mlp_init(rng, (width, width, 1)),
        mlp_mean=mlp_init(rng, (width, width, 1)),
        fuse=linear_init(rng, 2 * width, width),
    )


def adaptive_aggregate(features, part, params):
    """Adaptive superpoint pooling of (n, c) features to (m, c).

    Each anchor (max- and mean-pooled feature) is broadcast back to points;
    the difference to every member is scored by a small MLP, the scores are
    softmax-normalized inside each superpoint, and members are summed with
    those weights. The two weighted results are fused by one linear layer.
    """
    pooled = []
    for mode, mlp in (("max", params.mlp_max), ("mean", params.mlp_mean)):
        anchor = scatter_pool(features, part, mode)              # (m, c)
        offset = sub(broadcast_to_points(anchor, part), features)  # (n, c)
        weights = superpoint_softmax(mlp(offset), part)          # (n, 1)
        pooled.append(segment_sum(mul(weights, features), part.index, part.count))
    return params.fuse(concat(pooled, axis=1))                   # (m, c)
