"""Pairwise box geometry as an attention bias.

Each query's current mask selects superpoints whose member points define an
axis-aligned box. For every query pair the six relation channels encode
center offsets (normalized by the source box size, log-damped) and extent
ratios (log). A sinusoidal lift plus one linear map turns the six channels
into a per-head additive bias for self-attention over the queries.

Boxes are decoded from thresholded masks, so they enter as constants: the
bias trains its projection, not the masks that produced the geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ContractError,
    ShapeError,
    Tensor,
    add,
    reshape,
    sincos_encode,
    swapaxes,
)
from .layers import Linear, LayerNorm, MultiheadAttention, attention_init, linear_init, norm_init

EXTENT_FLOOR = 1e-4  # minimum box edge length (meters)


@dataclass
class BBox:
    center: np.ndarray  # (3,)
    extent: np.ndarray  # (3,) edge lengths, >= EXTENT_FLOOR


def mask_to_bbox(mask_prob, part, positions, query_pos, threshold=0.5):
    """Axis-aligned bounds of the points inside a query's thresholded mask.

    Args:
        mask_prob: (m,) superpoint mask probabilities for one query.
        part: SuperpointPartition over the scene points.
        positions: (n, 3) point positions.
        query_pos: (3,) fallback center when no superpoint passes threshold.
        threshold: probability cutoff.

    Returns:
        BBox with extent floored at EXTENT_FLOOR; an empty selection yields
        a floor-sized box at the query position.
    """
    mask_prob = np.asarray(mask_prob, dtype=np.float64)
    if mask_prob.shape != (part.count,):
        raise ShapeError(f"mask shape {mask_prob.shape} != ({part.count},)")
    selected = mask_prob > threshold
    member = selected[part.index]  # (n,)
    if not member.any():
        return BBox(center=np.asarray(query_pos, dtype=np.float64).copy(),
                    extent=np.full(3, EXTENT_FLOOR))
    pts = positions[member]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return BBox(center=(lo + hi) / 2.0, extent=np.maximum(hi - lo, EXTENT_FLOOR))


def boxes_from_prediction(mask_probs, part, positions, centers, threshold=0.5):
    """One BBox per query row of a (k, m) mask probability matrix."""
    return [
        mask_to_bbox(mask_probs[i], part, positions, centers[i], threshold)
        for i in range(mask_probs.shape[0])
    ]


def relation_tensor(boxes):
    """Six pairwise geometry channels for every ordered box pair.

    out[i, j] = [log(|dx|/l_i + 1), log(|dy|/w_i + 1), log(|dz|/h_i + 1),
                 log(l_i/l_j), log(w_i/w_j), log(h_i/h_j)]
    where (dx, dy, dz) is center_i - center_j and (l, w, h) = extent_i.
    The diagonal is exactly zero.
    """
    if not boxes:
        raise ContractError("relation_tensor needs at least one box")
    centers = np.stack([b.center for b in boxes])  # (k, 3)
    extents = np.stack([b.extent for b in boxes])  # (k, 3)
    if np.any(extents < EXTENT_FLOOR - 1e-15):
        raise ContractError("box extents must be floored at EXTENT_FLOOR")
    delta = np.abs(centers[:, None, :] - centers[None, :, :])  # (k, k, 3)
    offset = np.log1p(delta / extents[:, None, :])
    ratio = np.log(extents[:, None, :] / extents[None, :, :])
    return np.concatenate([offset, ratio], axis=2)  # (k, k, 6)


@dataclass
class RelationAttentionParams:
    attn: MultiheadAttention
    bias_proj: Linear  # 6 * sincos_d -> heads
    norm: LayerNorm


def relation_attention_init(rng, width, heads, sincos_d):
    return RelationAttentionParams(
        attn=attention_init(rng, width, heads),
        bias_proj=linear_init(rng, 6 * sincos_d, heads),
        norm=norm_init(width),
    )


def relation_bias(rel, params, sincos_d, base=10000.0):
    """Project the (k, k, 6) relation tensor to per-head logits (h, k, k)."""
    k = rel.shape[0]
    lifted = sincos_encode(Tensor(rel), d=sincos_d, base=base)  # (k, k, 6d)
    flat = reshape(lifted, (k * k, 6 * sincos_d))
    heads = params.bias_proj(flat)  # (k*k, h)
    return swapaxes(swapaxes(reshape(heads, (k, k, -1)), 1, 2), 0, 1)  # (h, k, k)


def relation_attention(queries, boxes, params, sincos_d, record=None):
    """Self-attention over (k, c) queries with an additive geometry bias.

    Residual connection and layer norm wrap the attention (post-norm). Pass
    ``boxes=None`` to run bias-free self-attention with the same weights.
    """
    bias = None
    if boxes is not None:
        if len(boxes) != queries.shape[0]:
            raise ContractError(f"{len(boxes)} boxes for {queries.shape[0]} queries")
        bias = relation_bias(relation_tensor(boxes), params, sincos_d)
    attended = params.attn(queries, queries, queries, bias=bias, record=record)
    return params.norm(add(queries, attended))
