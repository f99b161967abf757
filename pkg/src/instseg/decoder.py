"""Query decoder: point encoding, gated cross-attention, per-layer heads.

A fixed set of learnable queries (content vector + position in the scene's
unit cube) attends over superpoint features. Each layer gates cross-attention
by the previous layer's predicted masks, runs geometry-biased self-attention
among the queries, updates query positions by a predicted world-space delta,
and re-predicts. Every ``refine_every`` layers the superpoint features are
refined by attending back over the queries (a second path through the
decoder), which also provides the feature taps for contrastive supervision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregation import (
    AggregationParams,
    SuperpointPartition,
    adaptive_aggregate,
    aggregation_init,
    scatter_pool,
)
from .autodiff import Tensor, add, clip, matmul, reshape, sigmoid, sincos_encode, transpose
from .config import DecoderConfig
from .layers import (
    Linear,
    LayerNorm,
    Mlp,
    MultiheadAttention,
    attention_init,
    linear_init,
    mlp_init,
    norm_init,
)
from .relation import RelationAttentionParams, boxes_from_prediction, relation_attention, relation_attention_init
from .scene import scene_digest

ENC_CHANNELS = 9  # unit position, color, normal; absent channels zero-filled


@dataclass
class PreparedScene:
    """Per-scene constants shared by every forward pass."""

    scene: object
    partition: SuperpointPartition
    enc_input: np.ndarray  # (n, 9)
    centroids: np.ndarray  # (m, 3) superpoint centroid positions
    p_min: np.ndarray      # (3,)
    p_max: np.ndarray      # (3,)
    digest: str


def prepare_scene(scene):
    scene.validate()
    part = SuperpointPartition.from_scene(scene)
    p_min, p_max = scene.bounds()
    extent = np.maximum(p_max - p_min, 1e-9)
    feats = np.zeros((scene.n_points, ENC_CHANNELS))
    feats[:, 0:3] = (scene.positions - p_min) / extent
    if scene.colors is not None:
        feats[:, 3:6] = scene.colors
    if scene.normals is not None:
        feats[:, 6:9] = scene.normals
    centroids = np.zeros((part.count, 3))
    np.add.at(centroids, part.index, scene.positions)
    centroids /= part.sizes[:, None]
    return PreparedScene(
        scene=scene,
        partition=part,
        enc_input=feats,
        centroids=centroids,
        p_min=p_min,
        p_max=p_max,
        digest=scene_digest(scene),
    )


# -- parameters ---------------------------------------------------------------


@dataclass
class RefineParams:
    cross: MultiheadAttention  # superpoints query the instance queries
    norm1: LayerNorm
    ffn: Mlp
    norm2: LayerNorm


@dataclass
class DecoderLayerParams:
    cross: MultiheadAttention
    cross_norm: LayerNorm
    rel: RelationAttentionParams
    ffn: Mlp
    ffn_norm: LayerNorm
    pos_delta: Linear  # C -> 3 world-space position update


@dataclass
class HeadParams:
    category: Linear    # C -> category_count + 1 (last slot: no-object)
    mask_embed: Linear  # C -> C, dotted with superpoint features
    score: Linear       # C -> 1 mask quality estimate


@dataclass
class DecoderParams:
    encoder: Mlp
    agg: AggregationParams
    pos_embed: Linear  # 3 * sincos_d -> C shared world-position embedding
    query_content: Tensor   # (K, C)
    query_pos_unit: Tensor  # (K, 3) in the unit cube
    layers: list[DecoderLayerParams]
    refine_stages: list[RefineParams]
    heads: HeadParams


def build_decoder_params(cfg: DecoderConfig, seed):
    """Construct all parameters for a decoder of the given topology.

    Construction order is fixed, so a seed fully determines every value.
    Ablation flags do not change what is built, only what runs.
    """
    cfg.validate()
    rng = np.random.default_rng([seed, 0xD0])
    c, k = cfg.width, cfg.queries
    layers = []
    for _ in range(cfg.layers):
        layers.append(
            DecoderLayerParams(
                cross=attention_init(rng, c, cfg.heads),
                cross_norm=norm_init(c),
                rel=relation_attention_init(rng, c, cfg.heads, cfg.sincos_d),
                ffn=mlp_init(rng, (c, 4 * c, c)),
                ffn_norm=norm_init(c),
                pos_delta=linear_init(rng, c, 3, scale=0.01 / np.sqrt(c)),
            )
        )
    refine_stages = [
        RefineParams(
            cross=attention_init(rng, c, cfg.heads),
            norm1=norm_init(c),
            ffn=mlp_init(rng, (c, 4 * c, c)),
            norm2=norm_init(c),
        )
        for _ in range(cfg.refine_stages)
    ]
    return DecoderParams(
        encoder=mlp_init(rng, (ENC_CHANNELS, c, c)),
        agg=aggregation_init(rng, c),
        pos_embed=linear_init(rng, 3 * cfg.sincos_d, c),
        query_content=Tensor(rng.standard_normal((k, c)) / np.sqrt(c), requires_grad=True),
        query_pos_unit=Tensor(rng.uniform(0.0, 1.0, size=(k, 3)), requires_grad=True),
        layers=layers,
        refine_stages=refine_stages,
        heads=HeadParams(
            category=linear_init(rng, c, cfg.category_count + 1),
            mask_embed=linear_init(rng, c, c),
            score=linear_init(rng, c, 1),
        ),
    )


# -- forward pieces ---------------------------------------------------------------


def encode_points(prep, params):
    """Per-point MLP over unit position / color / normal channels, (n, C)."""
    return params.encoder(Tensor(prep.enc_input))


def initial_queries(params, prep):
    """Content and world positions of the query set for one scene.

    Unit positions are clamped to [0, 1] and mapped through the scene bounds;
    degenerate bounds put every query at p_min.
    """
    unit = clip(params.query_pos_unit, 0.0, 1.0)
    world = add(unit * (prep.p_max - prep.p_min), prep.p_min)
    return params.query_content, world


def mask_attention(content, q_pos, sp_feats, sp_pos, prev_mask_prob, layer, threshold):
    """Cross-attention over superpoints gated by the previous mask.

    A query attends only where its previous mask probability exceeds the
    threshold; queries whose gate is empty attend everywhere (handled by the
    attention core). Sinusoidal position embeddings enter the query and key
    sides only; values stay positional-free.
    """
    gate = prev_mask_prob > threshold  # (k, m) bool
    attended = layer.cross(add(content, q_pos), add(sp_feats, sp_pos), sp_feats, mask=gate)
    return layer.cross_norm(add(content, attended))


def refine_superpoints(sp_feats, queries, stage):
    """Reverse cross-attention: superpoints query the instance queries."""
    attended = stage.cross(sp_feats, queries, queries)
    x = stage.norm1(add(sp_feats, attended))
    return stage.norm2(add(x, stage.ffn(x)))


@dataclass
class LayerPrediction:
    category_logits: Tensor  # (K, category_count + 1)
    mask_logits: Tensor      # (K, M)
    score: Tensor            # (K,)
    center: Tensor           # (K, 3) current query world positions


def mask_probabilities(pred):
    """Detached (K, M) sigmoid of the mask logits."""
    x = pred.mask_logits.data
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def predict_heads(content, sp_feats, world, heads):
    """Category logits, mask logits, quality score, and center for each query."""
    k = content.shape[0]
    qm = heads.mask_embed(content)
    return LayerPrediction(
        category_logits=heads.category(content),
        mask_logits=matmul(qm, transpose(sp_feats)),
        score=reshape(sigmoid(heads.score(content)), (k,)),
        center=world,
    )


@dataclass
class DecoderOutput:
    predictions: list          # L + 1 LayerPrediction, index 0 = initial
    pooled_features: Tensor    # (M, C) superpoint features entering the decoder
    refined_features: list     # (M, C) tap after each refinement stage
    attention_maps: list | None  # per layer (heads, K, K) self-attention weights


def decoder_forward(prep, params, cfg, record_attention=False):
    """Run the full decoder over one prepared scene.

    Returns predictions for the initial query set and after each of the
    ``cfg.layers`` layers, plus the superpoint feature taps used by the
    contrastive loss.
    """
    feats = encode_points(prep, params)
    part = prep.partition
    if cfg.use_adaptive_pool:
        sp = adaptive_aggregate(feats, part, params.agg)
    else:
        sp = scatter_pool(feats, part, "mean")
    pooled = sp

    sp_pos = params.pos_embed(sincos_encode(Tensor(prep.centroids), d=cfg.sincos_d))
    content, world = initial_queries(params, prep)
    preds = [predict_heads(content, sp, world, params.heads)]
    refined = []
    attn_maps = [] if record_attention else None

    for li, layer in enumerate(params.layers, start=1):
        prev_prob = mask_probabilities(preds[-1])  # (K, M), constants for gating
        q_pos = params.pos_embed(sincos_encode(world, d=cfg.sincos_d))
        content = mask_attention(content, q_pos, sp, sp_pos, prev_prob, layer, cfg.mask_threshold)

        boxes = None
        if cfg.use_relation_bias:
            boxes = boxes_from_prediction(
                prev_prob, part, prep.scene.positions, world.data, cfg.mask_threshold
            )
        content = relation_attention(content, boxes, layer.rel, cfg.sincos_d, record=attn_maps)

        content = layer.ffn_norm(add(content, layer.ffn(content)))
        world = clip(add(world, layer.pos_delta(content)), prep.p_min, prep.p_max)
        preds.append(predict_heads(content, sp, world, params.heads))

        if cfg.use_refinement and li % cfg.refine_every == 0 and len(refined) < len(params.refine_stages):
            sp = refine_superpoints(sp, content, params.refine_stages[len(refined)])
            refined.append(sp)

    return DecoderOutput(
        predictions=preds,
        pooled_features=pooled,
        refined_features=refined,
        attention_maps=attn_maps,
    )
