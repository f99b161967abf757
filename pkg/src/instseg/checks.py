"""Module-by-module gradient verification against finite differences.

Each named check builds a small deterministic problem, runs the tape
backward pass, and probes a subsample of parameter elements with central
differences. The suite is sized to finish in seconds per seed, so it can
gate every training run from the command line.
"""

from __future__ import annotations

import numpy as np

from .aggregation import SuperpointPartition, adaptive_aggregate, aggregation_init
from .autodiff import (
    Tensor,
    attention_core,
    clip,
    cross_entropy,
    exp,
    grad_check,
    layer_norm,
    log,
    mean,
    sincos_encode,
    softmax_rows,
    sum_,
    tanh,
)
from .config import DecoderConfig, SynthConfig
from .contrastive import RelationPrior, contrastive_from_features
from .decoder import build_decoder_params, decoder_forward, prepare_scene
from .layers import attention_init, mlp_init, named_parameters, norm_init
from .relation import BBox, relation_attention, relation_attention_init
from .scene import synth_scene
from .training import bce_with_logits, dice_loss


def _elementwise(seed):
    rng = np.random.default_rng([seed, 1])
    x = Tensor(rng.standard_normal((4, 5)) * 0.5, requires_grad=True)

    def fn():
        y = tanh(exp(x * 0.3))
        z = log(clip(y * y + 0.5, 0.2, 3.0))
        return mean(z * z)

    return fn, {"x": x}


def _softmax_entropy(seed):
    rng = np.random.default_rng([seed, 2])
    logits = Tensor(rng.standard_normal((6, 4)) * 2.0, requires_grad=True)
    targets = rng.integers(0, 4, size=6)

    def fn():
        probs = softmax_rows(logits)
        return cross_entropy(logits, targets) + mean(probs * probs)

    return fn, {"logits": logits}


def _mlp_norm(seed):
    rng = np.random.default_rng([seed, 3])
    mlp = mlp_init(rng, (5, 8, 3))
    norm = norm_init(3)
    x = Tensor(rng.standard_normal((7, 5)), requires_grad=True)
    params = dict(named_parameters(mlp, "mlp"), **named_parameters(norm, "norm"))
    params["x"] = x

    def fn():
        return mean(norm(mlp(x)))

    return fn, params


def _attention(seed):
    rng = np.random.default_rng([seed, 4])
    q = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    k = Tensor(rng.standard_normal((2, 5, 4)), requires_grad=True)
    v = Tensor(rng.standard_normal((2, 5, 4)), requires_grad=True)
    bias = Tensor(rng.standard_normal((2, 3, 5)) * 0.2, requires_grad=True)
    mask = rng.uniform(size=(3, 5)) > 0.3

    def fn():
        return mean(attention_core(q, k, v, bias=bias, mask=mask))

    return fn, {"q": q, "k": k, "v": v, "bias": bias}


def _multihead(seed):
    rng = np.random.default_rng([seed, 5])
    attn = attention_init(rng, 8, 2)
    x = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    params = dict(named_parameters(attn, "attn"), x=x)

    def fn():
        return mean(attn(x, x, x))

    return fn, params


def _aggregation(seed):
    rng = np.random.default_rng([seed, 6])
    part = SuperpointPartition.from_index(np.repeat(np.arange(3), 4))
    agg = aggregation_init(rng, 6)
    feats = Tensor(rng.standard_normal((12, 6)), requires_grad=True)
    params = dict(named_parameters(agg, "agg"), feats=feats)

    def fn():
        return mean(adaptive_aggregate(feats, part, agg))

    return fn, params


def _contrastive(seed):
    rng = np.random.default_rng([seed, 7])
    assignment = np.array([0, 0, 1, 1, -1], dtype=np.int64)
    same = (assignment[:, None] == assignment[None, :]) & (assignment[:, None] >= 0)
    matrix = (same | np.eye(5, dtype=bool)).astype(float)
    prior = RelationPrior(matrix=matrix, assignment=assignment)
    feats = Tensor(rng.standard_normal((5, 6)), requires_grad=True)

    def fn():
        return contrastive_from_features(feats, prior)

    return fn, {"feats": feats}


def _relation(seed):
    rng = np.random.default_rng([seed, 8])
    params = relation_attention_init(rng, 8, 2, sincos_d=4)
    queries = Tensor(rng.standard_normal((3, 8)), requires_grad=True)
    boxes = [
        BBox(center=rng.uniform(0, 2, size=3), extent=rng.uniform(0.2, 0.8, size=3))
        for _ in range(3)
    ]
    named = dict(named_parameters(params, "rel"), queries=queries)

    def fn():
        return mean(relation_attention(queries, boxes, params, sincos_d=4))

    return fn, named


def _positional(seed):
    rng = np.random.default_rng([seed, 9])
    v = Tensor(rng.uniform(0, 3, size=(5, 3)), requires_grad=True)

    def fn():
        return mean(sincos_encode(v, d=6) ** 2.0)

    return fn, {"v": v}


def _mask_losses(seed):
    rng = np.random.default_rng([seed, 10])
    logits = Tensor(rng.standard_normal((3, 7)) * 2.0, requires_grad=True)
    target = (rng.uniform(size=(3, 7)) > 0.5).astype(float)

    def fn():
        return bce_with_logits(logits, target) + dice_loss(logits, target)

    return fn, {"logits": logits}


def _decoder(seed):
    scfg = SynthConfig(
        scene_count=1,
        boxes_min=2,
        boxes_max=2,
        points_per_box_min=12,
        points_per_box_max=12,
        box_extent_min=0.3,
        box_extent_max=0.5,
        background_points=8,
        category_count=3,
        superpoints_per_box=2,
        seed=17,
    )
    prep = prepare_scene(synth_scene(scfg, 0))
    # gating thresholds sit far from every initial mask probability, and the
    # relation bias is off: recomputed boxes are constants to the tape but
    # not to a finite-difference probe
    cfg = DecoderConfig(
        queries=3,
        width=8,
        heads=2,
        layers=2,
        refine_every=1,
        sincos_d=4,
        category_count=3,
        mask_threshold=0.9,
        use_relation_bias=False,
    )
    params = build_decoder_params(cfg, seed=seed)
    # Probing a first-layer bias shifts a whole column of relu inputs by the
    # finite-difference step; nudge any column whose input grazes the kink so
    # the probe stays on one side of it.
    lin0 = params.encoder.layers[0]
    pre = prep.enc_input @ lin0.w.data + lin0.b.data
    for _ in range(8):
        grazing = np.abs(pre).min(axis=0) < 1e-4
        if not grazing.any():
            break
        lin0.b.data[grazing] += 3e-4
        pre[:, grazing] += 3e-4
    named = named_parameters(params)

    def fn():
        out = decoder_forward(prep, params, cfg)
        last = out.predictions[-1]
        total = mean(last.mask_logits) + mean(last.category_logits) + mean(last.score)
        return total + mean(last.center) + mean(out.refined_features[-1])

    return fn, named


SUITE = (
    ("elementwise", _elementwise),
    ("softmax_entropy", _softmax_entropy),
    ("mlp_norm", _mlp_norm),
    ("attention_core", _attention),
    ("multihead", _multihead),
    ("aggregation", _aggregation),
    ("contrastive", _contrastive),
    ("relation", _relation),
    ("positional", _positional),
    ("mask_losses", _mask_losses),
    ("decoder", _decoder),
)


# the deep composite check probes through stacked piecewise-linear units, so
# it uses a smaller step to keep probes from straddling interior kinks
EPS_OVERRIDES = {"decoder": 1e-6}


def run_gradient_suite(seeds=(0, 1, 2), tol=1e-4, max_probes=4):
    """Run every check for every seed; returns {(name, seed): GradCheckReport}.

    Deterministic for a fixed seed tuple. An unlucky custom seed can still
    graze an activation kink deep in the composite checks and flag a spurious
    mismatch; a genuine gradient bug fails across seeds, a graze does not.
    """
    results = {}
    for name, build in SUITE:
        for seed in seeds:
            fn, params = build(seed)
            results[(name, seed)] = grad_check(
                fn,
                params,
                eps=EPS_OVERRIDES.get(name, 1e-5),
                tol=tol,
                max_probes=max_probes,
                rng=np.random.default_rng([seed, 0xC4]),
            )
    return results
