"""Parameter containers built on the autodiff tape: MLPs, norms, attention."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    MASK_PENALTY,
    ConfigError,
    ShapeError,
    Tensor,
    attention_core,
    layer_norm,
    linear,
    relu,
    reshape,
    sigmoid,
    swapaxes,
    tanh,
)

_ACTIVATIONS = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "none": lambda x: x,
}


@dataclass
class Linear:
    w: Tensor  # (fan_in, fan_out)
    b: Tensor | None = None

    def __call__(self, x):
        return linear(x, self.w, self.b)


@dataclass
class Mlp:
    """Stack of affine layers with a per-layer activation tag."""

    layers: list[Linear]
    activations: list[str]

    def __post_init__(self):
        if len(self.layers) != len(self.activations):
            raise ConfigError("one activation tag per layer required")
        for tag in self.activations:
            if tag not in _ACTIVATIONS:
                raise ConfigError(f"unknown activation '{tag}'")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.w.shape[1] != nxt.w.shape[0]:
                raise ShapeError(
                    f"adjacent layer widths disagree: {prev.w.shape} -> {nxt.w.shape}"
                )

    def __call__(self, x):
        for lyr, tag in zip(self.layers, self.activations):
            x = _ACTIVATIONS[tag](lyr(x))
        return x


@dataclass
class LayerNorm:
    gain: Tensor
    bias: Tensor

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias)


@dataclass
class MultiheadAttention:
    """Projection set around the scaled dot-product core."""

    heads: int
    q: Linear
    k: Linear
    v: Linear
    out: Linear

    def __call__(self, query, key, value, bias=None, mask=None, record=None):
        """Attend (n, C) queries over (m, C) key/value rows.

        bias is an optional (heads, n, m) additive logits term; mask is an
        optional (n, m) bool of allowed positions. When ``record`` is a list
        the post-softmax weights (heads, n, m) are appended to it.
        """
        q = _split_heads(self.q(query), self.heads)  # (h, n, c)
        k = _split_heads(self.k(key), self.heads)
        v = _split_heads(self.v(value), self.heads)
        if record is not None:
            record.append(_attention_weights(q.data, k.data, bias, mask))
        attended = attention_core(q, k, v, bias=bias, mask=mask)
        return self.out(_merge_heads(attended))


def _attention_weights(q, k, bias, mask):
    """Post-softmax weights (h, n, m) in plain numpy, for diagnostics."""
    logits = np.matmul(q, k.swapaxes(1, 2)) / np.sqrt(q.shape[-1])
    if bias is not None:
        logits = logits + (bias.data if isinstance(bias, Tensor) else np.asarray(bias))
    if mask is not None:
        allowed = np.asarray(mask, bool).copy()
        allowed[~allowed.any(axis=1)] = True
        logits = logits + np.where(allowed, 0.0, MASK_PENALTY)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x, h):
    n, c = x.shape
    if c % h != 0:
        raise ConfigError(f"width {c} not divisible by {h} heads")
    return swapaxes(reshape(x, (n, h, c // h)), 0, 1)


def _merge_heads(x):
    h, n, c = x.shape
    return reshape(swapaxes(x, 0, 1), (n, h * c))


# -- initializers ----------------------------------------------------------


def linear_init(rng, fan_in, fan_out, bias=True, scale=None):
    """Gaussian fan-in init; bias starts at zero."""
    s = scale if scale is not None else 1.0 / np.sqrt(fan_in)
    w = Tensor(rng.standard_normal((fan_in, fan_out)) * s, requires_grad=True)
    b = Tensor(np.zeros(fan_out), requires_grad=True) if bias else None
    return Linear(w, b)


def mlp_init(rng, dims, hidden_act="relu", final_act="none"):
    layers = [linear_init(rng, a, b) for a, b in zip(dims, dims[1:])]
    acts = [hidden_act] * (len(layers) - 1) + [final_act]
    return Mlp(layers, acts)


def norm_init(c):
    return LayerNorm(
        gain=Tensor(np.ones(c), requires_grad=True),
        bias=Tensor(np.zeros(c), requires_grad=True),
    )


def attention_init(rng, c, heads):
    if c % heads != 0:
        raise ConfigError(f"width {c} not divisible by {heads} heads")
    return MultiheadAttention(
        heads=heads,
        q=linear_init(rng, c, c),
        k=linear_init(rng, c, c),
        v=linear_init(rng, c, c),
        out=linear_init(rng, c, c),
    )


# -- parameter registry -----------------------------------------------------


def named_parameters(obj, prefix=""):
    """Walk dataclasses/lists/dicts and collect requires_grad leaf tensors.

    Field order is deterministic, so the name -> tensor map has a stable
    iteration order for optimizers and checkpoints.
    """
    out = {}
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            out[prefix or "param"] = obj
        return out
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            sub = getattr(obj, f.name)
            key = f"{prefix}.{f.name}" if prefix else f.name
            out.update(named_parameters(sub, key))
        return out
    if isinstance(obj, (list, tuple)):
        for i, sub in enumerate(obj):
            out.update(named_parameters(sub, f"{prefix}.{i}" if prefix else str(i)))
        return out
    if isinstance(obj, dict):
        for k in sorted(obj):
            out.update(named_parameters(obj[k], f"{prefix}.{k}" if prefix else str(k)))
        return out
    return out
