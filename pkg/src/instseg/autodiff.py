"""Dense float64 tensors with taped reverse-mode differentiation.

One node is recorded per forward operation; ``backward`` replays the tape in
reverse topological order. Everything is float64 and row-major, and every op
asserts a finite result, so numerical blow-ups surface at the op that
produced them instead of silently corrupting a run.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

MASK_PENALTY = -1e9  # added to attention logits at masked-out positions


class NumericsError(ArithmeticError):
    """A forward op produced a non-finite value."""


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class ContractError(ValueError):
    """An op was called outside its contract (non-scalar loss, K < G, ...)."""


class ConfigError(ValueError):
    """A static configuration value is invalid."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 ndarray plus the tape hooks needed for backward().

    Recorded tensors are treated as immutable; optimizers may overwrite leaf
    ``.data`` between forward passes (the tape is rebuilt every pass).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        # asarray keeps 0-d scalars 0-d (ascontiguousarray would lift to 1-d)
        arr = np.asarray(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise NumericsError(f"non-finite values out of '{_op}'")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __pow__(self, p):
        return pow_const(self, p)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data, parents, bwd, op):
    """Build an op result, recording the tape edge only when it can matter."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=bwd, _op=op)
    return Tensor(data, _op=op)


class Graph:
    """Topologically ordered view of the ops reachable from an output tensor."""

    def __init__(self, output: Tensor):
        order = []
        seen = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order  # parents precede children

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Returns a dict mapping each reached leaf tensor to its gradient array.
    The loss must be scalar; gradients accumulate across calls until cleared.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    graph = Graph(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and node._backward is None:
            # leaf parameter (or tensor marked requires_grad by hand)
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
    return leaves


def zero_grads(params):
    """Clear accumulated gradients on an iterable of tensors."""
    for p in params:
        p.grad = None


# -- elementwise primitives ---------------------------------------------


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
        "div",
    )


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def pow_const(a, p):
    a = _as_tensor(a)
    p = float(p)
    out = a.data ** p
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = _as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a):
    a = _as_tensor(a)
    return _node(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),), "relu")


def sigmoid(a):
    a = _as_tensor(a)
    # split by sign for stability at large |x|
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes through inside the interval."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(out, (a,), lambda g: (g * inside,), "clip")


# -- shape / indexing primitives ------------------------------------------


def reshape(a, shape):
    a = _as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a, i, j):
    a = _as_tensor(a)
    return _node(a.data.swapaxes(i, j), (a,), lambda g: (g.swapaxes(i, j),), "swapaxes")


def transpose(a):
    """2-D transpose."""
    if a.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {a.shape}")
    return swapaxes(a, 0, 1)


def concat(parts, axis=0):
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, tuple(parts), bwd, "concat")


def gather_rows(a, idx):
    """Select rows along axis 0: out[i] = a[idx[i]]."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _node(a.data[idx], (a,), bwd, "gather_rows")


def select_rc(a, rows, cols):
    """Pick scalar entries a[rows[i], cols[i]] -> 1-D tensor."""
    a = _as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g)
        return (ga,)

    return _node(a.data[rows, cols], (a,), bwd, "select_rc")


def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(ax % a.ndim for ax in axes):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _node(data, (a,), bwd, "sum")


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    elif a.ndim == b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    else:
        raise ShapeError(f"matmul expects both 2-D or both 3-D, got {a.shape} @ {b.shape}")

    def bwd(g):
        return (
            np.matmul(g, b.data.swapaxes(-1, -2)),
            np.matmul(a.data.swapaxes(-1, -2), g),
        )

    return _node(np.matmul(a.data, b.data), (a, b), bwd, "matmul")


# -- segment (superpoint) primitives --------------------------------------


def _check_segments(seg, n, m):
    seg = np.asarray(seg, dtype=np.intp)
    if seg.shape != (n,):
        raise ShapeError(f"segment index shape {seg.shape} != ({n},)")
    if n and (seg.min() < 0 or seg.max() >= m):
        raise ContractError(f"segment ids must lie in [0, {m})")
    return seg


def segment_sum(a, seg, m):
    """Sum rows of ``a`` (n, ...) into m buckets: out[s] = sum over seg==s."""
    a = _as_tensor(a)
    seg = _check_segments(seg, a.shape[0], m)
    out = np.zeros((m,) + a.shape[1:], dtype=np.float64)
    np.add.at(out, seg, a.data)
    return _node(out, (a,), lambda g: (g[seg],), "segment_sum")


def segment_mean(a, seg, m):
    counts = np.bincount(np.asarray(seg, dtype=np.intp), minlength=m).astype(np.float64)
    if np.any(counts == 0):
        raise ContractError("segment_mean: empty segment")
    inv = 1.0 / counts
    s = segment_sum(a, seg, m)
    return mul(s, inv.reshape((m,) + (1,) * (s.ndim - 1)))


def segment_max(a, seg, m):
    """Per-bucket max; gradient routes to the first argmax member of each bucket."""
    a = _as_tensor(a)
    seg = _check_segments(seg, a.shape[0], m)
    if a.ndim not in (1, 2):
        raise ShapeError(f"segment_max expects 1-D or 2-D, got {a.shape}")
    x = a.data if a.ndim == 2 else a.data[:, None]
    n, c = x.shape
    out = np.full((m, c), -np.inf)
    np.maximum.at(out, seg, x)
    if np.any(~np.isfinite(out)):
        raise ContractError("segment_max: empty segment")

    def bwd(g):
        gg = g if a.ndim == 2 else g[:, None] if g.ndim == 1 else g
        gg = gg.reshape(m, c)
        # first point index attaining the max, per (bucket, channel)
        winner = np.full((m, c), n, dtype=np.intp)
        cand = np.where(x == out[seg], np.arange(n, dtype=np.intp)[:, None], n)
        np.minimum.at(winner, seg, cand)
        ga = np.zeros((n, c))
        ga[winner, np.broadcast_to(np.arange(c), (m, c))] = gg
        return (ga.reshape(a.shape) if a.ndim == 1 else ga,)

    res = out if a.ndim == 2 else out[:, 0]
    return _node(res, (a,), bwd, "segment_max")


# -- composite kernels -----------------------------------------------------


def linear(x, w, b=None):
    """Affine map y = x @ w + b with explicit shape checks."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    if x.ndim == 2:
        y = matmul(x, w)
    else:
        flat = reshape(x, (-1, x.shape[-1]))
        y = reshape(matmul(flat, w), x.shape[:-1] + (w.shape[1],))
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
        y = add(y, b)
    return y


def softmax_rows(x):
    """Row-stable softmax over the last axis."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (x,), bwd, "softmax")


def logsumexp_rows(x):
    """log(sum(exp(x))) over the last axis, keepdims, max-shifted."""
    x = _as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)  # constant shift
    return add(log(sum_(exp(sub(x, m)), axis=-1, keepdims=True)), m)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale + shift."""
    x = _as_tensor(x)
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    y = div(xc, sqrt(add(var, eps)))
    return add(mul(y, gain), bias)


def sincos_encode(v, d=16, base=10000.0):
    """Sinusoidal lift: each scalar becomes d values (sin, cos pairs).

    For input channel value v and j in [0, d/2), the pair
    (sin(v / base^(2j/d)), cos(v / base^(2j/d))) lands at output offset 2j.
    Output shape is input shape with the last axis widened by a factor d.
    """
    if d % 2 != 0 or d < 2:
        raise ConfigError(f"sincos width d={d} must be even and >= 2")
    if base <= 1.0:
        raise ConfigError(f"sincos base {base} must be > 1")
    v = _as_tensor(v)
    inv = base ** (-2.0 * np.arange(d // 2) / d)  # (d/2,)
    scaled = v.data[..., None] * inv  # (..., k, d/2)
    s, c = np.sin(scaled), np.cos(scaled)
    out = np.stack([s, c], axis=-1).reshape(v.shape[:-1] + (v.shape[-1] * d,))

    def bwd(g):
        gg = g.reshape(scaled.shape + (2,))
        return ((gg[..., 0] * c - gg[..., 1] * s) @ inv,)

    return _node(out, (v,), bwd, "sincos")


def attention_core(q, k, v, bias=None, mask=None):
    """Scaled dot-product attention over per-head stacks.

    Args:
        q: (h, n, c) queries.
        k: (h, m, c) keys.
        v: (h, m, c) values.
        bias: optional (h, n, m) additive logits term.
        mask: optional (n, m) bool, True where attention is allowed, shared
            across heads. Rows with no allowed key fall back to full attention.

    Returns:
        (h, n, c) attended values.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError("attention_core expects (h, n, c) stacks")
    h, n, c = q.shape
    if k.shape[0] != h or v.shape[0] != h or k.shape[2] != c or k.shape != v.shape:
        raise ShapeError(f"attention_core: q{q.shape} k{k.shape} v{v.shape}")
    m = k.shape[1]
    logits = mul(matmul(q, swapaxes(k, 1, 2)), 1.0 / np.sqrt(c))
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (h, n, m):
            raise ShapeError(f"attention bias shape {bias.shape} != {(h, n, m)}")
        logits = add(logits, bias)
    if mask is not None:
        allowed = np.asarray(mask, dtype=bool)
        if allowed.shape != (n, m):
            raise ShapeError(f"attention mask shape {allowed.shape} != {(n, m)}")
        dead = ~allowed.any(axis=1)
        if dead.any():
            allowed = allowed.copy()
            allowed[dead] = True
        penalty = np.where(allowed, 0.0, MASK_PENALTY)  # (n, m), broadcasts over heads
        logits = add(logits, Tensor(penalty))
    return matmul(softmax_rows(logits), v)


# -- losses ---------------------------------------------------------------

PROB_EPS = 1e-7  # probability clamp for log terms


def bce(p, target, reduction="mean"):
    """Binary cross-entropy on probabilities; p is clamped to [eps, 1-eps]."""
    p = clip(_as_tensor(p), PROB_EPS, 1.0 - PROB_EPS)
    t = _as_tensor(target)
    loss = neg(add(mul(t, log(p)), mul(sub(1.0, t), log(sub(1.0, p)))))
    if reduction == "mean":
        return mean(loss)
    if reduction == "none":
        return loss
    raise ConfigError(f"unknown reduction '{reduction}'")


def cross_entropy(logits, targets):
    """Mean softmax cross-entropy over rows; targets are class indices."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}")
    lse = logsumexp_rows(logits)  # (n, 1)
    picked = select_rc(logits, np.arange(logits.shape[0]), targets)
    return mean(sub(reshape(lse, (logits.shape[0],)), picked))


# -- finite-difference verification ----------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    tol: float
    eps: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self):
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def to_dict(self):
        return {
            "tol": self.tol,
            "eps": self.eps,
            "passed": self.passed,
            "entries": [vars(e) for e in self.entries],
        }


def grad_check(fn, params, eps=1e-5, tol=1e-4, max_probes=None, rng=None):
    """Compare tape gradients of ``fn()`` against central finite differences.

    Args:
        fn: zero-argument callable returning a scalar Tensor; must be a
            deterministic function of ``params``.
        params: dict name -> leaf Tensor, or iterable of leaf Tensors.
        eps: finite-difference step.
        tol: per-element bound on |analytic - numeric| / max(|a|, |n|, 1).
        max_probes: probe at most this many elements per parameter (seeded
            subsample); None checks every element.
        rng: generator used for probe subsampling.

    Returns:
        GradCheckReport with one entry per parameter.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    rng = rng or np.random.default_rng(0)
    zero_grads(params.values())
    loss = fn()
    backward(loss)
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    zero_grads(params.values())

    report = GradCheckReport(tol=tol, eps=eps)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_probes is not None and flat.size > max_probes:
            idxs = np.sort(rng.choice(flat.size, size=max_probes, replace=False))
        worst = 0.0
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + eps
            hi = fn().item()
            flat[i] = keep - eps
            lo = fn().item()
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            worst = max(worst, rel)
        report.entries.append(
            GradCheckEntry(name=name, max_rel_err=worst, checked=len(idxs), passed=worst <= tol)
        )
    return report
