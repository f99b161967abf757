"""Set matching, losses, and the optimization loop.

Each decoder layer's predictions are matched one-to-one against the scene's
ground-truth instances by a Hungarian assignment over a weighted class /
mask / center cost. Matched pairs receive mask, dice, center, and quality
losses; every query receives a classification target (no-object when
unmatched). Superpoint feature taps add a contrastive term. Optimization is
single-scene AdamW steps under a polynomially decayed learning rate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ContractError,
    NumericsError,
    Tensor,
    add,
    backward,
    cross_entropy,
    div,
    exp,
    gather_rows,
    log,
    mean,
    mul,
    neg,
    relu,
    sigmoid,
    sub,
    sum_,
    zero_grads,
)
from .contrastive import contrastive_from_features, relation_prior
from .decoder import build_decoder_params, prepare_scene, decoder_forward
from .evaluation import evaluate_scenes
from .layers import named_parameters
from .scene import instance_summaries, superpoint_instance_assignment


class DivergenceError(RuntimeError):
    """Raised when the loss or an update stops being finite."""


# -- targets -----------------------------------------------------------------


@dataclass
class SceneTargets:
    labels: np.ndarray    # (g,) semantic category per instance
    centers: np.ndarray   # (g, 3) mean member position
    sp_masks: np.ndarray  # (g, m) 0/1 superpoint membership by majority
    prior: object         # same/different-instance relation over superpoints


def scene_targets(scene):
    summaries = instance_summaries(scene)
    assignment = superpoint_instance_assignment(scene)
    g, m = len(summaries), assignment.shape[0]
    labels = np.zeros(g, dtype=np.intp)
    centers = np.zeros((g, 3))
    masks = np.zeros((g, m))
    for i, s in enumerate(summaries):
        labels[i] = s.semantic_label
        centers[i] = s.center
        masks[i] = assignment == s.instance_id
    return SceneTargets(labels=labels, centers=centers, sp_masks=masks, prior=relation_prior(scene))


# -- matching ----------------------------------------------------------------


def match_cost(pred, targets, cfg):
    """(k, g) assignment cost: weighted class, mask, dice, and center terms."""
    logits = pred.category_logits.data
    logp = logits - _logsumexp_rows(logits)
    cost_class = -logp[:, targets.labels]

    x = pred.mask_logits.data          # (k, m)
    gt = targets.sp_masks              # (g, m)
    m = x.shape[1]
    pos, neg_ = np.logaddexp(0.0, -x), np.logaddexp(0.0, x)
    cost_bce = (pos @ gt.T + neg_ @ (1.0 - gt).T) / m

    p = _sigmoid_np(x)
    inter = p @ gt.T
    denom = p.sum(axis=1)[:, None] + gt.sum(axis=1)[None, :]
    cost_dice = 1.0 - (2.0 * inter + 1.0) / (denom + 1.0)

    cost_center = np.abs(pred.center.data[:, None, :] - targets.centers[None, :, :]).mean(axis=2)

    return (
        cfg.lambda_ce * cost_class
        + cfg.lambda_bce * cost_bce
        + cfg.lambda_dice * cost_dice
        + cfg.lambda_center * cost_center
    )


def hungarian(cost):
    """Minimum-cost row-to-column assignment, rows <= columns.

    Shortest augmenting path formulation with dual potentials. Returns the
    column chosen for each row. Equal-cost alternatives resolve toward lower
    column indices, so a constant matrix yields the identity assignment.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"assignment cost must be 2-D, got {cost.shape}")
    rows, cols = cost.shape
    if rows > cols:
        raise ContractError(f"{rows} targets cannot injectively match {cols} queries")
    u = np.zeros(rows + 1)
    v = np.zeros(cols + 1)
    owner = np.zeros(cols + 1, dtype=np.intp)  # 1-based row holding each column
    way = np.zeros(cols + 1, dtype=np.intp)
    for r in range(1, rows + 1):
        owner[0] = r
        j0 = 0
        min_to = np.full(cols + 1, np.inf)
        used = np.zeros(cols + 1, dtype=bool)
        while True:
            used[j0] = True
            r0, delta, j1 = owner[j0], np.inf, -1
            for j in range(1, cols + 1):
                if used[j]:
                    continue
                cur = cost[r0 - 1, j - 1] - u[r0] - v[j]
                if cur < min_to[j]:
                    min_to[j] = cur
                    way[j] = j0
                if min_to[j] < delta:
                    delta = min_to[j]
                    j1 = j
            for j in range(cols + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    min_to[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    result = np.zeros(rows, dtype=np.intp)
    for j in range(1, cols + 1):
        if owner[j] > 0:
            result[owner[j] - 1] = j - 1
    return result


# -- loss terms --------------------------------------------------------------


def _sigmoid_np(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _logsumexp_rows(x):
    m = x.max(axis=1, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))


def _abs(t):
    return add(relu(t), relu(neg(t)))


def bce_with_logits(x, target):
    """Numerically safe mean binary cross-entropy on logits."""
    ax = _abs(x)
    soft = add(relu(x), log(add(exp(neg(ax)), 1.0)))
    return mean(sub(soft, mul(x, target)))


def dice_loss(mask_logits, target):
    """Soft dice with +1 smoothing, averaged over mask rows."""
    p = sigmoid(mask_logits)
    inter = sum_(mul(p, target), axis=1)
    denom = add(sum_(p, axis=1), target.sum(axis=1))
    return mean(sub(1.0, div(add(mul(inter, 2.0), 1.0), add(denom, 1.0))))


@dataclass
class LossBreakdown:
    l_ce: float
    l_bce: float
    l_dice: float
    l_center: float
    l_score: float
    l_cont: float
    total: float

    def to_dict(self):
        return {
            "l_ce": self.l_ce,
            "l_bce": self.l_bce,
            "l_dice": self.l_dice,
            "l_center": self.l_center,
            "l_score": self.l_score,
            "l_cont": self.l_cont,
            "total": self.total,
        }


def total_loss(out, targets, dec_cfg, tr_cfg):
    """Deep-supervised matching loss over all decoder predictions.

    Returns the weighted scalar loss tensor together with a float breakdown
    whose terms satisfy total = sum of lambda * term exactly as computed.
    """
    preds = list(out.predictions) if dec_cfg.supervise_initial else list(out.predictions[1:])
    k = preds[0].category_logits.shape[0]
    g = targets.labels.shape[0]
    scale = 1.0 / len(preds)
    no_object = dec_cfg.category_count

    l_ce = Tensor(0.0)
    l_bce = Tensor(0.0)
    l_dice = Tensor(0.0)
    l_center = Tensor(0.0)
    l_score = Tensor(0.0)
    for pred in preds:
        classes = np.full(k, no_object, dtype=np.intp)
        if g > 0:
            assign = hungarian(match_cost(pred, targets, tr_cfg).T)  # (g,) query per target
            classes[assign] = targets.labels
        l_ce = add(l_ce, mul(cross_entropy(pred.category_logits, classes), scale))
        if g == 0:
            continue
        matched_masks = gather_rows(pred.mask_logits, assign)
        l_bce = add(l_bce, mul(bce_with_logits(matched_masks, targets.sp_masks), scale))
        l_dice = add(l_dice, mul(dice_loss(matched_masks, targets.sp_masks), scale))
        delta = sub(gather_rows(pred.center, assign), targets.centers)
        l_center = add(l_center, mul(mean(_abs(delta)), scale))
        # quality target: IoU of the binarized mask against ground truth
        hard = _sigmoid_np(matched_masks.data) > dec_cfg.mask_threshold
        union = np.logical_or(hard, targets.sp_masks > 0.5).sum(axis=1)
        inter = np.logical_and(hard, targets.sp_masks > 0.5).sum(axis=1)
        iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
        err = sub(gather_rows(pred.score, assign), iou)
        l_score = add(l_score, mul(mean(mul(err, err)), scale))

    l_cont = Tensor(0.0)
    if dec_cfg.use_contrastive:
        taps = [out.pooled_features, *out.refined_features]
        for tap in taps:
            l_cont = add(l_cont, mul(contrastive_from_features(tap, targets.prior), 1.0 / len(taps)))

    total = mul(l_ce, tr_cfg.lambda_ce)
    total = add(total, mul(l_bce, tr_cfg.lambda_bce))
    total = add(total, mul(l_dice, tr_cfg.lambda_dice))
    total = add(total, mul(l_center, tr_cfg.lambda_center))
    total = add(total, mul(l_score, tr_cfg.lambda_score))
    total = add(total, mul(l_cont, tr_cfg.lambda_cont))
    breakdown = LossBreakdown(
        l_ce=float(l_ce.data),
        l_bce=float(l_bce.data),
        l_dice=float(l_dice.data),
        l_center=float(l_center.data),
        l_score=float(l_score.data),
        l_cont=float(l_cont.data),
        total=float(total.data),
    )
    return breakdown, total


# -- optimizer ----------------------------------------------------------------


class AdamW:
    """Adam moments with decoupled weight decay and global-norm clipping.

    Parameters update in sorted-name order so training is reproducible
    down to the bit for a fixed seed.
    """

    def __init__(self, params, cfg):
        self.names = sorted(params.keys())
        self.params = params
        self.cfg = cfg
        self.moment1 = {n: np.zeros_like(params[n].data) for n in self.names}
        self.moment2 = {n: np.zeros_like(params[n].data) for n in self.names}
        self.t = 0
        self.eps = 1e-8

    def step(self, lr):
        """Apply one update from accumulated gradients; returns the pre-clip norm."""
        cfg = self.cfg
        sq = 0.0
        with np.errstate(over="ignore"):  # inf norm is caught right below
            for n in self.names:
                grad = self.params[n].grad
                if grad is not None:
                    sq += float((grad * grad).sum())
        norm = float(np.sqrt(sq))
        if not np.isfinite(norm):
            raise DivergenceError(f"gradient norm is {norm}")
        clip_scale = 1.0
        if cfg.grad_clip > 0 and norm > cfg.grad_clip:
            clip_scale = cfg.grad_clip / (norm + 1e-12)
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for n in self.names:
            p = self.params[n]
            if p.grad is None:
                continue
            g = p.grad * clip_scale
            m = self.moment1[n] = cfg.beta1 * self.moment1[n] + (1.0 - cfg.beta1) * g
            v = self.moment2[n] = cfg.beta2 * self.moment2[n] + (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps) + cfg.weight_decay * p.data
            p.data -= lr * update
        return norm


def poly_lr(base_lr, step, total_steps, power):
    """Polynomial decay from base_lr to zero across total_steps."""
    frac = min(max(step / total_steps, 0.0), 1.0)
    return base_lr * (1.0 - frac) ** power


# -- loop ---------------------------------------------------------------------


@dataclass
class TrainResult:
    params: object
    history: list
    stopped_epoch: int | None  # epoch that met both AP targets, else None


def train(
    train_scenes,
    dec_cfg,
    tr_cfg,
    val_scenes=None,
    params=None,
    log_stream=None,
    eval_every=1,
    target_ap25=None,
    target_ap50=None,
):
    """Optimize decoder parameters over a scene collection.

    One step per scene per epoch, shuffled by the config seed. Emits one JSON
    line per epoch with loss means and validation metrics; identical inputs
    produce byte-identical logs. Raises DivergenceError when the loss leaves
    the finite range. Early-stops once both target metrics are reached, when
    given.
    """
    if params is None:
        params = build_decoder_params(dec_cfg, tr_cfg.seed)
    named = named_parameters(params)
    opt = AdamW(named, tr_cfg)
    preps = [prepare_scene(s) for s in train_scenes]
    targets = [scene_targets(s) for s in train_scenes]
    order_rng = np.random.default_rng([tr_cfg.seed, 0x5F])
    total_steps = tr_cfg.epochs * len(preps)
    history = []
    step = 0
    stopped = None
    keys = ("l_ce", "l_bce", "l_dice", "l_center", "l_score", "l_cont", "total")
    for epoch in range(tr_cfg.epochs):
        order = order_rng.permutation(len(preps)) if tr_cfg.shuffle else np.arange(len(preps))
        sums = dict.fromkeys(keys, 0.0)
        epoch_lr = poly_lr(tr_cfg.base_lr, step, total_steps, tr_cfg.poly_power)
        for i in order:
            lr = poly_lr(tr_cfg.base_lr, step, total_steps, tr_cfg.poly_power)
            try:
                out = decoder_forward(preps[i], params, dec_cfg)
                breakdown, loss = total_loss(out, targets[i], dec_cfg, tr_cfg)
                if not np.isfinite(loss.data):
                    raise DivergenceError(f"loss is {float(loss.data)} at step {step}")
                zero_grads(named.values())
                backward(loss)
                opt.step(lr)
            except NumericsError as exc:
                raise DivergenceError(f"non-finite value at step {step}: {exc}") from exc
            for key, value in breakdown.to_dict().items():
                sums[key] += value
            step += 1
        entry = {"epoch": epoch, "lr": epoch_lr}
        entry.update({key: sums[key] / len(preps) for key in keys})
        report = None
        if val_scenes is not None and (epoch % eval_every == 0 or epoch == tr_cfg.epochs - 1):
            report = evaluate_scenes(params, dec_cfg, val_scenes, tr_cfg.nms_iou, tr_cfg.confidence_floor)
        entry["ap25"] = None if report is None else report.ap25
        entry["ap50"] = None if report is None else report.ap50
        entry["map"] = None if report is None else report.map
        if log_stream is not None:
            log_stream.write(json.dumps(entry) + "\n")
        history.append(entry)
        if (
            report is not None
            and target_ap25 is not None
            and target_ap50 is not None
            and report.ap25 >= target_ap25
            and report.ap50 >= target_ap50
        ):
            stopped = epoch
            break
    return TrainResult(params=params, history=history, stopped_epoch=stopped)
