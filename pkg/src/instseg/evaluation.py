"""Instance extraction and average-precision evaluation.

Predictions are reduced to per-scene instance lists (category, confidence,
point mask), deduplicated with greedy non-maximum suppression, then scored
against ground truth with the usual ranked precision/recall sweep. Matching
is greedy in confidence order within a category, each ground-truth instance
claimable once, and the final number is the all-point interpolated area
under the precision envelope.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad
from .decoder import decoder_forward, mask_probabilities, prepare_scene


@dataclass
class InstancePrediction:
    scene: str             # digest of the source scene
    category: int
    confidence: float
    point_mask: np.ndarray  # (n,) bool
    sp_mask: np.ndarray     # (m,) bool
    query_index: int


@dataclass
class GroundTruthInstance:
    scene: str
    category: int
    point_mask: np.ndarray  # (n,) bool


def softmax_np(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def extract_instances(pred, prep, cfg, confidence_floor=0.05):
    """Final-layer prediction -> instance list for one scene.

    The no-object slot takes part in the class argmax, so a query claims an
    instance only when a real category wins outright. Confidence is the class
    probability scaled by the predicted mask quality. Masks binarize at the
    decoder threshold on superpoints and broadcast to points; empty or
    low-confidence detections are dropped.
    """
    class_prob = softmax_np(pred.category_logits.data)  # (k, cat + 1)
    winner = np.argmax(class_prob, axis=1)
    mask_prob = mask_probabilities(pred)                # (k, m)
    out = []
    for q in range(class_prob.shape[0]):
        cat = int(winner[q])
        if cat == cfg.category_count:
            continue
        confidence = float(class_prob[q, cat] * pred.score.data[q])
        sp_mask = mask_prob[q] > cfg.mask_threshold
        if not sp_mask.any() or confidence < confidence_floor:
            continue
        out.append(
            InstancePrediction(
                scene=prep.digest,
                category=cat,
                confidence=confidence,
                point_mask=sp_mask[prep.partition.index],
                sp_mask=sp_mask,
                query_index=q,
            )
        )
    return out


def ground_truth_instances(scene, digest):
    """One entry per annotated instance, ascending instance id."""
    out = []
    for iid in np.unique(scene.instance_id):
        if iid < 0:
            continue
        member = scene.instance_id == iid
        out.append(
            GroundTruthInstance(
                scene=digest,
                category=int(scene.semantic_label[member][0]),
                point_mask=member,
            )
        )
    return out


def mask_iou(a, b):
    """Intersection over union of two boolean masks; empty-vs-empty is 0."""
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def _ranked(preds):
    return sorted(preds, key=lambda p: (-p.confidence, p.scene, p.query_index))


def nms(preds, iou_threshold=0.75):
    """Greedy same-category suppression within a scene, confidence order."""
    kept = []
    for cand in _ranked(preds):
        clash = any(
            k.scene == cand.scene
            and k.category == cand.category
            and mask_iou(k.point_mask, cand.point_mask) >= iou_threshold
            for k in kept
        )
        if not clash:
            kept.append(cand)
    return kept


def average_precision(preds, gts, iou_threshold):
    """Mean AP over categories that have at least one ground-truth instance.

    Within a category, predictions are swept in confidence order; each one
    greedily claims the unclaimed same-scene ground truth with the highest
    IoU at or above the threshold. The per-category score is the all-point
    area under the monotone precision envelope.
    """
    categories = sorted({g.category for g in gts})
    if not categories:
        return 0.0
    per_category = []
    for cat in categories:
        cat_gts = [g for g in gts if g.category == cat]
        cat_preds = _ranked([p for p in preds if p.category == cat])
        claimed = np.zeros(len(cat_gts), dtype=bool)
        tp = np.zeros(len(cat_preds))
        for rank, pred in enumerate(cat_preds):
            best_iou, best_gi = 0.0, -1
            for gi, gt in enumerate(cat_gts):
                if claimed[gi] or gt.scene != pred.scene:
                    continue
                iou = mask_iou(pred.point_mask, gt.point_mask)
                if iou >= iou_threshold and iou > best_iou:
                    best_iou, best_gi = iou, gi
            if best_gi >= 0:
                claimed[best_gi] = True
                tp[rank] = 1.0
        if len(cat_preds) == 0:
            per_category.append(0.0)
            continue
        cum_tp = np.cumsum(tp)
        recall = cum_tp / len(cat_gts)
        precision = cum_tp / np.arange(1, len(cat_preds) + 1)
        # monotone envelope, then area over the recall steps
        mrec = np.concatenate(([0.0], recall, [recall[-1]]))
        mpre = np.concatenate(([0.0], precision, [0.0]))
        for i in range(len(mpre) - 2, -1, -1):
            mpre[i] = max(mpre[i], mpre[i + 1])
        steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
        per_category.append(float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1])))
    return float(np.mean(per_category))


OVERLAP_SWEEP = np.arange(10, 20) / 20.0  # 0.50, 0.55, ... 0.95


@dataclass
class EvalReport:
    ap25: float
    ap50: float
    map: float
    per_threshold: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "ap25": self.ap25,
            "ap50": self.ap50,
            "map": self.map,
            "per_threshold": {f"{t:.2f}": v for t, v in self.per_threshold.items()},
        }


def evaluate_instances(preds, gts):
    """Score matched instance lists: AP sweep plus the two loose operating points."""
    per = {float(t): average_precision(preds, gts, float(t)) for t in OVERLAP_SWEEP}
    return EvalReport(
        ap25=average_precision(preds, gts, 0.25),
        ap50=per[0.50],
        map=float(np.mean(list(per.values()))),
        per_threshold=per,
    )


def evaluate_scenes(params, cfg, scenes, nms_iou=0.75, confidence_floor=0.05):
    """Run the decoder over scenes (gradient-free) and score the detections."""
    all_preds, all_gts = [], []
    for scene in scenes:
        prep = prepare_scene(scene)
        with no_grad():
            out = decoder_forward(prep, params, cfg)
        inst = extract_instances(out.predictions[-1], prep, cfg, confidence_floor)
        all_preds.extend(nms(inst, nms_iou))
        all_gts.extend(ground_truth_instances(scene, prep.digest))
    return evaluate_instances(all_preds, all_gts)
