"""Instance-segmentation and detection metrics.

Average precision follows the modern convention: per class, predictions
rank by score across scenes, each one greedily matches the unmatched
ground truth of highest IoU at or above the threshold, and the AP is the
area under the precision-recall curve with the all-point interpolation
(precision envelope). Coverage metrics report how well ground-truth
instances are covered by their best-overlapping predictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Aabb, Prediction, Scene, aabb_iou, mask_iou

AP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class _GtInstance:
    scene: int
    class_id: int
    mask: np.ndarray
    box: Aabb
    size: int


def _gt_instances(scenes: Sequence[Scene]) -> list[_GtInstance]:
    records = []
    for s_idx, scene in enumerate(scenes):
        for j in range(scene.num_instances):
            mask = scene.instance_mask(j)
            records.append(
                _GtInstance(
                    scene=s_idx,
                    class_id=scene.instance_class(j),
                    mask=mask,
                    box=scene.instance_box(j),
                    size=int(mask.sum()),
                )
            )
    return records


def mask_overlap(pred: Prediction, gt: _GtInstance) -> float:
    return mask_iou(pred.mask, gt.mask)


def box_overlap(pred: Prediction, gt: _GtInstance) -> float:
    return aabb_iou(pred.box, gt.box)


def _ranked_predictions(predictions: Sequence[Sequence[Prediction]], class_id: int):
    flat = [
        (s_idx, pred)
        for s_idx, scene_preds in enumerate(predictions)
        for pred in scene_preds
        if pred.class_id == class_id
    ]
    flat.sort(key=lambda item: -item[1].score)  # stable: ties keep scene/file order
    return flat


def _match_flags(
    ranked,
    gts: list[_GtInstance],
    iou_fn: Callable,
    threshold: float,
) -> np.ndarray:
    """True/false positive flags for score-ranked predictions of one class."""
    by_scene: dict[int, list[int]] = {}
    for g_idx, gt in enumerate(gts):
        by_scene.setdefault(gt.scene, []).append(g_idx)
    used = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(ranked), dtype=bool)
    for rank, (s_idx, pred) in enumerate(ranked):
        best_iou, best_idx = 0.0, -1
        for g_idx in by_scene.get(s_idx, ()):
            if used[g_idx]:
                continue
            iou = iou_fn(pred, gts[g_idx])
            if iou > best_iou:
                best_iou, best_idx = iou, g_idx
        if best_idx >= 0 and best_iou >= threshold:
            used[best_idx] = True
            tp[rank] = True
    return tp


def _ap_from_flags(tp: np.ndarray, num_gt: int) -> float:
    if num_gt == 0:
        return 0.0
    if tp.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, tp.size + 1)
    recall = cum_tp / num_gt
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[1.0], precision])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def average_precision(
    predictions: Sequence[Sequence[Prediction]],
    scenes: Sequence[Scene],
    iou_fn: Callable = mask_overlap,
    thresholds: Sequence[float] = AP_THRESHOLDS,
) -> tuple[float, dict[int, float]]:
    """Mean AP over classes and thresholds, plus the per-class breakdown.

    A class enters the mean when it has ground truth or predictions; a
    predicted class with no ground truth contributes 0.
    """
    if len(predictions) != len(scenes):
        raise ValueError("one prediction list per scene")
    gts = _gt_instances(scenes)
    gt_classes = {g.class_id for g in gts}
    pred_classes = {p.class_id for scene_preds in predictions for p in scene_preds}
    classes = sorted(gt_classes | pred_classes)
    if not classes:
        raise ValueError("nothing to evaluate: no ground truth and no predictions")
    per_class: dict[int, float] = {}
    for class_id in classes:
        class_gts = [g for g in gts if g.class_id == class_id]
        ranked = _ranked_predictions(predictions, class_id)
        aps = [
            _ap_from_flags(_match_flags(ranked, class_gts, iou_fn, thr), len(class_gts))
            for thr in thresholds
        ]
        per_class[class_id] = float(np.mean(aps))
    return float(np.mean(list(per_class.values()))), per_class


def coverage_metrics(
    predictions: Sequence[Sequence[Prediction]],
    scenes: Sequence[Scene],
) -> tuple[float, float, float, float]:
    """(mCov, mWCov, mPrec50, mRec50) over binarized masks.

    Coverage takes each ground-truth instance's best mask IoU against any
    same-scene prediction, class-agnostic; the weighted variant scales by
    instance point count. Precision and recall match predictions to
    ground truth of the same class at IoU >= 0.5 and average per class.
    """
    if len(predictions) != len(scenes):
        raise ValueError("one prediction list per scene")
    gts = _gt_instances(scenes)
    if not gts:
        raise ValueError("coverage metrics need at least one ground-truth instance")
    best = np.zeros(len(gts))
    for g_idx, gt in enumerate(gts):
        for pred in predictions[gt.scene]:
            best[g_idx] = max(best[g_idx], mask_iou(pred.mask, gt.mask))
    sizes = np.asarray([g.size for g in gts], dtype=np.float64)
    mcov = float(best.mean())
    mwcov = float((best * sizes).sum() / sizes.sum())

    gt_classes = {g.class_id for g in gts}
    pred_classes = {p.class_id for scene_preds in predictions for p in scene_preds}
    precisions, recalls = [], []
    for class_id in sorted(gt_classes | pred_classes):
        class_gts = [g for g in gts if g.class_id == class_id]
        ranked = _ranked_predictions(predictions, class_id)
        tp = _match_flags(ranked, class_gts, mask_overlap, 0.5)
        matched = int(tp.sum())
        precisions.append(matched / len(ranked) if ranked else 0.0)
        recalls.append(matched / len(class_gts) if class_gts else 0.0)
    return mcov, mwcov, float(np.mean(precisions)), float(np.mean(recalls))


@dataclass
class EvalReport:
    """Headline metrics plus a per-class breakdown."""

    ap: float
    ap50: float
    ap25: float
    box_ap50: float
    box_ap25: float
    mcov: float
    mwcov: float
    mprec50: float
    mrec50: float
    per_class: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "AP": self.ap,
            "AP50": self.ap50,
            "AP25": self.ap25,
            "BoxAP50": self.box_ap50,
            "BoxAP25": self.box_ap25,
            "mCov": self.mcov,
            "mWCov": self.mwcov,
            "mPrec50": self.mprec50,
            "mRec50": self.mrec50,
        }


def evaluate(
    predictions: Sequence[Sequence[Prediction]],
    scenes: Sequence[Scene],
) -> EvalReport:
    """Full metric sweep: mask AP, box AP, and coverage."""
    ap, pc_ap = average_precision(predictions, scenes, mask_overlap, AP_THRESHOLDS)
    ap50, pc_ap50 = average_precision(predictions, scenes, mask_overlap, (0.5,))
    ap25, pc_ap25 = average_precision(predictions, scenes, mask_overlap, (0.25,))
    box50, pc_box50 = average_precision(predictions, scenes, box_overlap, (0.5,))
    box25, pc_box25 = average_precision(predictions, scenes, box_overlap, (0.25,))
    mcov, mwcov, mprec, mrec = coverage_metrics(predictions, scenes)
    per_class = {
        class_id: {
            "ap": pc_ap[class_id],
            "ap50": pc_ap50[class_id],
            "ap25": pc_ap25[class_id],
            "box_ap50": pc_box50[class_id],
            "box_ap25": pc_box25[class_id],
        }
        for class_id in pc_ap
    }
    return EvalReport(ap, ap50, ap25, box50, box25, mcov, mwcov, mprec, mrec, per_class)
