# aogdet/services/evaluation.py
# Detection metrics: IoU, one-to-one matching, average precision, top-1 accuracy.

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import List

import numpy as np

from aogdet.errors import InsufficientData
from aogdet.utils.general import box_area, box_intersection

logger = logging.getLogger(__name__)

MATCH_IOU = 0.5


# --- 1. Overlap ---

def iou(box_a, box_b):
    """Intersection over union of two (x0, y0, x1, y1) boxes; 0 for degenerate boxes."""
    inter = box_intersection(box_a, box_b)
    union = box_area(box_a) + box_area(box_b) - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_many(box, boxes):
    """Vectorized IoU of one box against an (N, 4) array."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    w = np.minimum(box[2], boxes[:, 2]) - np.maximum(box[0], boxes[:, 0])
    h = np.minimum(box[3], boxes[:, 3]) - np.maximum(box[1], boxes[:, 1])
    inter = np.clip(w, 0, None) * np.clip(h, 0, None)
    areas = np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None)
    union = box_area(box) + areas - inter
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.where(union > 0, inter / union, 0.0)


# --- 2. Matching ---

@dataclass
class MatchResult:
    flags: List[bool]
    tp: int

    @property
    def fp(self):
        return len(self.flags) - self.tp


def match_and_count(detections, groundtruth, iou_threshold=MATCH_IOU):
    """
    Greedy one-to-one matching in the given (descending score) order.

    Each detection claims the same-class groundtruth box it overlaps most;
    it is a true positive when that overlap is >= iou_threshold and the box
    is still unclaimed, otherwise a false positive (duplicates included).

    Args:
        detections: sequence of (class_name, box), sorted by descending score
        groundtruth: sequence of (class_name, box)
    """
    claimed = [False] * len(groundtruth)
    flags = []
    for label, box in detections:
        best, best_index = -1.0, -1
        for index, (gt_label, gt_box) in enumerate(groundtruth):
            if gt_label != label:
                continue
            overlap = iou(box, gt_box)
            if overlap > best:
                best, best_index = overlap, index
        if best_index >= 0 and best >= iou_threshold and not claimed[best_index]:
            claimed[best_index] = True
            flags.append(True)
        else:
            flags.append(False)
    return MatchResult(flags=flags, tp=sum(flags))


# --- 3. Average precision ---

def average_precision(flags, scores, n_gt, method='all_points'):
    """
    Area under the precision/recall curve.

    'all_points' integrates the monotone precision envelope at every recall
    step; '11_point' averages the envelope at recall 0, 0.1, ..., 1.

    Raises:
        InsufficientData: n_gt < 1
    """
    if n_gt < 1:
        raise InsufficientData("Average precision needs at least one groundtruth object")
    if len(flags) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind='stable')
    hits = np.asarray(flags, dtype=np.float64)[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    recall = tp / n_gt
    precision = tp / (tp + fp)

    if method == '11_point':
        total = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            reached = precision[recall >= t]
            total += reached.max() if reached.size else 0.0
        return float(total / 11.0)
    if method != 'all_points':
        raise ValueError(f"Unknown AP method: {method}")

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_ap(per_class):
    """Mean of the per-class AP values (0 for an empty mapping)."""
    if not per_class:
        return 0.0
    return float(np.mean(list(per_class.values())))


# --- 4. Image-level metrics ---

def top1_accuracy(best_detections, groundtruth, iou_threshold=MATCH_IOU):
    """
    Fraction of images whose single best detection hits a groundtruth object
    of the right class.

    Args:
        best_detections: per image, (class_name, box) or None
        groundtruth: per image, list of (class_name, box)
    """
    if not groundtruth:
        return 0.0
    correct = 0
    for best, gts in zip(best_detections, groundtruth):
        if best is None:
            continue
        label, box = best
        if any(gt_label == label and iou(box, gt_box) >= iou_threshold for gt_label, gt_box in gts):
            correct += 1
    return correct / len(groundtruth)


def evaluate_detections(detections_by_image, groundtruth_by_image, method='all_points'):
    """
    Per-class AP, mAP and top-1 accuracy over a test set.

    Args:
        detections_by_image: {image_id: [(class_name, score, box), ...]}
        groundtruth_by_image: {image_id: [(class_name, box), ...]}

    Returns:
        dict with 'ap' (per class), 'map', 'top1', 'n_images'
    """
    flags_by_class = defaultdict(list)
    scores_by_class = defaultdict(list)
    n_gt = defaultdict(int)
    best, truths = [], []

    for image_id, gts in groundtruth_by_image.items():
        for label, _ in gts:
            n_gt[label] += 1
        dets = sorted(detections_by_image.get(image_id, []), key=lambda d: -d[1])
        by_class = defaultdict(list)
        for label, score, box in dets:
            by_class[label].append((score, box))
        for label, items in by_class.items():
            result = match_and_count([(label, box) for _, box in items], gts)
            flags_by_class[label].extend(result.flags)
            scores_by_class[label].extend(score for score, _ in items)
        if gts:
            truths.append(gts)
            best.append((dets[0][0], dets[0][2]) if dets else None)

    ap = {label: average_precision(flags_by_class[label], scores_by_class[label], count, method)
          for label, count in sorted(n_gt.items())}
    return {'ap': ap, 'map': mean_ap(ap), 'top1': top1_accuracy(best, truths),
            'n_images': len(groundtruth_by_image)}
