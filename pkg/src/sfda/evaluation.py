"""Mean average precision at a fixed IoU threshold.

Detections are pooled across scenes per class, ranked by confidence (ties
broken lexicographically by box coordinates so the result is independent of
scene and detection order), and greedily matched to not-yet-matched ground
truth at IoU >= threshold.  AP is the exact area under the resulting
precision-recall curve; mAP averages the classes present in the ground truth.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .detector import DetectionOutput, iou_matrix
from .scenes import NUM_CLASSES, SyntheticScene


def _average_precision(tp: np.ndarray, fp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return 0.0
    if tp.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1)
    # precision envelope from the right, then integrate over recall steps
    for i in range(precision.size - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, precision):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def evaluate_map(
    detect_fn: Callable[[SyntheticScene], DetectionOutput],
    scenes: list[SyntheticScene],
    iou_thr: float = 0.5,
) -> tuple[dict[int, float], float]:
    """Returns (per-class AP for classes present in ground truth, mAP)."""
    # per class: list of (confidence, box, scene index)
    dets: dict[int, list[tuple[float, np.ndarray, int]]] = {c: [] for c in range(NUM_CLASSES)}
    gt_boxes: dict[int, list[np.ndarray]] = {}  # (class, scene) -> boxes
    gt_count = {c: 0 for c in range(NUM_CLASSES)}

    for s_idx, scene in enumerate(scenes):
        for label in scene.objects:
            gt_count[label.class_id] += 1
            gt_boxes.setdefault((label.class_id, s_idx), []).append(np.asarray(label.box))
        out = detect_fn(scene)
        for box, cid, conf in zip(out.boxes, out.class_ids, out.confidences):
            dets[int(cid)].append((float(conf), np.asarray(box, dtype=np.float64), s_idx))

    per_class: dict[int, float] = {}
    for c in range(NUM_CLASSES):
        if gt_count[c] == 0:
            continue  # class absent from ground truth: excluded from the mean
        entries = dets[c]
        if entries:
            confs = np.array([e[0] for e in entries])
            boxes = np.stack([e[1] for e in entries])
            order = np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -confs))
        else:
            order = np.zeros(0, dtype=np.int64)
        taken: dict[int, np.ndarray] = {}  # scene -> matched flags
        tp = np.zeros(order.size)
        fp = np.zeros(order.size)
        for rank, idx in enumerate(order):
            conf, box, s_idx = entries[idx]
            gts = gt_boxes.get((c, s_idx))
            if not gts:
                fp[rank] = 1.0
                continue
            flags = taken.setdefault(s_idx, np.zeros(len(gts), dtype=bool))
            ious = iou_matrix(box[None, :], np.stack(gts))[0]
            ious = np.where(flags, -1.0, ious)
            best = int(np.argmax(ious))
            if ious[best] >= iou_thr:
                flags[best] = True
                tp[rank] = 1.0
            else:
                fp[rank] = 1.0
        per_class[c] = _average_precision(tp, fp, gt_count[c])

    mean_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean_ap
