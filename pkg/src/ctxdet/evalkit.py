"""Detection metrics: IoU and greedy AP at a 0.5 IoU threshold.

Predictions are (frame_id, class_id, score, box) tuples, ground truths are
(frame_id, class_id, box); boxes are (cx, cy, w, h) in normalized
coordinates throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def box_corners(box) -> tuple[float, float, float, float]:
    cx, cy, w, h = box
    return cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0


def iou_corners(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def iou(a, b) -> float:
    """Intersection over union of two (cx, cy, w, h) boxes."""
    if a[2] <= 0.0 or a[3] <= 0.0 or b[2] <= 0.0 or b[3] <= 0.0:
        raise ValueError(f"degenerate box: {a} vs {b}")
    return iou_corners(box_corners(a), box_corners(b))


@dataclass
class EvalReport:
    ap50: float
    per_class_ap: np.ndarray  # (C,), NaN for classes without ground truth
    tp: np.ndarray  # (C,) int
    fp: np.ndarray  # (C,) int
    fn: np.ndarray  # (C,) int
    pr_curves: dict  # class_id -> (recall array, precision array)


def _average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the precision envelope over all recall change points."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]).sum())


def ap50(preds, gts, num_classes: int, iou_threshold: float = 0.5) -> EvalReport:
    """Greedy score-ranked matching at IoU > ``iou_threshold``, per class.

    Within one class, predictions are sorted by descending score (ties keep
    input order) and each one claims the highest-IoU unmatched ground truth
    of the same frame. The overall score is the mean over classes with at
    least one ground truth.
    """
    for _, _, score, _ in preds:
        if not np.isfinite(score):
            raise ValueError("prediction scores must be finite")

    tp = np.zeros(num_classes, dtype=np.int64)
    fp = np.zeros(num_classes, dtype=np.int64)
    fn = np.zeros(num_classes, dtype=np.int64)
    per_class = np.full(num_classes, np.nan)
    curves: dict = {}

    for c in range(num_classes):
        gt_by_frame: dict = {}
        n_gt = 0
        for fid, cid, box in gts:
            if cid == c:
                gt_by_frame.setdefault(fid, []).append([box, False])
                n_gt += 1
        preds_c = [(fid, score, box) for fid, cid, score, box in preds if cid == c]
        order = sorted(range(len(preds_c)), key=lambda i: (-preds_c[i][1], i))

        hits = np.zeros(len(order))
        for rank, i in enumerate(order):
            fid, _score, box = preds_c[i]
            best_iou, best = 0.0, None
            for entry in gt_by_frame.get(fid, ()):
                if entry[1]:
                    continue
                v = iou(box, entry[0])
                if v > best_iou:
                    best_iou, best = v, entry
            if best is not None and best_iou > iou_threshold:
                best[1] = True
                hits[rank] = 1.0

        if n_gt == 0:
            continue
        tp[c] = int(hits.sum())
        fp[c] = len(order) - tp[c]
        fn[c] = n_gt - tp[c]
        if len(order) == 0:
            per_class[c] = 0.0
            curves[c] = (np.zeros(0), np.zeros(0))
            continue
        cum_tp = np.cumsum(hits)
        recall = cum_tp / n_gt
        precision = cum_tp / np.arange(1, len(order) + 1)
        per_class[c] = _average_precision(recall, precision)
        curves[c] = (recall, precision)

    with_gt = ~np.isnan(per_class)
    overall = float(per_class[with_gt].mean()) if with_gt.any() else 0.0
    return EvalReport(ap50=overall, per_class_ap=per_class, tp=tp, fp=fp, fn=fn, pr_curves=curves)


def format_report(report: EvalReport) -> str:
    """key=value rendering used by the evaluation command."""
    lines = [f"ap50={report.ap50:.6f}", f"classes={report.per_class_ap.size}"]
    for c in range(report.per_class_ap.size):
        ap = report.per_class_ap[c]
        lines.append(f"class.{c}.ap50={'nan' if np.isnan(ap) else format(ap, '.6f')}")
        lines.append(f"class.{c}.tp={report.tp[c]}")
        lines.append(f"class.{c}.fp={report.fp[c]}")
        lines.append(f"class.{c}.fn={report.fn[c]}")
    return "\n".join(lines)


def dump_pr_curves(report: EvalReport) -> str:
    """Comma-separated (class, recall, precision) rows for plotting."""
    rows = ["class,recall,precision"]
    for c in sorted(report.pr_curves):
        rec, pre = report.pr_curves[c]
        for r, p in zip(rec, pre):
            rows.append(f"{c},{r:.9g},{p:.9g}")
    return "\n".join(rows)
