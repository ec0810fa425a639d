"""Detection metrics: IoU, greedy NMS, confidence-ordered matching,
precision/recall, average precision, mAP, and confidence-sweep curves.

All functions are pure over value inputs.  Zero-denominator conventions:
precision is 1.0 when nothing was predicted; classes without ground truth
are excluded from mAP.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import BoundingBox, Detection, GroundTruth


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def nms(dets: list[Detection], iou_threshold: float = 0.45) -> list[Detection]:
    """Class-wise greedy suppression, highest confidence first.

    Ties in confidence break by input order; output sorted by descending
    confidence (then input index).
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold {iou_threshold} outside [0,1]")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept: list[int] = []
    for i in order:
        d = dets[i]
        if all(dets[j].class_id != d.class_id or iou(dets[j].box, d.box) <= iou_threshold
               for j in kept):
            kept.append(i)
    return [dets[i] for i in kept]


def match(dets: list[Detection], gts: list[GroundTruth], t: float = 0.5):
    """Greedy one-to-one matching of detections to ground truths.

    Returns (flags, fn_count) where flags[i] is True iff the i-th detection
    (in descending-confidence order) is a true positive.  Each detection
    claims the highest-IoU unmatched same-class ground truth with IoU >= t.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    taken = [False] * len(gts)
    flags: list[bool] = []
    for i in order:
        d = dets[i]
        best_j, best_v = -1, -1.0
        for j, g in enumerate(gts):
            if taken[j] or g.class_id != d.class_id:
                continue
            v = iou(d.box, g.box)
            if v >= t and v > best_v:
                best_j, best_v = j, v
        if best_j >= 0:
            taken[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, taken.count(False)


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float]:
    precision = tp / (tp + fp) if tp + fp > 0 else 1.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return precision, recall


def average_precision(flags: list[bool], total_gts: int,
                      interpolation: str = "all_point") -> float:
    """Area under the monotone precision envelope of the PR curve.

    ``flags`` must already be in descending-confidence order.
    ``interpolation`` is ``all_point`` (default) or ``101_point``.
    """
    if total_gts < 1:
        raise ValueError("average_precision needs at least one ground truth")
    tp = np.cumsum([1 if f else 0 for f in flags])
    fp = np.cumsum([0 if f else 1 for f in flags])
    recalls = tp / total_gts
    precisions = tp / np.maximum(tp + fp, 1)
    # monotone non-increasing envelope, right to left
    env = np.maximum.accumulate(precisions[::-1])[::-1]
    if interpolation == "101_point":
        grid = np.linspace(0, 1, 101)
        vals = np.zeros_like(grid)
        for k, r in enumerate(grid):
            mask = recalls >= r
            vals[k] = env[mask][0] if mask.any() else 0.0
        return float(vals.mean())
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recalls, env):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def mean_ap(per_class_ap: dict[int, float]) -> float:
    if not per_class_ap:
        raise ValueError("mean_ap over zero included classes")
    return float(np.mean(list(per_class_ap.values())))


@dataclass
class EvalReport:
    iou_threshold: float
    per_class_ap: dict = field(default_factory=dict)
    excluded_classes: list = field(default_factory=list)
    map50: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    precision: float = 1.0
    recall: float = 0.0
    sweep_thresholds: list = field(default_factory=list)
    sweep_precision: list = field(default_factory=list)
    sweep_recall: list = field(default_factory=list)

    def summary_line(self) -> str:
        parts = [f"mAP@{self.iou_threshold:g}={self.map50:.4f}",
                 f"P={self.precision:.4f}", f"R={self.recall:.4f}",
                 f"TP={self.tp}", f"FP={self.fp}", f"FN={self.fn}"]
        return " ".join(parts)

    def to_text(self, class_names=None) -> str:
        lines = [f"# evaluation report (IoU threshold {self.iou_threshold:g})",
                 self.summary_line(), "", "class ap"]
        for cid, ap in sorted(self.per_class_ap.items()):
            name = class_names[cid] if class_names else str(cid)
            lines.append(f"{name} {ap:.6f}")
        for cid in self.excluded_classes:
            name = class_names[cid] if class_names else str(cid)
            lines.append(f"{name} excluded(no ground truth)")
        lines += ["", "tau precision recall"]
        for tau, p, r in zip(self.sweep_thresholds, self.sweep_precision, self.sweep_recall):
            lines.append(f"{tau:.3f} {p:.6f} {r:.6f}")
        return "\n".join(lines) + "\n"


def confidence_sweep(dets_per_image: list[list[Detection]],
                     gts_per_image: list[list[GroundTruth]],
                     t: float = 0.5,
                     thresholds: np.ndarray | None = None):
    """Precision and recall as functions of the confidence cut-off."""
    if thresholds is None:
        thresholds = np.linspace(0.0, 1.0, 21)
    thresholds = np.asarray(thresholds)
    ps, rs = [], []
    for tau in thresholds:
        tp = fp = fn = 0
        for dets, gts in zip(dets_per_image, gts_per_image):
            kept = [d for d in dets if d.confidence >= tau]
            flags, miss = match(kept, gts, t)
            tp += sum(flags)
            fp += len(flags) - sum(flags)
            fn += miss
        p, r = precision_recall(tp, fp, fn)
        ps.append(p)
        rs.append(r)
    return thresholds, np.asarray(ps), np.asarray(rs)


def evaluate(dets_per_image: list[list[Detection]],
             gts_per_image: list[list[GroundTruth]],
             num_classes: int, t: float = 0.5,
             interpolation: str = "all_point",
             sweep: bool = True) -> EvalReport:
    """Full dataset evaluation: per-class AP, mAP and count totals."""
    report = EvalReport(iou_threshold=t)
    # rank detections per class across the dataset, matching within images
    per_class_records: dict[int, list[tuple[float, bool]]] = {c: [] for c in range(num_classes)}
    gt_counts = {c: 0 for c in range(num_classes)}
    total_tp = total_fp = total_fn = 0
    for dets, gts in zip(dets_per_image, gts_per_image):
        for g in gts:
            gt_counts[g.class_id] += 1
        order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
        flags, miss = match(dets, gts, t)
        total_tp += sum(flags)
        total_fp += len(flags) - sum(flags)
        total_fn += miss
        for rank, i in enumerate(order):
            per_class_records[dets[i].class_id].append((dets[i].confidence, flags[rank]))
    for c in range(num_classes):
        if gt_counts[c] == 0:
            report.excluded_classes.append(c)
            continue
        recs = sorted(per_class_records[c], key=lambda x: -x[0])
        report.per_class_ap[c] = average_precision([f for _, f in recs], gt_counts[c],
                                                   interpolation)
    report.map50 = mean_ap(report.per_class_ap) if report.per_class_ap else 0.0
    report.tp, report.fp, report.fn = total_tp, total_fp, total_fn
    report.precision, report.recall = precision_recall(total_tp, total_fp, total_fn)
    if sweep:
        taus, ps, rs = confidence_sweep(dets_per_image, gts_per_image, t)
        report.sweep_thresholds = [float(x) for x in taus]
        report.sweep_precision = [float(x) for x in ps]
        report.sweep_recall = [float(x) for x in rs]
    return report
