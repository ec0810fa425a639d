"""Target assignment and the three-part detection loss (box / objectness /
classification).

Assignment follows the anchor-ratio rule: a ground truth is matched to
every anchor whose width/height ratio against the box stays below 4, at
the cell containing the box center plus the two nearest neighbor cells.
Box quality is complete-IoU; objectness targets are the detached CIoU of
each positive (soft labels), optionally hard 1.0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import LabelRecord
from .model import NetworkConfig
from .tensor import Tensor

ANCHOR_RATIO_LIMIT = 4.0


class TargetError(ValueError):
    """Raised for ill-formed ground-truth boxes."""


@dataclass
class ScaleTargets:
    """Positive assignments for one prediction scale."""

    grid: int
    stride: int
    flat_idx: np.ndarray      # index into the flattened [N*A*H*W] cell list
    cell_xy: np.ndarray       # [P,2] integer cell coordinates
    t_xy: np.ndarray          # [P,2] gt centers in grid units
    t_wh: np.ndarray          # [P,2] gt sizes in pixels
    anchor_wh: np.ndarray     # [P,2] matched anchor sizes in pixels
    t_cls: np.ndarray         # [P] class ids
    num_cells: int


@dataclass
class LossBreakdown:
    box: float
    obj: float
    cls: float
    total: float
    num_positives: int
    total_tensor: Tensor | None = None


def assign_targets(gt_per_image: list[list[LabelRecord]],
                   config: NetworkConfig) -> list[ScaleTargets]:
    """Build per-scale positive assignments for one batch of label lists."""
    n = len(gt_per_image)
    A = config.anchors_per_scale
    size = config.input_size
    out: list[ScaleTargets] = []
    for si, stride in enumerate(config.strides):
        g = size // stride
        anchors = np.asarray(config.anchors[si], dtype=np.float64)
        rows = {"flat": [], "cell": [], "xy": [], "wh": [], "awh": [], "cls": []}
        for bi, records in enumerate(gt_per_image):
            for ri, rec in enumerate(records):
                if rec.w <= 0 or rec.h <= 0:
                    raise TargetError(f"image {bi} gt {ri}: non-positive box size")
                wpx, hpx = rec.w * size, rec.h * size
                gx, gy = rec.cx * g, rec.cy * g
                cx, cy = int(gx), int(gy)
                cx, cy = min(cx, g - 1), min(cy, g - 1)
                cells = [(cx, cy)]
                fx, fy = gx - cx, gy - cy
                if fx < 0.5 and cx > 0:
                    cells.append((cx - 1, cy))
                elif fx >= 0.5 and cx < g - 1:
                    cells.append((cx + 1, cy))
                if fy < 0.5 and cy > 0:
                    cells.append((cx, cy - 1))
                elif fy >= 0.5 and cy < g - 1:
                    cells.append((cx, cy + 1))
                for ai, (aw, ah) in enumerate(anchors):
                    ratio = max(wpx / aw, aw / wpx, hpx / ah, ah / hpx)
                    if ratio >= ANCHOR_RATIO_LIMIT:
                        continue
                    for ccx, ccy in cells:
                        rows["flat"].append(((bi * A + ai) * g + ccy) * g + ccx)
                        rows["cell"].append((ccx, ccy))
                        rows["xy"].append((gx, gy))
                        rows["wh"].append((wpx, hpx))
                        rows["awh"].append((aw, ah))
                        rows["cls"].append(rec.class_id)
        out.append(ScaleTargets(
            grid=g, stride=stride,
            flat_idx=np.asarray(rows["flat"], dtype=np.int64),
            cell_xy=np.asarray(rows["cell"], dtype=np.float64).reshape(-1, 2),
            t_xy=np.asarray(rows["xy"], dtype=np.float64).reshape(-1, 2),
            t_wh=np.asarray(rows["wh"], dtype=np.float64).reshape(-1, 2),
            anchor_wh=np.asarray(rows["awh"], dtype=np.float64).reshape(-1, 2),
            t_cls=np.asarray(rows["cls"], dtype=np.int64),
            num_cells=n * A * g * g))
    return out


def _ciou(px, py, pw, ph, target: ScaleTargets) -> Tensor:
    """Complete IoU between predicted boxes (grid-unit tensors) and targets."""
    tx = Tensor(target.t_xy[:, 0])
    ty = Tensor(target.t_xy[:, 1])
    tw = Tensor(target.t_wh[:, 0] / target.stride)
    th = Tensor(target.t_wh[:, 1] / target.stride)
    half = Tensor(np.asarray(0.5))
    px1, px2 = px - pw * half, px + pw * half
    py1, py2 = py - ph * half, py + ph * half
    tx1, tx2 = tx - tw * half, tx + tw * half
    ty1, ty2 = ty - th * half, ty + th * half
    iw = T.clamp(T.minimum(px2, tx2) - T.maximum(px1, tx1), lo=0.0)
    ih = T.clamp(T.minimum(py2, ty2) - T.maximum(py1, ty1), lo=0.0)
    inter = iw * ih
    union = pw * ph + tw * th - inter + 1e-9
    iou = inter / union
    # enclosing box diagonal and center distance
    cw = T.maximum(px2, tx2) - T.minimum(px1, tx1)
    chh = T.maximum(py2, ty2) - T.minimum(py1, ty1)
    c2 = cw * cw + chh * chh + 1e-9
    rho2 = (px - tx) * (px - tx) + (py - ty) * (py - ty)
    v = T.mul(T.pow_const(T.atan(tw / th) - T.atan(pw / ph), 2),
              Tensor(np.asarray(4.0 / math.pi ** 2)))
    alpha = v / (Tensor(np.asarray(1.0)) - iou + v + Tensor(np.asarray(1e-9)))
    return iou - rho2 / c2 - alpha * v


def compute_loss(raw: list[Tensor], targets: list[ScaleTargets],
                 config: NetworkConfig,
                 lambda_box: float = 0.05, lambda_obj: float = 1.0,
                 lambda_cls: float = 0.5,
                 soft_obj_targets: bool = True) -> LossBreakdown:
    """Three-part loss over one batch; differentiable through ``raw``."""
    A, C = config.anchors_per_scale, config.num_classes
    box_terms, cls_terms, obj_terms = [], [], []
    n_pos = 0
    for r, tgt in zip(raw, targets):
        n, ch, h, w = r.shape
        if ch != A * (5 + C):
            raise T.ShapeError(f"raw channels {ch} != A*(5+C)={A * (5 + C)}")
        flat = T.reshape(
            T.transpose(T.reshape(r, (n, A, 5 + C, h, w)), (0, 1, 3, 4, 2)),
            (n * A * h * w, 5 + C))
        obj_target = np.zeros(tgt.num_cells, dtype=r.dtype)
        if len(tgt.flat_idx):
            n_pos += len(tgt.flat_idx)
            p = T.index_select0(flat, tgt.flat_idx)
            px = T.mul(T.sigmoid(T.narrow(p, 1, 0, 1)), Tensor(np.asarray(2.0))) \
                - Tensor(np.asarray(0.5)) + Tensor(tgt.cell_xy[:, 0:1])
            py = T.mul(T.sigmoid(T.narrow(p, 1, 1, 1)), Tensor(np.asarray(2.0))) \
                - Tensor(np.asarray(0.5)) + Tensor(tgt.cell_xy[:, 1:2])
            pw = T.mul(T.pow_const(T.mul(T.sigmoid(T.narrow(p, 1, 2, 1)),
                                         Tensor(np.asarray(2.0))), 2),
                       Tensor(tgt.anchor_wh[:, 0:1] / tgt.stride))
            ph = T.mul(T.pow_const(T.mul(T.sigmoid(T.narrow(p, 1, 3, 1)),
                                         Tensor(np.asarray(2.0))), 2),
                       Tensor(tgt.anchor_wh[:, 1:2] / tgt.stride))
            ciou = _ciou(T.reshape(px, (-1,)), T.reshape(py, (-1,)),
                         T.reshape(pw, (-1,)), T.reshape(ph, (-1,)),
                         tgt)
            box_terms.append(T.tmean(Tensor(np.asarray(1.0)) - ciou))
            if soft_obj_targets:
                obj_target[tgt.flat_idx] = np.clip(ciou.data, 0.0, 1.0)
            else:
                obj_target[tgt.flat_idx] = 1.0
            cls_logits = T.narrow(p, 1, 5, C)
            onehot = np.zeros((len(tgt.t_cls), C), dtype=r.dtype)
            onehot[np.arange(len(tgt.t_cls)), tgt.t_cls] = 1.0
            cls_terms.append(T.tmean(T.bce_with_logits(cls_logits, onehot)))
        obj_logits = T.reshape(T.narrow(flat, 1, 4, 1), (-1,))
        obj_terms.append(T.tmean(T.bce_with_logits(obj_logits, obj_target)))

    def _avg(terms):
        if not terms:
            return Tensor(np.asarray(0.0, dtype=raw[0].dtype))
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return T.mul(total, Tensor(np.asarray(1.0 / len(terms))))

    box_l, obj_l, cls_l = _avg(box_terms), _avg(obj_terms), _avg(cls_terms)
    total = T.mul(box_l, Tensor(np.asarray(lambda_box))) \
        + T.mul(obj_l, Tensor(np.asarray(lambda_obj))) \
        + T.mul(cls_l, Tensor(np.asarray(lambda_cls)))
    box_f, obj_f, cls_f = float(box_l.data), float(obj_l.data), float(cls_l.data)
    return LossBreakdown(box=box_f, obj=obj_f, cls=cls_f,
                         total=lambda_box * box_f + lambda_obj * obj_f + lambda_cls * cls_f,
                         num_positives=n_pos, total_tensor=total)
