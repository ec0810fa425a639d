"""Gradient-weighted class activation maps over detector feature layers.

The attributed scalar is objectness times best-class probability of a
chosen detection; channel weights are the spatial means of its gradient
on the chosen layer, and the map is the ReLU of the weighted channel sum,
bilinearly upsampled and min-max normalized.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import tensor as T
from .boxes import Detection
from .metrics import nms as run_nms
from .model import Detector, decode
from .tensor import Tensor

DEFAULT_LAYER = "c3_4"  # last backbone C3 output

CAPTURABLE_LAYERS = ("c3_1", "c3_2", "c3_3", "c3_4", "sppf", "neck_p3", "neck_p4")


@dataclass
class Heatmap:
    values: np.ndarray  # [H, W] in [0,1]
    source_layer: str
    target: int | str


def _provenance_map(raw, config, conf_threshold):
    """Decode raw heads keeping (scale, anchor, gy, gx, class) per detection."""
    dets = decode(raw, config, conf_threshold)[0]
    # recover provenance by re-running the argmax logic cell by cell
    prov: dict[int, tuple] = {}
    A, C, S = config.anchors_per_scale, config.num_classes, config.input_size
    for si, r in enumerate(raw):
        arr = r.data if isinstance(r, Tensor) else r
        n, ch, h, w = arr.shape
        p = arr.reshape(n, A, 5 + C, h, w)
        sig = 1.0 / (1.0 + np.exp(-p))
        obj = sig[0, :, 4]
        cls = sig[0, :, 5:]
        best_cls = np.argmax(cls, axis=1)
        best_p = np.take_along_axis(cls, best_cls[:, None], axis=1)[:, 0]
        conf = obj * best_p
        for ai, yi, xi in zip(*np.nonzero(conf >= conf_threshold)):
            key = (round(float(conf[ai, yi, xi]), 9), int(best_cls[ai, yi, xi]))
            prov.setdefault(key, (si, int(ai), int(yi), int(xi), int(best_cls[ai, yi, xi])))
    out = []
    for d in dets:
        key = (round(d.confidence, 9), d.class_id)
        if key in prov:
            out.append((d, prov[key]))
    return out


def compute_gradcam(model: Detector, image: Tensor, layer: str = DEFAULT_LAYER,
                    detection_index: int = 0, conf_threshold: float = 0.25,
                    nms_threshold: float = 0.45) -> tuple[Heatmap, list[Detection]]:
    """Heatmap for one detection's score on ``layer``.

    Runs a private forward pass with the layer retained, picks the
    ``detection_index``-th surviving detection (confidence order after
    NMS), and backpropagates its objectness*class score.
    """
    if layer not in CAPTURABLE_LAYERS:
        raise ValueError(f"layer {layer!r} has no capturable spatial activation; "
                         f"choose one of {CAPTURABLE_LAYERS}")
    if image.ndim == 3:
        image = T.reshape(image, (1,) + image.shape)
    cfg = model.config
    with _MODEL_GRAD_LOCK:
        return _compute_gradcam_locked(model, image, layer, detection_index,
                                       conf_threshold, nms_threshold)


_MODEL_GRAD_LOCK = threading.Lock()  # model grads are shared state


def _compute_gradcam_locked(model, image, layer, detection_index,
                            conf_threshold, nms_threshold):
    cfg = model.config
    model.zero_grad()
    raw = model.forward(image, capture=(layer,))
    with_prov = _provenance_map(raw, cfg, conf_threshold)
    kept = run_nms([d for d, _ in with_prov], nms_threshold)
    prov_by_id = {id(d): p for d, p in with_prov}
    act = model.last_activation[layer]
    if not kept or detection_index >= len(kept):
        T._clear_tape()
        hm = Heatmap(np.zeros((cfg.input_size, cfg.input_size)), layer, detection_index)
        return hm, kept
    target = kept[detection_index]
    si, ai, gy, gx, cid = prov_by_id[id(target)]
    A, C = cfg.anchors_per_scale, cfg.num_classes
    r = raw[si]
    cell = T.narrow(T.narrow(r, 2, gy, 1), 3, gx, 1)  # [1, A*(5+C), 1, 1]
    obj = T.narrow(cell, 1, ai * (5 + C) + 4, 1)
    cls = T.narrow(cell, 1, ai * (5 + C) + 5 + cid, 1)
    score = T.tsum(T.mul(T.sigmoid(obj), T.sigmoid(cls)))
    T.backward(score)
    grad = act.grad[0] if act.grad is not None else np.zeros_like(act.data[0])
    activ = act.data[0]
    model.zero_grad()
    cam_img = cam_from_gradients(grad, activ, cfg.input_size)
    return Heatmap(cam_img, layer, detection_index), kept


def cam_from_gradients(grad: np.ndarray, activation: np.ndarray,
                       size: int) -> np.ndarray:
    """[C,H,W] gradient + activation -> normalized [size,size] heatmap.

    Channel weights are spatial gradient means; the map is the ReLU of the
    weighted channel sum, bilinearly upsampled, then min-max normalized.
    """
    alpha = grad.mean(axis=(1, 2))
    cam = np.maximum((alpha[:, None, None] * activation).sum(axis=0), 0.0)
    cam_img = np.asarray(Image.fromarray(cam.astype(np.float32), mode="F")
                         .resize((size, size), Image.Resampling.BILINEAR))
    peak, lo = cam_img.max(), cam_img.min()
    if peak > lo:
        cam_img = (cam_img - lo) / (peak - lo)
    elif peak > 0:  # constant positive map: saturate rather than divide by zero
        cam_img = np.ones_like(cam_img)
    return cam_img.astype(np.float64)


def colormap_table() -> np.ndarray:
    """Fixed 256-entry blue->cyan->yellow->red table (uint8 RGB)."""
    t = np.arange(256) / 255.0
    r = np.clip(np.minimum(4 * t - 1.5, -4 * t + 4.5), 0, 1)
    g = np.clip(np.minimum(4 * t - 0.5, -4 * t + 3.5), 0, 1)
    b = np.clip(np.minimum(4 * t + 0.5, -4 * t + 2.5), 0, 1)
    return np.round(np.stack([r, g, b], axis=1) * 255).astype(np.uint8)


_COLORMAP = colormap_table()


def overlay(heatmap: Heatmap, image: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend the colormapped heatmap onto an HWC uint8 image."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0,1]")
    if heatmap.values.shape != image.shape[:2]:
        raise ValueError(f"heatmap {heatmap.values.shape} does not match "
                         f"image {image.shape[:2]}")
    idx = np.clip(np.round(heatmap.values * 255), 0, 255).astype(np.uint8)
    colored = _COLORMAP[idx]
    if alpha == 0.0:
        return image.copy()
    if alpha == 1.0:
        return colored.copy()
    return np.clip(np.round((1 - alpha) * image.astype(np.float64)
                            + alpha * colored.astype(np.float64)), 0, 255).astype(np.uint8)
