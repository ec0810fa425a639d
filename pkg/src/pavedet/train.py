"""Optimization loop: SGD with momentum and a cosine-decayed learning
rate, per-epoch train/val loss records, and best-checkpoint selection by
validation mAP@0.5.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import DatasetManifest, LabelRecord, load_image, preprocess
from .loss import LossBreakdown, assign_targets, compute_loss
from .metrics import evaluate
from .model import Detector, decode
from .metrics import nms as run_nms
from .tensor import Tensor


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    warmup_epochs: int = 2
    lambda_box: float = 0.05
    lambda_obj: float = 1.0
    lambda_cls: float = 0.5
    soft_obj_targets: bool = True
    hflip_prob: float = 0.5
    seed: int = 0
    eval_conf_threshold: float = 0.05
    eval_nms_threshold: float = 0.45

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if min(self.lambda_box, self.lambda_obj, self.lambda_cls) <= 0:
            raise ValueError("loss weights must be positive")


@dataclass
class EpochRecord:
    epoch: int
    split: str
    box: float
    obj: float
    cls: float
    total: float


@dataclass
class FitResult:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_map: float = 0.0
    best_state: dict = field(default_factory=dict)

    def write_history(self, path: Path) -> None:
        lines = ["epoch split box obj cls total"]
        for r in self.history:
            lines.append(f"{r.epoch} {r.split} {r.box:.6f} {r.obj:.6f} "
                         f"{r.cls:.6f} {r.total:.6f}")
        Path(path).write_text("\n".join(lines) + "\n")


class SGD:
    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def cosine_lr(base_lr: float, epoch: int, total_epochs: int, warmup_epochs: int) -> float:
    if epoch < warmup_epochs:
        return base_lr * (epoch + 1) / max(warmup_epochs, 1)
    t = (epoch - warmup_epochs) / max(total_epochs - warmup_epochs, 1)
    return base_lr * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * t)))


def kmeans_anchors(boxes_wh: np.ndarray, num_scales: int = 3, per_scale: int = 3,
                   seed: int = 0, iters: int = 50) -> list[list[tuple]]:
    """K-means (k = scales*per_scale) over gt box sizes in pixels,
    grouped into scales by ascending area."""
    k = num_scales * per_scale
    rng = np.random.default_rng(seed)
    if len(boxes_wh) < k:
        boxes_wh = np.tile(boxes_wh, (int(np.ceil(k / max(len(boxes_wh), 1))), 1))
    boxes_wh = np.asarray(boxes_wh, dtype=np.float64)
    # k-means++ seeding: spread initial centers by squared-distance weighting
    centers = boxes_wh[[rng.integers(len(boxes_wh))]].copy()
    while len(centers) < k:
        d2 = (np.linalg.norm(boxes_wh[:, None] - centers[None], axis=2) ** 2).min(axis=1)
        if d2.sum() <= 0:
            centers = np.vstack([centers, boxes_wh[rng.integers(len(boxes_wh))]])
            continue
        centers = np.vstack([centers, boxes_wh[rng.choice(len(boxes_wh), p=d2 / d2.sum())]])
    for _ in range(iters):
        d = np.linalg.norm(boxes_wh[:, None] - centers[None], axis=2)
        labels = d.argmin(axis=1)
        for j in range(k):
            sel = boxes_wh[labels == j]
            if len(sel):
                centers[j] = sel.mean(axis=0)
    centers = centers[np.argsort(centers.prod(axis=1))]
    centers = np.maximum(centers, 2.0)
    return [[tuple(map(float, c)) for c in centers[s * per_scale:(s + 1) * per_scale]]
            for s in range(num_scales)]


def _load_split(manifest: DatasetManifest, which: str):
    images, labels = [], []
    for entry in manifest.subset(which):
        images.append(load_image(manifest.root / entry.image))
        labels.append(manifest.labels_for(entry))
    return images, labels


def _hflip(image: np.ndarray, records: list[LabelRecord]):
    flipped = image[:, ::-1].copy()
    recs = [LabelRecord(r.class_id, 1.0 - r.cx, r.cy, r.w, r.h) for r in records]
    return flipped, recs


def model_state(model: Detector) -> dict:
    state = {name: p.data.copy() for name, p in model.named_parameters()}
    state.update({f"buffer:{name}": b.copy() for name, b in model.named_buffers()})
    return state


def load_model_state(model: Detector, state: dict) -> None:
    for name, p in model.named_parameters():
        p.data[...] = state[name]
    for name, b in model.named_buffers():
        b[...] = state[f"buffer:{name}"]


def evaluate_model(model: Detector, images, labels, conf_threshold=0.1,
                   nms_threshold=0.45, batch_size=16):
    """mAP@0.5 evaluation of a model over in-memory images/labels."""
    cfg = model.config
    dets_all, gts_all = [], []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            tensors = [preprocess(img, cfg.input_size)[0].data for img in chunk]
            raw = model.forward(Tensor(np.stack(tensors)))
            decoded = decode(raw, cfg, conf_threshold)
            for i, dets in enumerate(decoded):
                dets_all.append(run_nms(dets, nms_threshold))
                recs = labels[start:start + batch_size][i]
                gts_all.append([r.to_ground_truth(cfg.input_size, cfg.input_size)
                                for r in recs])
    return evaluate(dets_all, gts_all, cfg.num_classes, t=0.5, sweep=False), dets_all, gts_all


def fit(model: Detector, manifest: DatasetManifest, config: TrainConfig,
        log=print) -> FitResult:
    """Train on the manifest's train split, validating on the val split."""
    train_images, train_labels = _load_split(manifest, "train")
    val_images, val_labels = _load_split(manifest, "val")
    if not train_images:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    opt = SGD(model.parameters(), config.lr, config.momentum, config.weight_decay)
    result = FitResult()
    size = model.config.input_size
    for epoch in range(config.epochs):
        opt.lr = cosine_lr(config.lr, epoch, config.epochs, config.warmup_epochs)
        order = rng.permutation(len(train_images))
        sums = np.zeros(4)
        batches = 0
        t0 = time.time()
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            imgs, labs = [], []
            for i in idx:
                img, recs = train_images[i], train_labels[i]
                if rng.random() < config.hflip_prob:
                    img, recs = _hflip(img, recs)
                imgs.append(preprocess(img, size)[0].data)
                labs.append(recs)
            batch = Tensor(np.stack(imgs))
            raw = model.forward(batch, training=True)
            targets = assign_targets(labs, model.config)
            breakdown = compute_loss(raw, targets, model.config,
                                     config.lambda_box, config.lambda_obj,
                                     config.lambda_cls, config.soft_obj_targets)
            if not math.isfinite(breakdown.total):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} batch {batches}: "
                    f"box={breakdown.box} obj={breakdown.obj} cls={breakdown.cls}")
            opt.zero_grad()
            T.backward(breakdown.total_tensor)
            opt.step()
            sums += [breakdown.box, breakdown.obj, breakdown.cls, breakdown.total]
            batches += 1
        avg = sums / max(batches, 1)
        result.history.append(EpochRecord(epoch, "train", *avg))

        # validation loss + mAP
        if val_images:
            vsums = np.zeros(4)
            vbatches = 0
            with T.no_grad():
                for start in range(0, len(val_images), config.batch_size):
                    imgs = [preprocess(img, size)[0].data
                            for img in val_images[start:start + config.batch_size]]
                    labs = val_labels[start:start + config.batch_size]
                    raw = model.forward(Tensor(np.stack(imgs)))
                    targets = assign_targets(labs, model.config)
                    breakdown = compute_loss(raw, targets, model.config,
                                             config.lambda_box, config.lambda_obj,
                                             config.lambda_cls, config.soft_obj_targets)
                    vsums += [breakdown.box, breakdown.obj, breakdown.cls,
                              breakdown.total]
                    vbatches += 1
            vavg = vsums / max(vbatches, 1)
            result.history.append(EpochRecord(epoch, "val", *vavg))
            report, _, _ = evaluate_model(model, val_images, val_labels,
                                          config.eval_conf_threshold,
                                          config.eval_nms_threshold)
            if report.map50 >= result.best_map:
                result.best_map = report.map50
                result.best_epoch = epoch
                result.best_state = model_state(model)
            log(f"epoch {epoch}: lr={opt.lr:.4f} train={avg[3]:.4f} "
                f"val={vavg[3]:.4f} mAP50={report.map50:.4f} "
                f"({time.time() - t0:.1f}s)")
        else:
            result.best_state = model_state(model)
            result.best_epoch = epoch
            log(f"epoch {epoch}: lr={opt.lr:.4f} train={avg[3]:.4f} "
                f"({time.time() - t0:.1f}s)")
    return result
