"""YOLO-style detector: CBS/C3 backbone with attention-modified blocks,
SPPF, a top-down fusion neck, and anchor-based heads on up to three scales.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import C3, CBS, C3Cbam, SPPF, Conv2dParams, iter_buffers, iter_params
from .boxes import BoundingBox, Detection
from .tensor import Tensor

CLASS_NAMES = ["pothole", "longitudinal_crack", "alligator_crack", "raveling"]

# one backbone stage per stride; cbam_sites name the C3 blocks that carry
# attention (default: all of them)
BACKBONE_C3_NAMES = ["c3_1", "c3_2", "c3_3", "c3_4"]

DEFAULT_ANCHORS = [
    [(12.0, 16.0), (19.0, 36.0), (40.0, 28.0)],     # stride 8
    [(36.0, 75.0), (76.0, 55.0), (72.0, 146.0)],    # stride 16
    [(142.0, 110.0), (192.0, 243.0), (120.0, 400.0)],  # stride 32
]


@dataclass
class NetworkConfig:
    input_size: int = 160
    num_classes: int = 4
    channels: tuple = (16, 32, 64, 128, 256)
    num_scales: int = 3
    anchors: list = field(default_factory=lambda: [list(a) for a in DEFAULT_ANCHORS])
    cbam_sites: tuple = tuple(BACKBONE_C3_NAMES)
    cbam_reduction: int = 16
    bottlenecks_per_c3: int = 1
    class_names: tuple = tuple(CLASS_NAMES)

    def __post_init__(self):
        if len(self.channels) != 5:
            raise ValueError("channels must list 5 stage widths")
        if any(c <= 0 for c in self.channels):
            raise ValueError("channel counts must be positive")
        if not 1 <= self.num_scales <= 3:
            raise ValueError("num_scales must be 1..3")
        for site in self.cbam_sites:
            if site not in BACKBONE_C3_NAMES:
                raise ValueError(f"unknown cbam site {site!r}")
        for scale in self.anchors:
            for w, h in scale:
                if w <= 0 or h <= 0:
                    raise ValueError(f"anchor ({w},{h}) must be positive")
        if len(self.anchors) < self.num_scales:
            raise ValueError("need one anchor set per scale")

    @property
    def strides(self) -> list[int]:
        return [8, 16, 32][: self.num_scales]

    @property
    def anchors_per_scale(self) -> int:
        return len(self.anchors[0])

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "num_classes": self.num_classes,
            "channels": list(self.channels),
            "num_scales": self.num_scales,
            "anchors": [[list(a) for a in s] for s in self.anchors],
            "cbam_sites": list(self.cbam_sites),
            "cbam_reduction": self.cbam_reduction,
            "bottlenecks_per_c3": self.bottlenecks_per_c3,
            "class_names": list(self.class_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(
            input_size=d["input_size"],
            num_classes=d["num_classes"],
            channels=tuple(d["channels"]),
            num_scales=d["num_scales"],
            anchors=[[tuple(a) for a in s] for s in d["anchors"]],
            cbam_sites=tuple(d["cbam_sites"]),
            cbam_reduction=d["cbam_reduction"],
            bottlenecks_per_c3=d["bottlenecks_per_c3"],
            class_names=tuple(d.get("class_names", CLASS_NAMES)),
        )


def _make_c3(name: str, c_in: int, c_out: int, cfg: NetworkConfig, rng, dtype):
    n = cfg.bottlenecks_per_c3
    if name in cfg.cbam_sites:
        return C3Cbam(c_in, c_out, n, cfg.cbam_reduction, rng=rng, dtype=dtype)
    return C3(c_in, c_out, n, rng=rng, dtype=dtype)


class Detector:
    def __init__(self, config: NetworkConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(seed)
        ch = config.channels
        A, C = config.anchors_per_scale, config.num_classes

        self.stem = CBS(3, ch[0], 3, 2, rng=rng, dtype=dtype)
        self.down1 = CBS(ch[0], ch[1], 3, 2, rng=rng, dtype=dtype)
        self.c3_1 = _make_c3("c3_1", ch[1], ch[1], config, rng, dtype)
        self.down2 = CBS(ch[1], ch[2], 3, 2, rng=rng, dtype=dtype)
        self.c3_2 = _make_c3("c3_2", ch[2], ch[2], config, rng, dtype)
        self.down3 = CBS(ch[2], ch[3], 3, 2, rng=rng, dtype=dtype)
        self.c3_3 = _make_c3("c3_3", ch[3], ch[3], config, rng, dtype)
        self.down4 = CBS(ch[3], ch[4], 3, 2, rng=rng, dtype=dtype)
        self.c3_4 = _make_c3("c3_4", ch[4], ch[4], config, rng, dtype)
        self.sppf = SPPF(ch[4], ch[4], 5, rng=rng, dtype=dtype)

        # top-down fusion
        self.lat5 = CBS(ch[4], ch[3], 1, rng=rng, dtype=dtype)
        self.fuse4 = C3(2 * ch[3], ch[3], config.bottlenecks_per_c3, rng=rng, dtype=dtype)
        self.lat4 = CBS(ch[3], ch[2], 1, rng=rng, dtype=dtype)
        self.fuse3 = C3(2 * ch[2], ch[2], config.bottlenecks_per_c3, rng=rng, dtype=dtype)

        out_ch = A * (5 + C)
        head_src = [ch[2], ch[3], ch[4]][: config.num_scales]
        self.heads = [Conv2dParams(c, out_ch, 1, bias=True, rng=rng, dtype=dtype)
                      for c in head_src]
        for head in self.heads:
            b = head.bias.data.reshape(A, 5 + C)
            b[:, 4] = -4.0  # objectness prior: most cells are background
        self.last_activation: dict[str, Tensor] = {}

    # -- forward -------------------------------------------------------------

    def forward(self, image: Tensor, training: bool = False,
                capture: tuple = ()) -> list[Tensor]:
        """Run the network; returns one raw prediction tensor per scale.

        ``capture`` names intermediate feature maps to retain (with grads)
        for introspection; they land in ``self.last_activation``.
        """
        cfg = self.config
        if image.ndim != 4 or image.shape[1] != 3 or image.shape[2] != cfg.input_size \
                or image.shape[3] != cfg.input_size:
            raise T.ShapeError(
                f"expected input [N,3,{cfg.input_size},{cfg.input_size}], got {image.shape}")
        self.last_activation = {}

        def keep(name, t):
            if name in capture:
                t.retain_grad = True
                self.last_activation[name] = t
            return t

        x = self.stem(image, training)
        x = keep("c3_1", self.c3_1(self.down1(x, training), training))
        p3 = keep("c3_2", self.c3_2(self.down2(x, training), training))
        p4 = keep("c3_3", self.c3_3(self.down3(p3, training), training))
        p5 = keep("c3_4", self.c3_4(self.down4(p4, training), training))
        p5 = keep("sppf", self.sppf(p5, training))

        n4 = self.fuse4(T.concat([T.upsample_nearest2x(self.lat5(p5, training)), p4], axis=1),
                        training)
        n3 = self.fuse3(T.concat([T.upsample_nearest2x(self.lat4(n4, training)), p3], axis=1),
                        training)
        feats = [keep("neck_p3", n3), keep("neck_p4", n4), p5][: cfg.num_scales]
        return [head(f) for head, f in zip(self.heads, feats)]

    __call__ = forward

    # -- parameter access ----------------------------------------------------

    def named_parameters(self):
        yield from iter_params(self)

    def named_buffers(self):
        yield from iter_buffers(self)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def decode(raw: list[Tensor] | list[np.ndarray], config: NetworkConfig,
           conf_threshold: float = 0.25) -> list[list[Detection]]:
    """Turn raw head outputs into per-image detection lists.

    Box decoding follows the 2*sigmoid convention: centers offset within
    the cell, sizes as (2*sigmoid)^2 times the anchor.  Confidence is
    objectness times the best class probability.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError(f"conf_threshold {conf_threshold} outside [0,1]")
    A, C, S = config.anchors_per_scale, config.num_classes, config.input_size
    batch = raw[0].shape[0] if isinstance(raw[0], np.ndarray) else raw[0].data.shape[0]
    out: list[list[Detection]] = [[] for _ in range(batch)]
    for si, r in enumerate(raw):
        arr = r if isinstance(r, np.ndarray) else r.data
        n, ch, h, w = arr.shape
        stride = S // h
        p = arr.reshape(n, A, 5 + C, h, w)
        sig = 1.0 / (1.0 + np.exp(-p))
        gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        anchors = np.asarray(config.anchors[si])  # [A, 2]
        cx = (2 * sig[:, :, 0] - 0.5 + gx) * stride
        cy = (2 * sig[:, :, 1] - 0.5 + gy) * stride
        bw = (2 * sig[:, :, 2]) ** 2 * anchors[None, :, 0, None, None]
        bh = (2 * sig[:, :, 3]) ** 2 * anchors[None, :, 1, None, None]
        obj = sig[:, :, 4]
        cls = sig[:, :, 5:]
        best_cls = np.argmax(cls, axis=2)
        best_p = np.take_along_axis(cls, best_cls[:, :, None], axis=2)[:, :, 0]
        conf = obj * best_p
        for ni, ai, yi, xi in zip(*np.nonzero(conf >= conf_threshold)):
            x1 = np.clip(cx[ni, ai, yi, xi] - bw[ni, ai, yi, xi] / 2, 0, S)
            y1 = np.clip(cy[ni, ai, yi, xi] - bh[ni, ai, yi, xi] / 2, 0, S)
            x2 = np.clip(cx[ni, ai, yi, xi] + bw[ni, ai, yi, xi] / 2, 0, S)
            y2 = np.clip(cy[ni, ai, yi, xi] + bh[ni, ai, yi, xi] / 2, 0, S)
            if x2 - x1 <= 0 or y2 - y1 <= 0:
                continue
            out[ni].append(Detection(BoundingBox(float(x1), float(y1), float(x2), float(y2)),
                                     int(best_cls[ni, ai, yi, xi]),
                                     float(conf[ni, ai, yi, xi])))
    return out
