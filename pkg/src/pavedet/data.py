"""Dataset handling: label-file I/O, deterministic train/val splitting,
letterbox preprocessing, and a procedural synthetic pavement-distress
generator (dark pothole blobs, thin vertical cracks, cross-hatched mesh
patches, speckle patches on a noisy asphalt texture).

Directory layout: ``<root>/images/<stem>.png`` and ``<root>/labels/<stem>.txt``
with a ``manifest.json`` listing entries, split assignment and class
histogram.  Label lines are ``class_id cx cy w h`` in normalized center form.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import BoundingBox, GroundTruth
from .tensor import Tensor

CLASS_NAMES = ["pothole", "longitudinal_crack", "alligator_crack", "raveling"]
NUM_CLASSES = len(CLASS_NAMES)
PAD_GRAY = 114


class LabelError(ValueError):
    """Raised for malformed or out-of-range label records."""


@dataclass(frozen=True)
class LabelRecord:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not 0 <= self.class_id < NUM_CLASSES:
            raise LabelError(f"class_id {self.class_id} out of range (C={NUM_CLASSES})")
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise LabelError(f"field {name}={v} outside [0,1]")
        if self.w <= 0 or self.h <= 0:
            raise LabelError("box width/height must be positive")
        if self.cx - self.w / 2 < -1e-6 or self.cx + self.w / 2 > 1 + 1e-6 \
                or self.cy - self.h / 2 < -1e-6 or self.cy + self.h / 2 > 1 + 1e-6:
            raise LabelError("box extends outside the image")

    def to_ground_truth(self, width: int, height: int) -> GroundTruth:
        x1 = max((self.cx - self.w / 2) * width, 0.0)
        y1 = max((self.cy - self.h / 2) * height, 0.0)
        x2 = min((self.cx + self.w / 2) * width, float(width))
        y2 = min((self.cy + self.h / 2) * height, float(height))
        return GroundTruth(BoundingBox(x1, y1, x2, y2), self.class_id)


@dataclass(frozen=True)
class ManifestEntry:
    stem: str
    image: str
    label: str
    width: int
    height: int


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)
    split: dict = field(default_factory=dict)  # stem -> "train" | "val"
    class_names: list = field(default_factory=lambda: list(CLASS_NAMES))
    class_histogram: list = field(default_factory=lambda: [0] * NUM_CLASSES)

    def subset(self, which: str) -> list[ManifestEntry]:
        return [e for e in self.entries if self.split.get(e.stem) == which]

    def save(self, path: Path | None = None) -> Path:
        path = path or self.root / "manifest.json"
        doc = {
            "class_names": self.class_names,
            "class_histogram": self.class_histogram,
            "entries": [vars(e) for e in self.entries],
            "split": self.split,
        }
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, root: Path) -> "DatasetManifest":
        root = Path(root)
        doc = json.loads((root / "manifest.json").read_text())
        return cls(root=root,
                   entries=[ManifestEntry(**e) for e in doc["entries"]],
                   split=doc["split"],
                   class_names=doc["class_names"],
                   class_histogram=doc["class_histogram"])

    def labels_for(self, entry: ManifestEntry) -> list[LabelRecord]:
        return load_labels(self.root / entry.label)


def load_labels(path: Path) -> list[LabelRecord]:
    """Parse one label file; raises LabelError naming the offending line."""
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise LabelError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        try:
            cid = int(parts[0])
            vals = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise LabelError(f"{path}:{lineno}: {exc}") from None
        try:
            records.append(LabelRecord(cid, *vals))
        except LabelError as exc:
            raise LabelError(f"{path}:{lineno}: {exc}") from None
    return records


def save_labels(path: Path, records: list[LabelRecord]) -> None:
    lines = [f"{r.class_id} {r.cx:.6f} {r.cy:.6f} {r.w:.6f} {r.h:.6f}" for r in records]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def split(manifest: DatasetManifest, ratio: float = 0.8, seed: int = 0) -> DatasetManifest:
    """Assign a deterministic train/val split in place; returns the manifest.

    Train size is round(n * ratio); the split is a seeded shuffle so the
    same seed always yields the same partition.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio {ratio} outside (0,1)")
    stems = [e.stem for e in manifest.entries]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(stems))
    n_train = round(len(stems) * ratio)
    manifest.split = {}
    for rank, idx in enumerate(order):
        manifest.split[stems[idx]] = "train" if rank < n_train else "val"
    return manifest


# ---------------------------------------------------------------------------
# letterbox preprocessing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LetterboxTransform:
    """Geometry of an aspect-preserving resize into a square canvas."""

    scale: float
    pad_x: float
    pad_y: float
    orig_w: int
    orig_h: int
    size: int

    def forward_box(self, box: BoundingBox) -> BoundingBox:
        return BoundingBox(box.x1 * self.scale + self.pad_x,
                           box.y1 * self.scale + self.pad_y,
                           box.x2 * self.scale + self.pad_x,
                           box.y2 * self.scale + self.pad_y)

    def inverse_box(self, box: BoundingBox) -> BoundingBox:
        x1 = (box.x1 - self.pad_x) / self.scale
        y1 = (box.y1 - self.pad_y) / self.scale
        x2 = (box.x2 - self.pad_x) / self.scale
        y2 = (box.y2 - self.pad_y) / self.scale
        x1, x2 = max(x1, 0.0), min(x2, float(self.orig_w))
        y1, y2 = max(y1, 0.0), min(y2, float(self.orig_h))
        return BoundingBox(x1, y1, x2, y2)


def preprocess(image: np.ndarray | Image.Image, size: int) -> tuple[Tensor, LetterboxTransform]:
    """Letterbox an HWC uint8 image into a [3,S,S] float tensor in [0,1]."""
    if isinstance(image, Image.Image):
        image = np.asarray(image.convert("RGB"))
    h, w = image.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("empty image")
    scale = size / max(h, w)
    new_w, new_h = round(w * scale), round(h * scale)
    resized = np.asarray(
        Image.fromarray(image).resize((new_w, new_h), Image.Resampling.BILINEAR))
    canvas = np.full((size, size, 3), PAD_GRAY, dtype=np.uint8)
    pad_x = (size - new_w) // 2
    pad_y = (size - new_h) // 2
    canvas[pad_y:pad_y + new_h, pad_x:pad_x + new_w] = resized
    tensor = Tensor(canvas.astype(np.float32).transpose(2, 0, 1) / 255.0)
    return tensor, LetterboxTransform(scale=new_w / w if w else 1.0, pad_x=float(pad_x),
                                      pad_y=float(pad_y), orig_w=w, orig_h=h, size=size)


def load_image(path: Path) -> np.ndarray:
    try:
        return np.asarray(Image.open(path).convert("RGB"))
    except Exception as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from None


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    num_images: int = 500
    image_size: int = 160
    class_weights: tuple = (0.25, 0.25, 0.25, 0.25)
    min_objects: int = 1
    max_objects: int = 2
    seed: int = 0
    background_gray: tuple = (95, 135)
    background_noise: float = 6.0

    def __post_init__(self):
        if abs(sum(self.class_weights) - 1.0) > 1e-9:
            raise ValueError("class_weights must sum to 1")
        if self.num_images < 1 or self.image_size < 32:
            raise ValueError("invalid synthetic config")


def _render_pothole(img, rng, s):
    lo = max(6, s // 12)
    hi = max(s // 5, lo + 1)
    a = rng.integers(lo, hi)
    b = rng.integers(lo, hi)
    cx = rng.integers(a + 2, s - a - 2)
    cy = rng.integers(b + 2, s - b - 2)
    yy, xx = np.mgrid[0:s, 0:s]
    d = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2
    mask = d <= 1.0
    depth = np.clip(1.0 - d, 0, 1)
    shade = (30 + 25 * (1 - depth) + rng.normal(0, 4, (s, s)))[mask]
    img[mask] = np.clip(shade, 5, 80)
    return cx - a, cy - b, cx + a, cy + b


def _render_longitudinal_crack(img, rng, s):
    length = rng.integers(s // 3, int(s * 0.7))
    x0 = rng.integers(8, s - 8)
    y0 = rng.integers(2, s - length - 2)
    xs = [x0]
    for _ in range(length - 1):
        xs.append(int(np.clip(xs[-1] + rng.integers(-1, 2), 3, s - 4)))
    width = int(rng.integers(2, 4))
    for i, x in enumerate(xs):
        img[y0 + i, x:x + width] = rng.integers(10, 40)
    x_arr = np.asarray(xs)
    return int(x_arr.min()), y0, int(x_arr.max()) + width, y0 + length


def _render_alligator_crack(img, rng, s):
    w = rng.integers(s // 4, s // 2)
    h = rng.integers(s // 4, s // 2)
    x0 = rng.integers(2, s - w - 2)
    y0 = rng.integers(2, s - h - 2)
    step = int(rng.integers(6, 11))
    dark = int(rng.integers(15, 45))
    patch = img[y0:y0 + h, x0:x0 + w]
    for off in range(-h, w, step):  # two diagonal families -> mesh
        for i in range(h):
            j = off + i
            if 0 <= j < w:
                patch[i, j] = dark
            j2 = off + (h - 1 - i)
            if 0 <= j2 < w:
                patch[i, j2] = dark
    return x0, y0, x0 + w, y0 + h


def _render_raveling(img, rng, s):
    w = rng.integers(s // 4, s // 2)
    h = rng.integers(s // 4, s // 2)
    x0 = rng.integers(2, s - w - 2)
    y0 = rng.integers(2, s - h - 2)
    speckle = rng.choice([35, 60, 170, 215], size=(h, w),
                         p=[0.3, 0.25, 0.25, 0.2]).astype(np.float64)
    speckle += rng.normal(0, 12, (h, w))
    img[y0:y0 + h, x0:x0 + w] = np.clip(speckle, 0, 255)
    return x0, y0, x0 + w, y0 + h


_RENDERERS = [_render_pothole, _render_longitudinal_crack,
              _render_alligator_crack, _render_raveling]


def generate_synthetic(cfg: SyntheticConfig, out_dir: Path) -> DatasetManifest:
    """Render the dataset under ``out_dir``; fully determined by cfg.seed."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    s = cfg.image_size
    manifest = DatasetManifest(root=out_dir)
    for i in range(cfg.num_images):
        base = rng.integers(cfg.background_gray[0], cfg.background_gray[1])
        img = np.clip(base + rng.normal(0, cfg.background_noise, (s, s)), 0, 255)
        n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        records: list[LabelRecord] = []
        occupied: list[tuple] = []
        for _ in range(n_obj):
            cid = int(rng.choice(NUM_CLASSES, p=cfg.class_weights))
            for _attempt in range(8):
                probe = np.random.default_rng(rng.integers(0, 2**63))
                trial = img.copy()
                x1, y1, x2, y2 = _RENDERERS[cid](trial, probe, s)
                if all(_boxes_disjoint((x1, y1, x2, y2), o) for o in occupied):
                    img = trial
                    occupied.append((x1, y1, x2, y2))
                    records.append(LabelRecord(
                        cid,
                        cx=np.clip((x1 + x2) / 2 / s, 0, 1),
                        cy=np.clip((y1 + y2) / 2 / s, 0, 1),
                        w=min((x2 - x1) / s, 1.0),
                        h=min((y2 - y1) / s, 1.0)))
                    manifest.class_histogram[cid] += 1
                    break
        stem = f"img_{i:05d}"
        rgb = np.repeat(img.astype(np.uint8)[:, :, None], 3, axis=2)
        Image.fromarray(rgb).save(out_dir / "images" / f"{stem}.png")
        save_labels(out_dir / "labels" / f"{stem}.txt", records)
        manifest.entries.append(ManifestEntry(stem=stem, image=f"images/{stem}.png",
                                              label=f"labels/{stem}.txt", width=s, height=s))
    return manifest


def _boxes_disjoint(a, b) -> bool:
    return a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]
