"""End-to-end mini walkthrough: synthesize a dataset, train briefly,
evaluate, and render one attention heatmap -- all in-process.

Run: python3 demos/quickstart.py   (takes about a minute)

For the full-size pipeline use the CLI instead:
  pavedet gen-data --out dataset
  pavedet train --data dataset --out model.ckpt
  pavedet eval --data dataset --checkpoint model.ckpt
"""

import tempfile
from pathlib import Path

import numpy as np

from pavedet.data import SyntheticConfig, generate_synthetic, split, preprocess, load_image
from pavedet.gradcam import compute_gradcam, overlay
from pavedet.model import Detector, NetworkConfig
from pavedet.train import TrainConfig, fit, evaluate_model, _load_split

work = Path(tempfile.mkdtemp(prefix="pavedet-demo-"))
print("working in", work)

manifest = generate_synthetic(SyntheticConfig(num_images=40, image_size=96, seed=0), work)
split(manifest, ratio=0.8, seed=0)
manifest.save()
print(f"dataset: {len(manifest.subset('train'))} train / "
      f"{len(manifest.subset('val'))} val, class histogram {manifest.class_histogram}")

config = NetworkConfig(input_size=96, channels=(8, 8, 16, 16, 32), cbam_reduction=4)
model = Detector(config, seed=0)
print(f"model: {model.num_parameters()} parameters")

result = fit(model, manifest, TrainConfig(epochs=3, batch_size=8, seed=0))
print(f"best epoch {result.best_epoch}, val mAP@0.5 {result.best_map:.3f}")

images, labels = _load_split(manifest, "val")
report, _, _ = evaluate_model(model, images, labels)
print(report.summary_line())

tensor, _ = preprocess(images[0], config.input_size)
heatmap, detections = compute_gradcam(model, tensor, conf_threshold=0.05)
print(f"gradcam over {len(detections)} detections; heatmap peak "
      f"{heatmap.values.max():.2f} at layer {heatmap.source_layer}")
letterboxed = np.clip(np.round(tensor.data.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
blended = overlay(heatmap, letterboxed, alpha=0.5)
from PIL import Image
Image.fromarray(blended).save(work / "gradcam_demo.png")
print("wrote", work / "gradcam_demo.png")
