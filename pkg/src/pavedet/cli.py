"""Command-line interface: gen-data, train, eval, detect, gradcam, serve.

Every subcommand accepts ``--config FILE`` with line-oriented ``key=value``
pairs (keys match option names with dashes or underscores); explicit flags
override config-file values.  Exit codes: 0 success, 1 user error, 2
internal error.
"""

from __future__ import annotations

import json
import sys
import traceback
from pathlib import Path

import click
import numpy as np

from .boxes import BoundingBox
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (DatasetManifest, LabelError, SyntheticConfig,
                   generate_synthetic, split)
from .gradcam import DEFAULT_LAYER
from .model import Detector, NetworkConfig
from .train import TrainConfig, evaluate_model, fit, kmeans_anchors, load_model_state

USER_ERRORS = (ValueError, LabelError, CheckpointError, FileNotFoundError,
               NotADirectoryError, PermissionError)


def read_config_file(path: str | None) -> dict:
    if not path:
        return {}
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, val = line.split("=", 1)
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def apply_config(ctx: click.Context, config_path: str | None, kwargs: dict) -> dict:
    """Fill defaulted options from the config file, casting to option types."""
    file_values = read_config_file(config_path)
    for key, raw in file_values.items():
        if key not in kwargs:
            raise ValueError(f"unknown config key {key!r}")
        if ctx.get_parameter_source(key) == click.core.ParameterSource.DEFAULT:
            current = kwargs[key]
            if isinstance(current, bool):
                kwargs[key] = raw.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                kwargs[key] = int(raw)
            elif isinstance(current, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
    return kwargs


def run_guarded(fn, *args, **kwargs) -> None:
    try:
        fn(*args, **kwargs)
    except USER_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    except click.ClickException:
        raise
    except Exception:
        traceback.print_exc()
        sys.exit(2)


@click.group()
def main():
    """Pavement distress detection toolkit."""


@main.command("gen-data")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", default="dataset", show_default=True)
@click.option("--num-images", default=500, show_default=True)
@click.option("--image-size", default=160, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--split-ratio", default=0.8, show_default=True)
@click.option("--split-seed", default=0, show_default=True)
@click.option("--min-objects", default=1, show_default=True)
@click.option("--max-objects", default=2, show_default=True)
@click.pass_context
def gen_data(ctx, config_path, **kwargs):
    """Generate the synthetic dataset and assign the train/val split."""
    kwargs = apply_config(ctx, config_path, kwargs)

    def body():
        cfg = SyntheticConfig(num_images=kwargs["num_images"],
                              image_size=kwargs["image_size"],
                              seed=kwargs["seed"],
                              min_objects=kwargs["min_objects"],
                              max_objects=kwargs["max_objects"])
        out = Path(kwargs["out"])
        manifest = generate_synthetic(cfg, out)
        split(manifest, kwargs["split_ratio"], kwargs["split_seed"])
        manifest.save()
        click.echo(f"wrote {len(manifest.entries)} images to {out} "
                   f"(train={len(manifest.subset('train'))}, "
                   f"val={len(manifest.subset('val'))}, "
                   f"histogram={manifest.class_histogram})")

    run_guarded(body)


def _collect_anchor_boxes(manifest: DatasetManifest, input_size: int) -> np.ndarray:
    sizes = []
    for entry in manifest.subset("train"):
        for rec in manifest.labels_for(entry):
            sizes.append((rec.w * input_size, rec.h * input_size))
    return np.asarray(sizes) if sizes else np.asarray([[16.0, 16.0]])


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--data", default="dataset", show_default=True)
@click.option("--out", default="model.ckpt", show_default=True)
@click.option("--history-out", default="loss_history.txt", show_default=True)
@click.option("--epochs", default=20, show_default=True)
@click.option("--batch-size", default=8, show_default=True)
@click.option("--lr", default=0.01, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--input-size", default=160, show_default=True)
@click.option("--channels", default="16,32,64,128,256", show_default=True)
@click.option("--cbam-sites", default="c3_1,c3_2,c3_3,c3_4", show_default=True)
@click.option("--num-scales", default=3, show_default=True)
@click.pass_context
def train(ctx, config_path, **kwargs):
    """Train a detector on a generated dataset."""
    kwargs = apply_config(ctx, config_path, kwargs)

    def body():
        manifest = DatasetManifest.load(Path(kwargs["data"]))
        channels = tuple(int(c) for c in kwargs["channels"].split(","))
        sites = tuple(s for s in kwargs["cbam_sites"].split(",") if s)
        anchors = kmeans_anchors(_collect_anchor_boxes(manifest, kwargs["input_size"]),
                                 num_scales=kwargs["num_scales"], seed=kwargs["seed"])
        net = NetworkConfig(input_size=kwargs["input_size"], channels=channels,
                            cbam_sites=sites, anchors=anchors,
                            num_scales=kwargs["num_scales"])
        model = Detector(net, seed=kwargs["seed"])
        click.echo(f"model: {model.num_parameters()} parameters, "
                   f"anchors {net.anchors}")
        tc = TrainConfig(epochs=kwargs["epochs"], batch_size=kwargs["batch_size"],
                         lr=kwargs["lr"], seed=kwargs["seed"])
        result = fit(model, manifest, tc, log=click.echo)
        result.write_history(Path(kwargs["history_out"]))
        if result.best_state:
            load_model_state(model, result.best_state)
        save_checkpoint(model, Path(kwargs["out"]),
                        metadata={"best_epoch": result.best_epoch,
                                  "best_val_map50": result.best_map,
                                  "epochs": tc.epochs, "seed": tc.seed})
        click.echo(f"saved {kwargs['out']} (best epoch {result.best_epoch}, "
                   f"val mAP@0.5 {result.best_map:.4f})")

    run_guarded(body)


@main.command("eval")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--data", default="dataset", show_default=True)
@click.option("--checkpoint", default="model.ckpt", show_default=True)
@click.option("--subset", default="val", show_default=True)
@click.option("--conf", default=0.1, show_default=True)
@click.option("--nms", default=0.45, show_default=True)
@click.option("--report-out", default="eval_report.txt", show_default=True)
@click.pass_context
def eval_cmd(ctx, config_path, **kwargs):
    """Evaluate a checkpoint: per-class AP, mAP@0.5 and P/R sweep."""
    kwargs = apply_config(ctx, config_path, kwargs)

    def body():
        from .data import load_image
        from .metrics import evaluate

        manifest = DatasetManifest.load(Path(kwargs["data"]))
        model, _ = load_checkpoint(Path(kwargs["checkpoint"]))
        images, labels = [], []
        for entry in manifest.subset(kwargs["subset"]):
            images.append(load_image(manifest.root / entry.image))
            labels.append(manifest.labels_for(entry))
        if not images:
            raise ValueError(f"subset {kwargs['subset']!r} is empty")
        _, dets_all, gts_all = evaluate_model(model, images, labels,
                                              kwargs["conf"], kwargs["nms"])
        report = evaluate(dets_all, gts_all, model.config.num_classes, t=0.5)
        Path(kwargs["report_out"]).write_text(
            report.to_text(model.config.class_names))
        click.echo(report.summary_line())

    run_guarded(body)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--checkpoint", default="model.ckpt", show_default=True)
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--conf", default=0.25, show_default=True)
@click.option("--nms", default=0.45, show_default=True)
@click.option("--out", default=None, help="write the JSON response here instead of stdout")
@click.pass_context
def detect(ctx, config_path, **kwargs):
    """Detect distresses on one image; prints the response JSON."""
    kwargs = apply_config(ctx, config_path, kwargs)

    def body():
        import hashlib

        from .service import detect_image

        path = Path(kwargs["checkpoint"])
        model, _ = load_checkpoint(path)
        model_id = hashlib.sha256(path.read_bytes()).hexdigest()[:12]
        resp = detect_image(model, Path(kwargs["image_path"]).read_bytes(),
                            kwargs["conf"], kwargs["nms"], model_id)
        text = json.dumps(resp, indent=1, sort_keys=True)
        if kwargs["out"]:
            Path(kwargs["out"]).write_text(text + "\n")
        else:
            click.echo(text)

    run_guarded(body)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--checkpoint", default="model.ckpt", show_default=True)
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--index", default=0, show_default=True)
@click.option("--layer", default=DEFAULT_LAYER, show_default=True)
@click.option("--alpha", default=0.5, show_default=True)
@click.option("--conf", default=0.25, show_default=True)
@click.option("--out", default="gradcam.png", show_default=True)
@click.option("--json-out", default=None)
@click.pass_context
def gradcam(ctx, config_path, **kwargs):
    """Render a Grad-CAM overlay for one detection."""
    kwargs = apply_config(ctx, config_path, kwargs)

    def body():
        import base64

        from .service import gradcam_response

        model, _ = load_checkpoint(Path(kwargs["checkpoint"]))
        resp = gradcam_response(model, Path(kwargs["image_path"]).read_bytes(),
                                kwargs["index"], kwargs["layer"], kwargs["alpha"],
                                kwargs["conf"])
        Path(kwargs["out"]).write_bytes(base64.b64decode(resp["overlay_png_base64"]))
        if kwargs["json_out"]:
            Path(kwargs["json_out"]).write_text(
                json.dumps(resp, indent=1, sort_keys=True) + "\n")
        click.echo(f"wrote {kwargs['out']} "
                   f"({resp['num_detections']} detections, layer {resp['layer']})")

    run_guarded(body)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--checkpoint", default="model.ckpt", show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--max-upload-mb", default=16, show_default=True)
@click.option("--max-concurrent", default=8, show_default=True)
@click.option("--static-dir", default=None,
              help="directory of built web-client assets to serve at /")
@click.pass_context
def serve(ctx, config_path, **kwargs):
    """Run the HTTP inference service."""
    kwargs = apply_config(ctx, config_path, kwargs)

    def body():
        import uvicorn

        from .service import create_app

        app = create_app(Path(kwargs["checkpoint"]),
                         max_upload_bytes=kwargs["max_upload_mb"] * 1024 * 1024,
                         max_concurrent=kwargs["max_concurrent"],
                         static_dir=Path(kwargs["static_dir"])
                         if kwargs["static_dir"] else None)
        uvicorn.run(app, host=kwargs["host"], port=kwargs["port"])

    run_guarded(body)


if __name__ == "__main__":
    main()
