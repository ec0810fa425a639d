"""HTTP inference service: image and frame-sequence detection plus
Grad-CAM, sharing one read-only model across requests.

Endpoints: GET /healthz, GET /classes, POST /detect, POST /detect-frames,
POST /gradcam.  Every response body carries ``schema_version``.  The
companion web client, when built, is served from / as static files.
"""

from __future__ import annotations

import base64
import hashlib
import io
import threading
import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, File, HTTPException, Query, UploadFile
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image

from . import tensor as T
from .checkpoint import load_checkpoint
from .data import preprocess
from .gradcam import DEFAULT_LAYER, compute_gradcam, overlay
from .metrics import nms as run_nms
from .model import Detector, decode
from .boxes import BoundingBox, Detection
from .tensor import Tensor

SCHEMA_VERSION = 1
DEFAULT_CONF = 0.25
DEFAULT_NMS = 0.45


def detect_image(model: Detector, image_bytes: bytes,
                 conf_threshold: float = DEFAULT_CONF,
                 nms_threshold: float = DEFAULT_NMS,
                 model_id: str = "unsaved") -> dict:
    """Full pipeline on one encoded image; boxes in original pixel coords."""
    t0 = time.perf_counter()
    try:
        image = np.asarray(Image.open(io.BytesIO(image_bytes)).convert("RGB"))
    except Exception as exc:
        raise ValueError(f"cannot decode image: {exc}") from None
    tensor, tf = preprocess(image, model.config.input_size)
    with T.no_grad():
        raw = model.forward(T.reshape(tensor, (1,) + tensor.shape))
    dets = run_nms(decode(raw, model.config, conf_threshold)[0], nms_threshold)
    objects = []
    for d in dets:
        try:
            box = tf.inverse_box(d.box)
        except ValueError:
            continue  # box collapsed onto the padding region
        objects.append({
            "class_id": d.class_id,
            "class_name": model.config.class_names[d.class_id],
            "confidence": round(d.confidence, 6),
            "box": {"x1": round(box.x1, 2), "y1": round(box.y1, 2),
                    "x2": round(box.x2, 2), "y2": round(box.y2, 2)},
        })
    return {
        "schema_version": SCHEMA_VERSION,
        "model_id": model_id,
        "image": {"width": tf.orig_w, "height": tf.orig_h},
        "detections": objects,
        "timing_ms": round((time.perf_counter() - t0) * 1000, 2),
    }


def detect_frames(model: Detector, frames: list[tuple[str, bytes]],
                  conf_threshold: float = DEFAULT_CONF,
                  nms_threshold: float = DEFAULT_NMS,
                  model_id: str = "unsaved") -> list[dict]:
    """Stateless per-frame detection, emitted in input order.

    A bad frame yields an error record; the stream continues.
    """
    out = []
    for name, data in frames:
        try:
            resp = detect_image(model, data, conf_threshold, nms_threshold, model_id)
            resp["frame"] = name
            out.append(resp)
        except ValueError as exc:
            out.append({"schema_version": SCHEMA_VERSION, "frame": name,
                        "error": str(exc)})
    return out


def gradcam_response(model: Detector, image_bytes: bytes,
                     detection_index: int = 0, layer: str = DEFAULT_LAYER,
                     alpha: float = 0.5,
                     conf_threshold: float = DEFAULT_CONF,
                     nms_threshold: float = DEFAULT_NMS,
                     model_id: str = "unsaved") -> dict:
    try:
        image = np.asarray(Image.open(io.BytesIO(image_bytes)).convert("RGB"))
    except Exception as exc:
        raise ValueError(f"cannot decode image: {exc}") from None
    tensor, tf = preprocess(image, model.config.input_size)
    heatmap, dets = compute_gradcam(model, tensor, layer, detection_index,
                                    conf_threshold, nms_threshold)
    letterboxed = np.clip(np.round(tensor.data.transpose(1, 2, 0) * 255),
                          0, 255).astype(np.uint8)
    blended = overlay(heatmap, letterboxed, alpha)
    buf = io.BytesIO()
    Image.fromarray(blended).save(buf, format="PNG")
    return {
        "schema_version": SCHEMA_VERSION,
        "model_id": model_id,
        "layer": heatmap.source_layer,
        "detection_index": detection_index,
        "num_detections": len(dets),
        "heatmap": [[round(float(v), 5) for v in row] for row in heatmap.values],
        "overlay_png_base64": base64.b64encode(buf.getvalue()).decode(),
    }


class ServiceState:
    def __init__(self, model_path: Path | None, max_upload_bytes: int,
                 max_concurrent: int):
        self.model: Detector | None = None
        self.model_id = "none"
        self.max_upload_bytes = max_upload_bytes
        self.semaphore = threading.BoundedSemaphore(max_concurrent)
        if model_path is not None:
            self.load(model_path)

    def load(self, path: Path) -> None:
        self.model, _ = load_checkpoint(path)
        self.model_id = hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]


def create_app(model_path: Path | None = None,
               max_upload_bytes: int = 16 * 1024 * 1024,
               max_concurrent: int = 8,
               static_dir: Path | None = None) -> FastAPI:
    app = FastAPI(title="pavement distress detection service")
    state = ServiceState(model_path, max_upload_bytes, max_concurrent)
    app.state.service = state

    def _model() -> Detector:
        if state.model is None:
            raise HTTPException(503, "no model loaded")
        return state.model

    def _read_upload(f: UploadFile) -> bytes:
        data = f.file.read(state.max_upload_bytes + 1)
        if len(data) > state.max_upload_bytes:
            raise HTTPException(413, f"upload exceeds {state.max_upload_bytes} bytes")
        return data

    @app.get("/healthz")
    def healthz():
        return {"schema_version": SCHEMA_VERSION,
                "status": "ok" if state.model is not None else "no-model",
                "model_id": state.model_id}

    @app.get("/classes")
    def classes():
        model = _model()
        return {"schema_version": SCHEMA_VERSION,
                "classes": list(model.config.class_names)}

    @app.post("/detect")
    def detect(file: UploadFile = File(...),
               conf: float = Query(DEFAULT_CONF, ge=0.0, le=1.0),
               nms: float = Query(DEFAULT_NMS, ge=0.0, le=1.0)):
        model = _model()
        data = _read_upload(file)
        with state.semaphore:
            try:
                return detect_image(model, data, conf, nms, state.model_id)
            except ValueError as exc:
                raise HTTPException(422, str(exc)) from None

    @app.post("/detect-frames")
    def detect_frames_ep(files: list[UploadFile] = File(...),
                         conf: float = Query(DEFAULT_CONF, ge=0.0, le=1.0),
                         nms: float = Query(DEFAULT_NMS, ge=0.0, le=1.0)):
        model = _model()
        frames = [(f.filename or f"frame_{i}", _read_upload(f))
                  for i, f in enumerate(files)]
        with state.semaphore:
            return {"schema_version": SCHEMA_VERSION,
                    "frames": detect_frames(model, frames, conf, nms, state.model_id)}

    @app.post("/gradcam")
    def gradcam_ep(file: UploadFile = File(...),
                   detection_index: int = Query(0, ge=0),
                   layer: str = Query(DEFAULT_LAYER),
                   alpha: float = Query(0.5, ge=0.0, le=1.0),
                   conf: float = Query(DEFAULT_CONF, ge=0.0, le=1.0),
                   nms: float = Query(DEFAULT_NMS, ge=0.0, le=1.0)):
        model = _model()
        data = _read_upload(file)
        with state.semaphore:
            try:
                return gradcam_response(model, data, detection_index, layer,
                                        alpha, conf, nms, state.model_id)
            except ValueError as exc:
                raise HTTPException(422, str(exc)) from None

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")

    return app
