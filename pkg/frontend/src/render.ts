import { classColor } from "./palette.js";
import { displayTransform, toDisplayBox } from "./transform.js";
import type { Detection } from "./types.js";

/** Draw labeled boxes onto a canvas stretched over the displayed image. */
export function drawOverlay(
  canvas: HTMLCanvasElement,
  detections: readonly Detection[],
  imageWidth: number,
  imageHeight: number,
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const t = displayTransform(imageWidth, imageHeight, canvas.width, canvas.height);
  ctx.lineWidth = 2;
  ctx.font = "13px system-ui, sans-serif";
  ctx.textBaseline = "top";
  for (const d of detections) {
    const b = toDisplayBox(d.box, t);
    const color = classColor(d.class_id);
    ctx.strokeStyle = color;
    ctx.strokeRect(b.x1, b.y1, b.x2 - b.x1, b.y2 - b.y1);
    const label = `${d.class_name} ${d.confidence.toFixed(2)}`;
    const w = ctx.measureText(label).width + 8;
    const y = Math.max(b.y1 - 18, 0);
    ctx.fillStyle = color;
    ctx.fillRect(b.x1, y, w, 18);
    ctx.fillStyle = "#fff";
    ctx.fillText(label, b.x1 + 4, y + 2);
  }
}
