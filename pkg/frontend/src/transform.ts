import type { Box } from "./types.js";

/** Maps original-image pixel coordinates onto the displayed element. */
export interface DisplayTransform {
  scaleX: number;
  scaleY: number;
}

export function displayTransform(
  imageWidth: number,
  imageHeight: number,
  displayWidth: number,
  displayHeight: number,
): DisplayTransform {
  return {
    scaleX: displayWidth / imageWidth,
    scaleY: displayHeight / imageHeight,
  };
}

export function toDisplayBox(box: Box, t: DisplayTransform): Box {
  return {
    x1: box.x1 * t.scaleX,
    y1: box.y1 * t.scaleY,
    x2: box.x2 * t.scaleX,
    y2: box.y2 * t.scaleY,
  };
}
