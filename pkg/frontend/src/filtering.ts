import type { Detection } from "./types.js";

/** Client-side view filter: confidence >= tau and class in the active set.
 * Pure; the slider never triggers re-inference. */
export function visibleDetections(
  detections: readonly Detection[],
  tau: number,
  activeClasses: ReadonlySet<number>,
): Detection[] {
  return detections.filter(
    (d) => d.confidence >= tau && activeClasses.has(d.class_id),
  );
}

export function allClasses(detections: readonly Detection[]): Set<number> {
  return new Set(detections.map((d) => d.class_id));
}
