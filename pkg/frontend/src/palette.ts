/** Fixed class palette, index-aligned with the server's class order:
 * 0 pothole, 1 longitudinal_crack, 2 alligator_crack, 3 raveling. */
export const CLASS_COLORS = ["#e6194b", "#3cb44b", "#4363d8", "#f58231"] as const;

export function classColor(classId: number): string {
  return CLASS_COLORS[classId % CLASS_COLORS.length];
}
