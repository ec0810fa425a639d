/** Mirrors the detection service's response schema (schema_version 1). */

export interface Box {
  x1: number;
  y1: number;
  x2: number;
  y2: number;
}

export interface Detection {
  class_id: number;
  class_name: string;
  confidence: number;
  box: Box;
}

export interface DetectResponse {
  schema_version: number;
  model_id: string;
  image: { width: number; height: number };
  detections: Detection[];
  timing_ms: number;
}

export interface FrameResponse extends Partial<DetectResponse> {
  frame: string;
  error?: string;
}

export interface FramesResponse {
  schema_version: number;
  frames: FrameResponse[];
}

export interface GradcamResponse {
  schema_version: number;
  model_id: string;
  layer: string;
  detection_index: number;
  num_detections: number;
  heatmap: number[][];
  overlay_png_base64: string;
}
