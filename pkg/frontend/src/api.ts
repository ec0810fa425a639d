import type { DetectResponse, FramesResponse, GradcamResponse } from "./types.js";

/** Low server-side threshold: the slider filters client-side over this. */
export const SERVER_TAU = 0.1;

async function check(r: Response): Promise<Response> {
  if (!r.ok) {
    let reason = `${r.status} ${r.statusText}`;
    try {
      const body = await r.json();
      if (body.detail) reason = String(body.detail);
    } catch {
      /* non-JSON error body */
    }
    throw new Error(reason);
  }
  return r;
}

export async function detect(base: string, file: File): Promise<DetectResponse> {
  const form = new FormData();
  form.append("file", file);
  const r = await fetch(`${base}/detect?conf=${SERVER_TAU}`, {
    method: "POST",
    body: form,
  });
  return (await check(r)).json();
}

export async function detectFrames(base: string, files: File[]): Promise<FramesResponse> {
  const form = new FormData();
  for (const f of files) form.append("files", f);
  const r = await fetch(`${base}/detect-frames?conf=${SERVER_TAU}`, {
    method: "POST",
    body: form,
  });
  return (await check(r)).json();
}

export async function gradcam(
  base: string,
  file: File,
  detectionIndex: number,
  alpha: number,
): Promise<GradcamResponse> {
  const form = new FormData();
  form.append("file", file);
  const params = `conf=${SERVER_TAU}&detection_index=${detectionIndex}&alpha=${alpha}`;
  const r = await fetch(`${base}/gradcam?${params}`, { method: "POST", body: form });
  return (await check(r)).json();
}

export async function classNames(base: string): Promise<string[]> {
  const r = await fetch(`${base}/classes`);
  return ((await check(r)).json() as Promise<{ classes: string[] }>).then(
    (b) => b.classes,
  );
}
