import { classNames, detect, detectFrames, gradcam } from "./api.js";
import { classColor } from "./palette.js";
import {
  currentFrame,
  newPlayer,
  seek,
  step,
  togglePlay,
  type PlayerState,
} from "./player.js";
import { drawOverlay } from "./render.js";
import {
  applyError,
  applyResponse,
  beginRequest,
  initialState,
  setTau,
  shownDetections,
  toggleClass,
  type ViewState,
} from "./state.js";
import type { DetectResponse } from "./types.js";

const API_BASE = "";

const $ = <T extends HTMLElement>(id: string): T =>
  document.getElementById(id) as T;

let state: ViewState = initialState(4);
let player: PlayerState = newPlayer([]);
let playTimer: number | null = null;
let currentImageURL: string | null = null;
let currentFile: File | null = null;
let frameURLs: string[] = [];
let gradcamImage: string | null = null;

function render(): void {
  const img = $<HTMLImageElement>("media");
  const canvas = $<HTMLCanvasElement>("overlay");
  const banner = $<HTMLDivElement>("error-banner");
  banner.hidden = state.error === null;
  banner.textContent = state.error ?? "";

  const resp = playerActive() ? frameResponse() : state.response;
  const shown = resp
    ? shownDetections({ ...state, response: resp })
    : [];
  $<HTMLSpanElement>("count").textContent = resp
    ? shown.length
      ? `${shown.length} shown / ${resp.detections.length} fetched`
      : "no distresses above threshold"
    : "";

  if (state.gradcamOn && gradcamImage) {
    img.src = `data:image/png;base64,${gradcamImage}`;
  } else if (playerActive()) {
    img.src = frameURLs[player.playhead] ?? "";
  } else if (currentImageURL) {
    img.src = currentImageURL;
  }

  if (resp && img.complete) {
    canvas.width = img.clientWidth;
    canvas.height = img.clientHeight;
    drawOverlay(canvas, shown, resp.image!.width, resp.image!.height);
  } else {
    canvas.getContext("2d")?.clearRect(0, 0, canvas.width, canvas.height);
  }
  $<HTMLSpanElement>("tau-value").textContent = state.tau.toFixed(2);
  $<HTMLDivElement>("player-bar").hidden = !playerActive();
  if (playerActive()) {
    $<HTMLInputElement>("scrub").max = String(player.frames.length - 1);
    $<HTMLInputElement>("scrub").value = String(player.playhead);
    $<HTMLSpanElement>("frame-label").textContent =
      `${player.playhead + 1}/${player.frames.length} ` +
      (currentFrame(player)?.frame ?? "");
  }
}

function playerActive(): boolean {
  return player.frames.length > 0;
}

function frameResponse(): DetectResponse | null {
  const f = currentFrame(player);
  if (!f || f.error) return null;
  return f as unknown as DetectResponse;
}

async function onImageChosen(file: File): Promise<void> {
  player = newPlayer([]);
  currentFile = file;
  gradcamImage = null;
  if (currentImageURL) URL.revokeObjectURL(currentImageURL);
  currentImageURL = URL.createObjectURL(file);
  state = beginRequest(state);
  const token = state.requestToken;
  render();
  try {
    const resp = await detect(API_BASE, file);
    state = applyResponse(state, token, resp);
  } catch (e) {
    state = applyError(state, token, (e as Error).message);
  }
  render();
}

async function onFramesChosen(files: File[]): Promise<void> {
  currentFile = null;
  gradcamImage = null;
  state = beginRequest(state);
  const token = state.requestToken;
  for (const u of frameURLs) URL.revokeObjectURL(u);
  frameURLs = files.map((f) => URL.createObjectURL(f));
  try {
    const resp = await detectFrames(API_BASE, files);
    if (token === state.requestToken) {
      player = newPlayer(resp.frames);
      state = { ...state, response: null, error: null };
    }
  } catch (e) {
    state = applyError(state, token, (e as Error).message);
  }
  render();
}

async function onGradcamToggle(on: boolean): Promise<void> {
  state = { ...state, gradcamOn: on };
  if (on && currentFile && !gradcamImage) {
    const alpha = Number($<HTMLInputElement>("cam-alpha").value);
    try {
      const resp = await gradcam(API_BASE, currentFile, 0, alpha);
      gradcamImage = resp.overlay_png_base64;
    } catch (e) {
      state = { ...state, gradcamOn: false, error: (e as Error).message };
    }
  }
  render();
}

function startStop(): void {
  player = togglePlay(player);
  if (player.playing && playTimer === null) {
    playTimer = window.setInterval(() => {
      player = step(player);
      if (!player.playing && playTimer !== null) {
        clearInterval(playTimer);
        playTimer = null;
      }
      render();
    }, 400);
  } else if (!player.playing && playTimer !== null) {
    clearInterval(playTimer);
    playTimer = null;
  }
  render();
}

async function init(): Promise<void> {
  let names: string[];
  try {
    names = await classNames(API_BASE);
  } catch {
    names = ["class 0", "class 1", "class 2", "class 3"];
  }
  const filters = $<HTMLDivElement>("class-filters");
  names.forEach((name, i) => {
    const label = document.createElement("label");
    const cb = document.createElement("input");
    cb.type = "checkbox";
    cb.checked = true;
    cb.addEventListener("change", () => {
      state = toggleClass(state, i);
      render();
    });
    const swatch = document.createElement("span");
    swatch.className = "swatch";
    swatch.style.background = classColor(i);
    label.append(cb, swatch, name);
    filters.append(label);
  });

  $<HTMLInputElement>("image-input").addEventListener("change", (ev) => {
    const f = (ev.target as HTMLInputElement).files?.[0];
    if (f) void onImageChosen(f);
  });
  $<HTMLInputElement>("frames-input").addEventListener("change", (ev) => {
    const fs = Array.from((ev.target as HTMLInputElement).files ?? []);
    if (fs.length) void onFramesChosen(fs);
  });
  $<HTMLInputElement>("tau").addEventListener("input", (ev) => {
    state = setTau(state, Number((ev.target as HTMLInputElement).value));
    render(); // pure client-side filtering; no network call
  });
  $<HTMLInputElement>("gradcam-toggle").addEventListener("change", (ev) => {
    void onGradcamToggle((ev.target as HTMLInputElement).checked);
  });
  $<HTMLInputElement>("cam-alpha").addEventListener("change", () => {
    gradcamImage = null;
    if (state.gradcamOn) void onGradcamToggle(true);
  });
  $<HTMLButtonElement>("play").addEventListener("click", startStop);
  $<HTMLInputElement>("scrub").addEventListener("input", (ev) => {
    player = seek(player, Number((ev.target as HTMLInputElement).value));
    render();
  });
  $<HTMLImageElement>("media").addEventListener("load", render);
  window.addEventListener("resize", render);
  render();
}

void init();
