import { visibleDetections } from "./filtering.js";
import type { Detection, DetectResponse } from "./types.js";

/** Single source of truth for the view; rendering is a pure function of
 * this state. Stale responses are discarded by request token. */
export interface ViewState {
  response: DetectResponse | null;
  tau: number;
  activeClasses: Set<number>;
  gradcamOn: boolean;
  requestToken: number;
  error: string | null;
}

export function initialState(numClasses: number): ViewState {
  return {
    response: null,
    tau: 0.25,
    activeClasses: new Set(Array.from({ length: numClasses }, (_, i) => i)),
    gradcamOn: false,
    requestToken: 0,
    error: null,
  };
}

export function beginRequest(state: ViewState): ViewState {
  return { ...state, requestToken: state.requestToken + 1, error: null };
}

/** Apply a response only if it belongs to the latest request. */
export function applyResponse(
  state: ViewState,
  token: number,
  response: DetectResponse,
): ViewState {
  if (token !== state.requestToken) return state; // superseded upload
  return { ...state, response, gradcamOn: false };
}

export function applyError(state: ViewState, token: number, message: string): ViewState {
  if (token !== state.requestToken) return state;
  return { ...state, error: message };
}

export function setTau(state: ViewState, tau: number): ViewState {
  return { ...state, tau };
}

export function toggleClass(state: ViewState, classId: number): ViewState {
  const next = new Set(state.activeClasses);
  if (next.has(classId)) next.delete(classId);
  else next.add(classId);
  return { ...state, activeClasses: next };
}

export function shownDetections(state: ViewState): Detection[] {
  if (!state.response) return [];
  return visibleDetections(state.response.detections, state.tau, state.activeClasses);
}
