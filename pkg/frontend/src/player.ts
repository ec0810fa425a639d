import type { FrameResponse } from "./types.js";

/** Frame player: pure state transitions; the overlay shown is always the
 * response of the frame under the playhead. */
export interface PlayerState {
  frames: FrameResponse[];
  playhead: number;
  playing: boolean;
}

export function newPlayer(frames: FrameResponse[]): PlayerState {
  return { frames, playhead: 0, playing: false };
}

export function currentFrame(state: PlayerState): FrameResponse | null {
  return state.frames[state.playhead] ?? null;
}

export function seek(state: PlayerState, index: number): PlayerState {
  const clamped = Math.min(Math.max(index, 0), Math.max(state.frames.length - 1, 0));
  return { ...state, playhead: clamped };
}

export function step(state: PlayerState): PlayerState {
  if (state.frames.length === 0) return state;
  const next = state.playhead + 1;
  if (next >= state.frames.length) {
    return { ...state, playhead: state.frames.length - 1, playing: false };
  }
  return { ...state, playhead: next };
}

export function togglePlay(state: PlayerState): PlayerState {
  if (state.frames.length === 0) return state;
  // restarting from the end rewinds
  if (!state.playing && state.playhead >= state.frames.length - 1) {
    return { ...state, playhead: 0, playing: true };
  }
  return { ...state, playing: !state.playing };
}
