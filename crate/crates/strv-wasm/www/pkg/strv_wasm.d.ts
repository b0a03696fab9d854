/* tslint:disable */
/* eslint-disable */

/**
 * Static vs graph-mode attention maps for a scenario. JSON out:
 * `{clips: [{label, frames, static: [[..49]], gnn: [[..49]]}]}`.
 */
export function attention_demo(scenario: string, operator: string, weighted: boolean, seed: number): string;

/**
 * RGBA pixels of one scenario frame, for canvas thumbnails.
 */
export function clip_frame_rgba(scenario: string, seed: number, clip_index: number, frame: number, width: number, height: number): Uint8Array;

/**
 * Lattice structure snapshot. JSON out: node/edge counts, the dense
 * renormalized adjacency, row sums and the spectral range.
 */
export function graph_demo(frames: number, weighted: boolean, seed: number): string;

/**
 * Micro retrieval benchmark trained in the browser. JSON out: per-method
 * mAP, the loss curve and a ranked example query.
 */
export function retrieval_demo(groups: number, epochs: number, seed: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly attention_demo: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly clip_frame_rgba: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly graph_demo: (a: number, b: number, c: number) => [number, number, number, number];
    readonly retrieval_demo: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
