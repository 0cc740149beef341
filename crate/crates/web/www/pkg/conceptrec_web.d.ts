/* tslint:disable */
/* eslint-disable */

/**
 * Generate a curriculum and score every concept as a prerequisite of
 * `target` with the graph-reading teacher. Returns JSON.
 */
export function curriculum(seed: bigint, target: number, epsilon: number): string;

/**
 * Student softmax at temperature `tau` next to the teacher labels, with the
 * distillation cross-entropy. Returns JSON.
 */
export function distill_view(logits: Float64Array, scores: Float64Array, epsilon: number, tau: number): string;

/**
 * Smoothed teacher distribution for integer-ish scores.
 */
export function soft_labels(scores: Float64Array, epsilon: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly curriculum: (a: bigint, b: number, c: number) => [number, number, number, number];
    readonly distill_view: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly soft_labels: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
