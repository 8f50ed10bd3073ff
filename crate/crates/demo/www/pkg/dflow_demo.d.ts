/* tslint:disable */
/* eslint-disable */

export class Scene {
    free(): void;
    [Symbol.dispose](): void;
    clusters(): number;
    labels(): Uint32Array;
    /**
     * Gaussian blobs in the plane, split into `clusters` groups by
     * fine-then-coarse k-means.
     */
    constructor(components: number, samples: number, clusters: number, seed: bigint);
    /**
     * Flat `[x0, y0, x1, y1, ...]`.
     */
    points(): Float64Array;
    /**
     * Cluster posterior at state `(x, y)` and time `t`, followed by the
     * residual between the marginal velocity and its posterior-weighted
     * per-cluster decomposition.
     */
    posterior(x: number, y: number, t: number): Float64Array;
    /**
     * Euler samples from noise using exact per-cluster experts fused by
     * `strategy` (`top1`, `top2`, ..., `full`, `oracle`). Returns flat
     * coordinates followed by the highest-weighted expert of each sample at
     * the final step, or -1 when nothing was routed.
     */
    sample(strategy: string, n: number, steps: number, seed: bigint): Float64Array;
    /**
     * Marginal velocity at `(x, y, t)`.
     */
    velocity(x: number, y: number, t: number): Float64Array;
}

/**
 * Forward-noised copy of a point: `(1 - t)·x + t·ε`.
 */
export function noise_point(x: number, y: number, t: number, seed: bigint): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_scene_free: (a: number, b: number) => void;
    readonly noise_point: (a: number, b: number, c: number, d: bigint) => [number, number];
    readonly scene_clusters: (a: number) => number;
    readonly scene_labels: (a: number) => [number, number];
    readonly scene_new: (a: number, b: number, c: number, d: bigint) => [number, number, number];
    readonly scene_points: (a: number) => [number, number];
    readonly scene_posterior: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly scene_sample: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
    readonly scene_velocity: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
