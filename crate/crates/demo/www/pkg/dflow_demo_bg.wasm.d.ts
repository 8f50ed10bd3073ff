/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_scene_free: (a: number, b: number) => void;
export const noise_point: (a: number, b: number, c: number, d: bigint) => [number, number];
export const scene_clusters: (a: number) => number;
export const scene_labels: (a: number) => [number, number];
export const scene_new: (a: number, b: number, c: number, d: bigint) => [number, number, number];
export const scene_points: (a: number) => [number, number];
export const scene_posterior: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const scene_sample: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
export const scene_velocity: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
