/* tslint:disable */
/* eslint-disable */

/**
 * A particle image, its shifted reference and the ground-truth mask.
 */
export class Scene {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Copy-paste augmentation of the reference (a clean background).
     * Returns the augmented image followed by its mask, each `size * size` bytes.
     */
    copy_paste(seed: number, patch_min: number, patch_max: number, count: number): Uint8Array;
    /**
     * Register the reference and run difference detection. Returns JSON
     * with the recovered shift and the detections.
     */
    detect(k_sigma: number, min_area: number): string;
    /**
     * Absolute difference after registration, scaled to its peak.
     */
    difference(): Uint8Array;
    image(): Uint8Array;
    mask(): Uint8Array;
    /**
     * `size` must be at least the largest line period (24).
     */
    constructor(seed: number, size: number);
    reference(): Uint8Array;
    readonly size: number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_scene_free: (a: number, b: number) => void;
    readonly scene_copy_paste: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly scene_detect: (a: number, b: number, c: number) => [number, number, number, number];
    readonly scene_difference: (a: number) => [number, number, number, number];
    readonly scene_image: (a: number) => [number, number];
    readonly scene_mask: (a: number) => [number, number];
    readonly scene_new: (a: number, b: number) => [number, number, number];
    readonly scene_reference: (a: number) => [number, number];
    readonly scene_size: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
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
