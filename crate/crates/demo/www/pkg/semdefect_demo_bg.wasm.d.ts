/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_scene_free: (a: number, b: number) => void;
export const scene_copy_paste: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const scene_detect: (a: number, b: number, c: number) => [number, number, number, number];
export const scene_difference: (a: number) => [number, number, number, number];
export const scene_image: (a: number) => [number, number];
export const scene_mask: (a: number) => [number, number];
export const scene_new: (a: number, b: number) => [number, number, number];
export const scene_reference: (a: number) => [number, number];
export const scene_size: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
