/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const code_integers: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const demo_gate_mask: (a: number, b: number) => [number, number, number, number];
export const demo_gated_layers: (a: number) => [number, number];
export const demo_new: (a: number, b: number, c: number) => [number, number, number];
export const demo_render: (a: number, b: number) => [number, number, number, number];
export const demo_set_latent: (a: number, b: number, c: number) => [number, number];
export const demo_sparsity: (a: number, b: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
