/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * `[rows, cols, g_00, g_01, ...]` for the gate of `layer`.
     */
    gate_mask(layer: number): Float64Array;
    /**
     * Layers that carry a gate.
     */
    gated_layers(): Uint32Array;
    /**
     * Network weights come from `seed`; `omega0` scales every sine argument.
     */
    constructor(seed: number, omega0: number, gate_rank: number);
    /**
     * RGBA pixels of a `size` x `size` render over `[-1, 1]^2`, stretched
     * to the full intensity range since an untrained network has no scale.
     */
    render(size: number): Uint8Array;
    /**
     * Draws `phi ~ scale * N(0, I)` from `seed` and recomputes the gates.
     */
    set_latent(seed: number, scale: number): void;
    /**
     * Fraction of gated weights below `threshold` in magnitude.
     */
    sparsity(threshold: number): number;
}

/**
 * Range codes whitespace- or comma-separated integers under a logistic
 * table of `scale` over `[-support, support]` with an escape slot.
 * Returns a JSON summary.
 */
export function code_integers(text: string, scale: number, support: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly code_integers: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_gate_mask: (a: number, b: number) => [number, number, number, number];
    readonly demo_gated_layers: (a: number) => [number, number];
    readonly demo_new: (a: number, b: number, c: number) => [number, number, number];
    readonly demo_render: (a: number, b: number) => [number, number, number, number];
    readonly demo_set_latent: (a: number, b: number, c: number) => [number, number];
    readonly demo_sparsity: (a: number, b: number) => [number, number, number];
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
