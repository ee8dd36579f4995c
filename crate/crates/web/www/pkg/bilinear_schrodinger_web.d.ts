/* tslint:disable */
/* eslint-disable */

/**
 * Couplings `⟨μφ₁, φ_k⟩` for `k = 1..=n`.
 */
export function dipole_couplings(dipole: string, n: number): Float64Array;

/**
 * `λ(T)` on `points` evenly spaced horizons; rows are `T, λ(T)`.
 */
export function lambda_sweep(dipole: string, t_min: number, t_max: number, points: number, cells: number): Float64Array;

/**
 * Populations under `u(t) = amplitude·sin(frequency·t)` from the ground state.
 *
 * Rows are `t, |c₁|², …, |c_modes|²`, one per control cell plus the initial state.
 */
export function simulate_populations(dipole: string, n: number, horizon: number, cells: number, amplitude: number, frequency: number, modes: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly dipole_couplings: (a: number, b: number, c: number) => [number, number, number, number];
    readonly lambda_sweep: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly simulate_populations: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
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
