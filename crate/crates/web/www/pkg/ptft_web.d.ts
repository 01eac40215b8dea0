/* tslint:disable */
/* eslint-disable */

/**
 * `n` rows of `[z, q_k(z), q_k'(z), prox(z; k, theta)]` for `z` in `[-zmax, zmax]`.
 */
export function penalty_curves(k: number, theta: number, zmax: number, n: number): Float64Array;

/**
 * Regime metrics over `c_pt` (log axis, rows) and `lambda_pt` (columns).
 * Row-major cells of `[ell_order, pd, kappa]`; flagged cells are NaN.
 */
export function regime_portrait(log10_c_min: number, log10_c_max: number, rows: number, cols: number, gamma_ft: number, beta_pt: number, beta_ft: number): Float64Array;

/**
 * Replica prediction on a log-spaced alpha grid: rows of `[alpha, mse, se_db]`.
 */
export function replica_curve(c_pt: number, lambda_pt: number, gamma_ft: number, rho_pt: number, rho_sh: number, rho_new: number, count: number, mc_samples: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly penalty_curves: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly regime_portrait: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly replica_curve: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
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
