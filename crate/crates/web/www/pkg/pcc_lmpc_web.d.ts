/* tslint:disable */
/* eslint-disable */

/**
 * A campaign on a bundled route.
 */
export class Session {
    free(): void;
    [Symbol.dispose](): void;
    arrival_steps(): Uint32Array;
    finished(): boolean;
    /**
     * `overrides` holds `section.key=value` lines, as on the command line.
     */
    constructor(route: string, overrides: string);
    /**
     * Fuel of every trip divided by the baseline's.
     */
    normalized_fuel(): Float64Array;
    /**
     * Drives the next trip. Returns false once every trip has run.
     */
    step(): boolean;
    /**
     * Trips driven so far, baseline included.
     */
    trips(): number;
    /**
     * Velocity over position of trip `i` up to its arrival, as interleaved
     * `[s0, v0, s1, v1, ...]`.
     */
    velocity_profile(i: number): Float64Array;
}

/**
 * Grade of a bundled route sampled every `spacing` metres, as
 * interleaved `[s0, theta0, s1, theta1, ...]`.
 */
export function grade_profile(route: string, spacing: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_session_free: (a: number, b: number) => void;
    readonly grade_profile: (a: number, b: number, c: number) => [number, number, number, number];
    readonly session_arrival_steps: (a: number) => [number, number];
    readonly session_finished: (a: number) => number;
    readonly session_new: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly session_normalized_fuel: (a: number) => [number, number];
    readonly session_step: (a: number) => [number, number, number];
    readonly session_trips: (a: number) => number;
    readonly session_velocity_profile: (a: number, b: number) => [number, number, number, number];
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
