/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_session_free: (a: number, b: number) => void;
export const grade_profile: (a: number, b: number, c: number) => [number, number, number, number];
export const session_arrival_steps: (a: number) => [number, number];
export const session_finished: (a: number) => number;
export const session_new: (a: number, b: number, c: number, d: number) => [number, number, number];
export const session_normalized_fuel: (a: number) => [number, number];
export const session_step: (a: number) => [number, number, number];
export const session_trips: (a: number) => number;
export const session_velocity_profile: (a: number, b: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
