/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_twophasedemo_free: (a: number, b: number) => void;
export const rate_curve: (a: number, b: number) => [number, number, number, number];
export const spike_times: (a: number, b: number, c: number) => [number, number, number, number];
export const sweep_csv: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const twophasedemo_accuracy: (a: number) => [number, number, number];
export const twophasedemo_last_h: (a: number) => [number, number];
export const twophasedemo_last_h_hat: (a: number) => [number, number];
export const twophasedemo_new: (a: number, b: number) => [number, number, number];
export const twophasedemo_samples_seen: (a: number) => number;
export const twophasedemo_step: (a: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
