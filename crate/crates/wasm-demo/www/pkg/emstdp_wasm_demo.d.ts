/* tslint:disable */
/* eslint-disable */

/**
 * A small network learning to tell bar orientations apart, one
 * two-phase sample at a time.
 */
export class TwoPhaseDemo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Accuracy on a fixed set of 60 bars.
     */
    accuracy(): number;
    /**
     * Output spike counts of the last sample in phase 1.
     */
    last_h(): Uint32Array;
    /**
     * Output spike counts of the last sample in phase 2.
     */
    last_h_hat(): Uint32Array;
    constructor(dfa: boolean, seed: number);
    samples_seen(): number;
    /**
     * Trains on one random sample and returns its label.
     */
    step(): number;
}

/**
 * Spike count for every input value `0..=t`.
 */
export function rate_curve(t: number, theta: number): Uint32Array;

/**
 * Spike times of one bias-driven input neuron over a phase of `t` steps.
 */
export function spike_times(input: number, t: number, theta: number): Uint32Array;

/**
 * Neurons-per-core sweep as CSV, for both feedback modes.
 */
export function sweep_csv(structure: string, l_m: string): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_twophasedemo_free: (a: number, b: number) => void;
    readonly rate_curve: (a: number, b: number) => [number, number, number, number];
    readonly spike_times: (a: number, b: number, c: number) => [number, number, number, number];
    readonly sweep_csv: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly twophasedemo_accuracy: (a: number) => [number, number, number];
    readonly twophasedemo_last_h: (a: number) => [number, number];
    readonly twophasedemo_last_h_hat: (a: number) => [number, number];
    readonly twophasedemo_new: (a: number, b: number) => [number, number, number];
    readonly twophasedemo_samples_seen: (a: number) => number;
    readonly twophasedemo_step: (a: number) => [number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
