/* tslint:disable */
/* eslint-disable */

export class Playground {
    free(): void;
    [Symbol.dispose](): void;
    classes(): number;
    /**
     * Flat `(x, y, u, v)` quadruples over a square lattice.
     */
    field(oracle: boolean, r: number, t: number, _class: number, grid: number, extent: number): Float64Array;
    constructor(seed: number, width: number, total_steps: number);
    /**
     * Flat `(x, y)` pairs of data from one class.
     */
    reference(n: number, _class: number, seed: number): Float64Array;
    sample(sampler: string, n: number, _class: number, seed: number): SampleRun;
    step(): number;
    totalSteps(): number;
    /**
     * Runs up to `steps` optimizer steps, returning their mean loss.
     */
    train(steps: number): number;
    /**
     * `[reflow mode, meanflow mode]` validation losses against the exact field.
     */
    validation(): Float64Array;
}

export class SampleRun {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    energyDistance(): number;
    labels(): string[];
    n(): number;
    nfe(): number;
    /**
     * Stage-major flat `(x, y)` pairs, `n` per stage.
     */
    states(): Float64Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_playground_free: (a: number, b: number) => void;
    readonly __wbg_samplerun_free: (a: number, b: number) => void;
    readonly playground_classes: (a: number) => number;
    readonly playground_field: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly playground_new: (a: number, b: number, c: number) => [number, number, number];
    readonly playground_reference: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly playground_sample: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
    readonly playground_step: (a: number) => number;
    readonly playground_totalSteps: (a: number) => number;
    readonly playground_train: (a: number, b: number) => [number, number, number];
    readonly playground_validation: (a: number) => [number, number, number, number];
    readonly samplerun_energyDistance: (a: number) => number;
    readonly samplerun_labels: (a: number) => [number, number];
    readonly samplerun_n: (a: number) => number;
    readonly samplerun_nfe: (a: number) => number;
    readonly samplerun_states: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_drop_slice: (a: number, b: number) => void;
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
