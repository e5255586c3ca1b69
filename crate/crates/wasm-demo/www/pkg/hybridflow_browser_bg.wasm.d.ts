/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_playground_free: (a: number, b: number) => void;
export const __wbg_samplerun_free: (a: number, b: number) => void;
export const playground_classes: (a: number) => number;
export const playground_field: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const playground_new: (a: number, b: number, c: number) => [number, number, number];
export const playground_reference: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const playground_sample: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
export const playground_step: (a: number) => number;
export const playground_totalSteps: (a: number) => number;
export const playground_train: (a: number, b: number) => [number, number, number];
export const playground_validation: (a: number) => [number, number, number, number];
export const samplerun_energyDistance: (a: number) => number;
export const samplerun_labels: (a: number) => [number, number];
export const samplerun_n: (a: number) => number;
export const samplerun_nfe: (a: number) => number;
export const samplerun_states: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __wbindgen_start: () => void;
