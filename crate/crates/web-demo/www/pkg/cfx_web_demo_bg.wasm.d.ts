/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demohandle_free: (a: number, b: number) => void;
export const demohandle_new: (a: number, b: number, c: number) => [number, number, number];
export const demohandle_resegment: (a: number) => [number, number, number, number];
export const demohandle_resegment_rgba: (a: number) => [number, number, number, number];
export const demohandle_segments: (a: number) => [number, number];
export const demohandle_size: (a: number) => number;
export const demohandle_subject_rgba: (a: number, b: number, c: number) => [number, number, number, number];
export const demohandle_subjects: (a: number) => [number, number];
export const demohandle_transplant: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const demohandle_transplant_rgba: (a: number, b: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
