/* tslint:disable */
/* eslint-disable */

export class DemoHandle {
    free(): void;
    [Symbol.dispose](): void;
    constructor(subjects: number, seed: number, noiseless: boolean);
    resegment(): string;
    resegment_rgba(): Uint8Array;
    /**
     * JSON list of segment names in label order.
     */
    segments(): string;
    size(): number;
    subject_rgba(index: number, overlay: boolean): Uint8Array;
    /**
     * JSON list of subjects.
     */
    subjects(): string;
    transplant(target: number, source: number, mask: number): string;
    transplant_rgba(overlay: boolean): Uint8Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demohandle_free: (a: number, b: number) => void;
    readonly demohandle_new: (a: number, b: number, c: number) => [number, number, number];
    readonly demohandle_resegment: (a: number) => [number, number, number, number];
    readonly demohandle_resegment_rgba: (a: number) => [number, number, number, number];
    readonly demohandle_segments: (a: number) => [number, number];
    readonly demohandle_size: (a: number) => number;
    readonly demohandle_subject_rgba: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demohandle_subjects: (a: number) => [number, number];
    readonly demohandle_transplant: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demohandle_transplant_rgba: (a: number, b: number) => [number, number, number, number];
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
