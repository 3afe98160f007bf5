/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    augment(seed: number, out_size: number): number;
    classCount(_class: number): number;
    /**
     * -1 when unmatched.
     */
    matchOf(i: number): number;
    matchesInto(j: number): Uint32Array;
    meanUncertainty(): number;
    constructor(seed: number, side: number);
    sceneRgba(overlay: boolean): Uint8Array;
    side(): number;
    uncertaintyRgba(seed: number, passes: number, dropout_rate: number): Uint8Array;
    viewHeight(which: number): number;
    viewRgba(which: number): Uint8Array;
    viewWidth(which: number): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_augment: (a: number, b: number, c: number) => [number, number, number];
    readonly demo_classCount: (a: number, b: number) => number;
    readonly demo_matchOf: (a: number, b: number) => number;
    readonly demo_matchesInto: (a: number, b: number) => [number, number];
    readonly demo_meanUncertainty: (a: number) => number;
    readonly demo_new: (a: number, b: number) => [number, number, number];
    readonly demo_sceneRgba: (a: number, b: number) => [number, number];
    readonly demo_side: (a: number) => number;
    readonly demo_uncertaintyRgba: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_viewHeight: (a: number, b: number) => number;
    readonly demo_viewRgba: (a: number, b: number) => [number, number];
    readonly demo_viewWidth: (a: number, b: number) => number;
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
