/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_augment: (a: number, b: number, c: number) => [number, number, number];
export const demo_classCount: (a: number, b: number) => number;
export const demo_matchOf: (a: number, b: number) => number;
export const demo_matchesInto: (a: number, b: number) => [number, number];
export const demo_meanUncertainty: (a: number) => number;
export const demo_new: (a: number, b: number) => [number, number, number];
export const demo_sceneRgba: (a: number, b: number) => [number, number];
export const demo_side: (a: number) => number;
export const demo_uncertaintyRgba: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const demo_viewHeight: (a: number, b: number) => number;
export const demo_viewRgba: (a: number, b: number) => [number, number];
export const demo_viewWidth: (a: number, b: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
