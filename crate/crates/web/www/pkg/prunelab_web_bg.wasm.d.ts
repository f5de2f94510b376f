/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_lab_free: (a: number, b: number) => void;
export const __wbg_preview_free: (a: number, b: number) => void;
export const __wbg_prunesummary_free: (a: number, b: number) => void;
export const lab_clean_accuracy: (a: number) => [number, number, number];
export const lab_new: (a: bigint, b: number) => [number, number, number];
export const lab_preview: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
export const lab_prune: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
export const lab_side: (a: number) => number;
export const lab_test_count: (a: number) => number;
export const preview_attacked: (a: number) => [number, number];
export const preview_attacked_prediction: (a: number) => [number, number];
export const preview_clean: (a: number) => [number, number];
export const preview_clean_prediction: (a: number) => [number, number];
export const preview_label: (a: number) => [number, number];
export const preview_max_change: (a: number) => number;
export const prunesummary_clean_after: (a: number) => number;
export const prunesummary_clean_before: (a: number) => number;
export const prunesummary_fgsm_after: (a: number) => number;
export const prunesummary_fgsm_before: (a: number) => number;
export const prunesummary_filters_after: (a: number) => number;
export const prunesummary_filters_before: (a: number) => number;
export const prunesummary_layer_widths: (a: number) => [number, number];
export const prunesummary_params_after: (a: number) => number;
export const prunesummary_params_before: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
