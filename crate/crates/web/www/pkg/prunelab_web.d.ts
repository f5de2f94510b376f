/* tslint:disable */
/* eslint-disable */

export class Lab {
    free(): void;
    [Symbol.dispose](): void;
    clean_accuracy(): number;
    /**
     * Generates the shapes dataset and trains a MiniVGG on it.
     */
    constructor(seed: bigint, epochs: number);
    /**
     * Applies one attack to test image `index`. `attack` is `fgsm`,
     * `occlusion`, or a corruption tag; `alpha` is the FGSM budget.
     */
    preview(index: number, attack: string, severity: number, alpha: number): Preview;
    /**
     * One pruning iteration at ratio `ratio` with criterion `l1`,
     * `expected_abs`, or `pls`, followed by `fine_tune` epochs.
     */
    prune(criterion: string, ratio: number, fine_tune: number, alpha: number): PruneSummary;
    side(): number;
    test_count(): number;
}

export class Preview {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    readonly attacked: Uint8Array;
    readonly attacked_prediction: string;
    readonly clean: Uint8Array;
    readonly clean_prediction: string;
    readonly label: string;
    /**
     * Largest per-pixel change.
     */
    readonly max_change: number;
}

export class PruneSummary {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    readonly clean_after: number;
    readonly clean_before: number;
    readonly fgsm_after: number;
    readonly fgsm_before: number;
    readonly filters_after: number;
    readonly filters_before: number;
    /**
     * Filters per conv layer after pruning, e.g. "3 4 7 8 14 16".
     */
    readonly layer_widths: string;
    readonly params_after: number;
    readonly params_before: number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_lab_free: (a: number, b: number) => void;
    readonly __wbg_preview_free: (a: number, b: number) => void;
    readonly __wbg_prunesummary_free: (a: number, b: number) => void;
    readonly lab_clean_accuracy: (a: number) => [number, number, number];
    readonly lab_new: (a: bigint, b: number) => [number, number, number];
    readonly lab_preview: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
    readonly lab_prune: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
    readonly lab_side: (a: number) => number;
    readonly lab_test_count: (a: number) => number;
    readonly preview_attacked: (a: number) => [number, number];
    readonly preview_attacked_prediction: (a: number) => [number, number];
    readonly preview_clean: (a: number) => [number, number];
    readonly preview_clean_prediction: (a: number) => [number, number];
    readonly preview_label: (a: number) => [number, number];
    readonly preview_max_change: (a: number) => number;
    readonly prunesummary_clean_after: (a: number) => number;
    readonly prunesummary_clean_before: (a: number) => number;
    readonly prunesummary_fgsm_after: (a: number) => number;
    readonly prunesummary_fgsm_before: (a: number) => number;
    readonly prunesummary_filters_after: (a: number) => number;
    readonly prunesummary_filters_before: (a: number) => number;
    readonly prunesummary_layer_widths: (a: number) => [number, number];
    readonly prunesummary_params_after: (a: number) => number;
    readonly prunesummary_params_before: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
