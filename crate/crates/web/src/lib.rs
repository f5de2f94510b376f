//! wasm-bindgen surface for `www/index.html`: a small MiniVGG trained on
//! synthetic shapes, an attack preview, and a pruning explorer.

use prunelab::attacks::{apply, AttackKind, Corruption};
use prunelab::data::{synth_shapes, DatasetSplit, Normalization, SynthSpec, SYNTH_CLASS_NAMES};
use prunelab::metrics::evaluate_under_attack;
use prunelab::network::{ArchSpec, Network};
use prunelab::pruning::{
    prunable, prune_iterative, AdjustScheme, Criterion, ElementKind, PruneConfig, StructureMode,
};
use prunelab::train::{evaluate, train, TrainHyper};
use prunelab::Tensor;
use wasm_bindgen::prelude::*;

const SIDE: usize = 16;
const WIDTH: usize = 4;

fn js(e: prunelab::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// RGBA bytes of image `i` in an NCHW batch with pixels in [0, 1].
fn rgba(images: &Tensor, i: usize) -> Vec<u8> {
    let plane = SIDE * SIDE;
    let v = &images.values()[i * 3 * plane..(i + 1) * 3 * plane];
    let mut out = Vec::with_capacity(plane * 4);
    for p in 0..plane {
        for c in 0..3 {
            out.push((v[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

fn attack_kind(tag: &str, severity: u8, alpha: f32) -> Result<AttackKind, JsError> {
    match tag {
        "fgsm" => Ok(AttackKind::Fgsm { alpha }),
        "occlusion" => Ok(AttackKind::Occlusion {
            side_px: (SIDE * severity as usize).div_ceil(10),
        }),
        other => Ok(AttackKind::Corruption {
            name: Corruption::from_tag(other).map_err(js)?,
            severity,
        }),
    }
}

#[wasm_bindgen]
pub struct Preview {
    clean: Vec<u8>,
    attacked: Vec<u8>,
    label: String,
    clean_prediction: String,
    attacked_prediction: String,
    max_change: f32,
}

#[wasm_bindgen]
impl Preview {
    #[wasm_bindgen(getter)]
    pub fn clean(&self) -> Vec<u8> {
        self.clean.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn attacked(&self) -> Vec<u8> {
        self.attacked.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn label(&self) -> String {
        self.label.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn clean_prediction(&self) -> String {
        self.clean_prediction.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn attacked_prediction(&self) -> String {
        self.attacked_prediction.clone()
    }
    /// Largest per-pixel change.
    #[wasm_bindgen(getter)]
    pub fn max_change(&self) -> f32 {
        self.max_change
    }
}

#[wasm_bindgen]
pub struct PruneSummary {
    params_before: usize,
    params_after: usize,
    filters_before: usize,
    filters_after: usize,
    clean_before: f64,
    clean_after: f64,
    fgsm_before: f64,
    fgsm_after: f64,
    layer_widths: String,
}

#[wasm_bindgen]
impl PruneSummary {
    #[wasm_bindgen(getter)]
    pub fn params_before(&self) -> usize {
        self.params_before
    }
    #[wasm_bindgen(getter)]
    pub fn params_after(&self) -> usize {
        self.params_after
    }
    #[wasm_bindgen(getter)]
    pub fn filters_before(&self) -> usize {
        self.filters_before
    }
    #[wasm_bindgen(getter)]
    pub fn filters_after(&self) -> usize {
        self.filters_after
    }
    #[wasm_bindgen(getter)]
    pub fn clean_before(&self) -> f64 {
        self.clean_before
    }
    #[wasm_bindgen(getter)]
    pub fn clean_after(&self) -> f64 {
        self.clean_after
    }
    #[wasm_bindgen(getter)]
    pub fn fgsm_before(&self) -> f64 {
        self.fgsm_before
    }
    #[wasm_bindgen(getter)]
    pub fn fgsm_after(&self) -> f64 {
        self.fgsm_after
    }
    /// Filters per conv layer after pruning, e.g. "3 4 7 8 14 16".
    #[wasm_bindgen(getter)]
    pub fn layer_widths(&self) -> String {
        self.layer_widths.clone()
    }
}

#[wasm_bindgen]
pub struct Lab {
    net: Network,
    train_set: DatasetSplit,
    test_set: DatasetSplit,
    seed: u64,
}

#[wasm_bindgen]
impl Lab {
    /// Generates the shapes dataset and trains a MiniVGG on it.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, epochs: usize) -> Result<Lab, JsError> {
        let (train_set, test_set) = synth_shapes(&SynthSpec {
            train_per_class: 64,
            test_per_class: 32,
            image_side: SIDE,
            noise_sigma: 0.1,
            seed,
        })
        .map_err(js)?;
        let mut net = Network::build(&ArchSpec::mini_vgg(WIDTH, 4, 3, SIDE), seed).map_err(js)?;
        net.normalization = Normalization::fit(&train_set).map_err(js)?;
        let hyper = TrainHyper {
            batch_size: 32,
            ..TrainHyper::standard(epochs, SIDE, seed)
        };
        train(&mut net, &train_set, &hyper, &[]).map_err(js)?;
        Ok(Lab {
            net,
            train_set,
            test_set,
            seed,
        })
    }

    pub fn test_count(&self) -> usize {
        self.test_set.len()
    }

    pub fn side(&self) -> usize {
        SIDE
    }

    pub fn clean_accuracy(&self) -> Result<f64, JsError> {
        evaluate(&self.net, &self.test_set).map_err(js)
    }

    /// Applies one attack to test image `index`. `attack` is `fgsm`,
    /// `occlusion`, or a corruption tag; `alpha` is the FGSM budget.
    pub fn preview(
        &self,
        index: usize,
        attack: &str,
        severity: u8,
        alpha: f32,
    ) -> Result<Preview, JsError> {
        if index >= self.test_set.len() {
            return Err(JsError::new("index out of range"));
        }
        let kind = attack_kind(attack, severity, alpha)?;
        let one = self.test_set.subset(&[index]).map_err(js)?;
        let adv = apply(&kind, &self.net, &one.images, &one.labels, self.seed).map_err(js)?;
        let clean_pred = self.net.predict(&one.images).map_err(js)?[0];
        let adv_pred = self.net.predict(&adv).map_err(js)?[0];
        Ok(Preview {
            clean: rgba(&one.images, 0),
            attacked: rgba(&adv, 0),
            label: SYNTH_CLASS_NAMES[one.labels[0]].into(),
            clean_prediction: SYNTH_CLASS_NAMES[clean_pred].into(),
            attacked_prediction: SYNTH_CLASS_NAMES[adv_pred].into(),
            max_change: adv.max_abs_diff(&one.images),
        })
    }

    /// One pruning iteration at ratio `ratio` with criterion `l1`,
    /// `expected_abs`, or `pls`, followed by `fine_tune` epochs.
    pub fn prune(
        &self,
        criterion: &str,
        ratio: f64,
        fine_tune: usize,
        alpha: f32,
    ) -> Result<PruneSummary, JsError> {
        let criterion = match Criterion::from_tag(criterion).map_err(js)? {
            Criterion::Pls { .. } => Criterion::Pls { n_components: 2 },
            c => c,
        };
        let cfg = PruneConfig {
            criterion,
            ratio,
            iterations: 1,
            mode: StructureMode::Filters,
            scheme: AdjustScheme::FineTune { epochs: fine_tune },
            seed: self.seed,
        };
        let base = TrainHyper {
            batch_size: 32,
            ..TrainHyper::standard(fine_tune.max(1), SIDE, self.seed)
        };
        let calibration = self.train_set.head(128);
        let out = prune_iterative(&self.net, &cfg, &self.train_set, &calibration, &base, &[])
            .map_err(js)?;
        let pruned = &out
            .iterations
            .first()
            .ok_or_else(|| JsError::new(out.stopped_early.as_deref().unwrap_or("nothing pruned")))?
            .network;
        let fgsm = prunelab::attacks::AttackSpec::white_box(AttackKind::Fgsm { alpha });
        let acc = |n: &Network| -> Result<(f64, f64), JsError> {
            Ok((
                evaluate(n, &self.test_set).map_err(js)?,
                evaluate_under_attack(n, &self.test_set, &fgsm, None, self.seed).map_err(js)?,
            ))
        };
        let (clean_before, fgsm_before) = acc(&self.net)?;
        let (clean_after, fgsm_after) = acc(pruned)?;
        let widths: Vec<String> = pruned
            .conv_locs()
            .iter()
            .map(|&l| pruned.unit(l).conv.out_channels().to_string())
            .collect();
        Ok(PruneSummary {
            params_before: self.net.param_count(),
            params_after: pruned.param_count(),
            filters_before: prunable(&self.net, ElementKind::Filters).len(),
            filters_after: prunable(pruned, ElementKind::Filters).len(),
            clean_before,
            clean_after,
            fgsm_before,
            fgsm_after,
            layer_widths: widths.join(" "),
        })
    }
}
