//! Adversarial and corrupted inputs: FGSM, center occlusion, and four
//! label-preserving corruptions with five severity levels.
//!
//! Every attack works in raw `[0, 1]` pixel space. Normalization lives
//! inside the network forward, so FGSM budgets are raw-pixel quantities.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::{decode_f32, encode_f32};
use crate::error::{invalid, Error, Result};
use crate::network::Network;
use crate::seed;
use crate::tensor::Tensor;

pub const NOISE_SIGMA: [f32; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
pub const BLUR_KERNEL: [usize; 5] = [3, 3, 5, 7, 9];
pub const CONTRAST: [f32; 5] = [0.75, 0.6, 0.45, 0.3, 0.2];
pub const BRIGHTNESS: [f32; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

pub const DEFAULT_FGSM_ALPHA: f32 = 8.0 / 255.0;
pub const DEFAULT_SEVERITY: u8 = 4;

/// Samples per FGSM gradient pass.
const CRAFT_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    GaussianNoise,
    BoxBlur,
    Contrast,
    Brightness,
}

impl Corruption {
    pub const ALL: [Corruption; 4] = [
        Corruption::GaussianNoise,
        Corruption::BoxBlur,
        Corruption::Contrast,
        Corruption::Brightness,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Corruption::GaussianNoise => "gaussian_noise",
            Corruption::BoxBlur => "box_blur",
            Corruption::Contrast => "contrast",
            Corruption::Brightness => "brightness",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.tag() == tag)
            .ok_or_else(|| invalid("corrupt", format!("unknown corruption `{tag}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm { alpha: f32 },
    Occlusion { side_px: usize },
    Corruption { name: Corruption, severity: u8 },
}

impl AttackKind {
    pub fn fgsm() -> Self {
        AttackKind::Fgsm {
            alpha: DEFAULT_FGSM_ALPHA,
        }
    }

    /// Square of side `round(image_side / 2)`.
    pub fn occlusion(image_side: usize) -> Self {
        AttackKind::Occlusion {
            side_px: image_side.div_ceil(2),
        }
    }

    pub fn corruption(name: Corruption) -> Self {
        AttackKind::Corruption {
            name,
            severity: DEFAULT_SEVERITY,
        }
    }

    /// FGSM, occlusion, then the four corruptions, all at default severity.
    pub fn default_suite(image_side: usize) -> Vec<Self> {
        let mut out = vec![Self::fgsm(), Self::occlusion(image_side)];
        out.extend(Corruption::ALL.map(Self::corruption));
        out
    }

    /// Short column name: `fgsm`, `occlusion`, or the corruption tag.
    pub fn tag(&self) -> &'static str {
        match self {
            AttackKind::Fgsm { .. } => "fgsm",
            AttackKind::Occlusion { .. } => "occlusion",
            AttackKind::Corruption { name, .. } => name.tag(),
        }
    }

    /// Resolves a tag to the attack at its default strength.
    pub fn from_tag(tag: &str, image_side: usize) -> Result<Self> {
        match tag {
            "fgsm" => Ok(Self::fgsm()),
            "occlusion" => Ok(Self::occlusion(image_side)),
            other => Ok(Self::corruption(Corruption::from_tag(other)?)),
        }
    }

    pub fn is_fgsm(&self) -> bool {
        matches!(self, AttackKind::Fgsm { .. })
    }

    pub fn validate(&self, image_side: usize) -> Result<()> {
        match *self {
            AttackKind::Fgsm { alpha } if !(alpha.is_finite() && alpha >= 0.0) => Err(invalid(
                "fgsm",
                format!("alpha {alpha} must be finite and non-negative"),
            )),
            AttackKind::Occlusion { side_px } if side_px > image_side => Err(invalid(
                "occlude_center",
                format!("side {side_px} exceeds image side {image_side}"),
            )),
            AttackKind::Corruption { severity, .. } if !(1..=5).contains(&severity) => Err(
                invalid("corrupt", format!("severity {severity} outside 1..=5")),
            ),
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttackKind::Fgsm { alpha } => write!(f, "fgsm(alpha={alpha})"),
            AttackKind::Occlusion { side_px } => write!(f, "occlusion(side={side_px})"),
            AttackKind::Corruption { name, severity } => {
                write!(f, "{}(severity={severity})", name.tag())
            }
        }
    }
}

/// An attack plus, for FGSM, the tag of the model the gradient comes from.
/// Without a source, FGSM is white-box against whichever model is attacked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub source_model: Option<String>,
}

impl AttackSpec {
    pub fn white_box(kind: AttackKind) -> Self {
        Self {
            kind,
            source_model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub attack: AttackSpec,
    /// Noise seed (gaussian noise only).
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    pub images: Tensor,
    pub clean_labels: Vec<usize>,
    pub provenance: Provenance,
}

fn check_images(op: &'static str, images: &Tensor) -> Result<[usize; 4]> {
    match images.shape() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        s => Err(invalid(op, format!("expected [N,C,H,W] images, got {s:?}"))),
    }
}

/// Moves `y` one ulp at a time toward `x` until `|y - x| <= alpha` holds in
/// exact arithmetic. Rounding in `x + alpha` can otherwise overshoot.
fn within_budget(x: f32, mut y: f32, alpha: f32) -> f32 {
    while (y as f64 - x as f64).abs() > alpha as f64 {
        y = if y > x {
            f32::from_bits(y.to_bits() - 1)
        } else {
            f32::from_bits(y.to_bits() + 1)
        };
    }
    y
}

/// Models FGSM can differentiate: gradient of the batch-summed
/// cross-entropy with respect to the raw input.
pub trait InputGradient {
    fn input_gradient(&self, images: &Tensor, labels: &[usize]) -> Result<Tensor>;
}

impl InputGradient for Network {
    /// Eval-mode forward (running batchnorm statistics), so the source's
    /// parameters and statistics are untouched.
    fn input_gradient(&self, images: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let [n, ..] = check_images("fgsm", images)?;
        let mut tape = Tape::new();
        let x = tape.param(images);
        let pass = self.forward_eval(&mut tape, x)?;
        let mean = tape.softmax_cross_entropy(pass.logits, labels)?;
        let loss = tape.scale(mean, n as f32);
        tape.backward(loss)?;
        let g = tape.take_grad(x).unwrap_or_else(|| vec![0.0; images.len()]);
        Tensor::new(images.shape().to_vec(), g)
    }
}

/// `clip(x + alpha * sign(grad_x loss(source(x), y)), 0, 1)` with
/// `sign(0) = 0`. Gradients are computed per chunk; each sample's gradient
/// is independent of its batch mates in eval mode.
pub fn fgsm<M: InputGradient + ?Sized>(
    source: &M,
    images: &Tensor,
    labels: &[usize],
    alpha: f32,
) -> Result<Tensor> {
    AttackKind::Fgsm { alpha }.validate(usize::MAX)?;
    let [n, ..] = check_images("fgsm", images)?;
    if labels.len() != n {
        return Err(invalid(
            "fgsm",
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    if alpha == 0.0 {
        return Ok(images.clone());
    }
    let per = images.len() / n.max(1);
    let mut out = Vec::with_capacity(images.len());
    for start in (0..n).step_by(CRAFT_BATCH) {
        let idx: Vec<usize> = (start..(start + CRAFT_BATCH).min(n)).collect();
        let chunk = images.select(0, &idx)?;
        let grad = source.input_gradient(&chunk, &labels[start..start + idx.len()])?;
        for (&x, &g) in chunk.values().iter().zip(grad.values()) {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            let y = (x + alpha * s).clamp(0.0, 1.0);
            out.push(within_budget(x, y, alpha));
        }
    }
    debug_assert_eq!(out.len(), n * per);
    Tensor::new(images.shape().to_vec(), out)
}

/// Zeroes the centered `side_px` square (top-left at
/// `((H - side) / 2, (W - side) / 2)`, floored) in every channel.
pub fn occlude_center(images: &Tensor, side_px: usize) -> Result<Tensor> {
    let [n, c, h, w] = check_images("occlude_center", images)?;
    if side_px > h || side_px > w {
        return Err(invalid(
            "occlude_center",
            format!("side {side_px} exceeds image {h}x{w}"),
        ));
    }
    let (top, left) = ((h - side_px) / 2, (w - side_px) / 2);
    let mut out = images.values().to_vec();
    for plane in 0..n * c {
        for y in top..top + side_px {
            let row = plane * h * w + y * w;
            out[row + left..row + left + side_px].fill(0.0);
        }
    }
    Tensor::new(images.shape().to_vec(), out)
}

/// Index into `0..n` under mirror reflection without edge repetition.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn box_blur(images: &Tensor, k: usize) -> Tensor {
    let s = images.shape();
    let (h, w) = (s[2], s[3]);
    let r = (k / 2) as isize;
    let src = images.values();
    let mut out = vec![0.0f32; src.len()];
    let norm = (k * k) as f64;
    for (plane, dst) in out.chunks_mut(h * w).enumerate() {
        let img = &src[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for dy in -r..=r {
                    let sy = reflect(y as isize + dy, h);
                    for dx in -r..=r {
                        acc += img[sy * w + reflect(x as isize + dx, w)] as f64;
                    }
                }
                dst[y * w + x] = ((acc / norm) as f32).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

fn contrast(images: &Tensor, c: f32) -> Tensor {
    let s = images.shape();
    let hw = s[2] * s[3];
    let mut out = images.values().to_vec();
    for plane in out.chunks_mut(hw) {
        let mean = (plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32;
        plane
            .iter_mut()
            .for_each(|v| *v = ((*v - mean) * c + mean).clamp(0.0, 1.0));
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Applies a named corruption at `severity` (1..=5). Gaussian noise for
/// sample `i` comes from its own `(seed, i)` stream.
pub fn corrupt(images: &Tensor, name: Corruption, severity: u8, seed: u64) -> Result<Tensor> {
    let [n, ..] = check_images("corrupt", images)?;
    AttackKind::Corruption { name, severity }.validate(usize::MAX)?;
    let level = severity as usize - 1;
    Ok(match name {
        Corruption::GaussianNoise => {
            let per = images.len() / n.max(1);
            let dist = Normal::new(0.0f32, NOISE_SIGMA[level]).expect("positive sigma");
            let mut out = images.values().to_vec();
            for (i, img) in out.chunks_mut(per.max(1)).enumerate() {
                let mut rng = seed::rng(seed, 0x9a55_0000_0000 + i as u64);
                img.iter_mut()
                    .for_each(|v| *v = (*v + dist.sample(&mut rng)).clamp(0.0, 1.0));
            }
            Tensor::new(images.shape().to_vec(), out)?
        }
        Corruption::BoxBlur => box_blur(images, BLUR_KERNEL[level]),
        Corruption::Contrast => contrast(images, CONTRAST[level]),
        Corruption::Brightness => {
            let b = BRIGHTNESS[level];
            Tensor::from_fn(images.shape(), |i| (images.values()[i] + b).clamp(0.0, 1.0))
        }
    })
}

/// Contrast at an arbitrary factor; `corrupt` uses the severity table.
pub fn contrast_with(images: &Tensor, c: f32) -> Result<Tensor> {
    check_images("contrast", images)?;
    Ok(contrast(images, c))
}

/// Crafts `kind` against `images`. FGSM uses `source` for its gradient.
pub fn apply(
    kind: &AttackKind,
    source: &Network,
    images: &Tensor,
    labels: &[usize],
    seed: u64,
) -> Result<Tensor> {
    match *kind {
        AttackKind::Fgsm { alpha } => fgsm(source, images, labels, alpha),
        AttackKind::Occlusion { side_px } => occlude_center(images, side_px),
        AttackKind::Corruption { name, severity } => corrupt(images, name, severity, seed),
    }
}

pub fn craft(
    spec: &AttackSpec,
    source: &Network,
    images: &Tensor,
    labels: &[usize],
    seed: u64,
) -> Result<AdversarialBatch> {
    let images = apply(&spec.kind, source, images, labels, seed)?;
    let uses_seed = matches!(
        spec.kind,
        AttackKind::Corruption {
            name: Corruption::GaussianNoise,
            ..
        }
    );
    Ok(AdversarialBatch {
        images,
        clean_labels: labels.to_vec(),
        provenance: Provenance {
            attack: spec.clone(),
            seed: uses_seed.then_some(seed),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BatchManifest {
    format_version: u32,
    shape: Vec<usize>,
    labels: Vec<usize>,
    provenance: Provenance,
}

pub const BATCH_IMAGES_FILE: &str = "images.bin";

/// Writes `manifest.json` (shape, labels, provenance) and `images.bin`
/// (little-endian f32), mirroring the checkpoint layout.
pub fn save_batch(batch: &AdversarialBatch, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let m = BatchManifest {
        format_version: crate::checkpoint::FORMAT_VERSION,
        shape: batch.images.shape().to_vec(),
        labels: batch.clean_labels.clone(),
        provenance: batch.provenance.clone(),
    };
    fs::write(
        dir.join(crate::checkpoint::MANIFEST_FILE),
        serde_json::to_string_pretty(&m)?,
    )?;
    fs::write(
        dir.join(BATCH_IMAGES_FILE),
        encode_f32(batch.images.values().iter().copied()),
    )?;
    Ok(())
}

pub fn load_batch(dir: &Path) -> Result<AdversarialBatch> {
    let fail = |msg: String| Error::Checkpoint {
        path: dir.to_path_buf(),
        msg,
    };
    let m: BatchManifest =
        serde_json::from_slice(&fs::read(dir.join(crate::checkpoint::MANIFEST_FILE))?)?;
    let bytes = fs::read(dir.join(BATCH_IMAGES_FILE))?;
    let need: usize = m.shape.iter().product::<usize>() * 4;
    if bytes.len() != need {
        return Err(fail(format!(
            "{BATCH_IMAGES_FILE} holds {} bytes, expected {need}",
            bytes.len()
        )));
    }
    if m.shape.first() != Some(&m.labels.len()) {
        return Err(fail(format!(
            "{} labels for shape {:?}",
            m.labels.len(),
            m.shape
        )));
    }
    Ok(AdversarialBatch {
        images: Tensor::new(m.shape, decode_f32(&bytes))?,
        clean_labels: m.labels,
        provenance: m.provenance,
    })
}
