//! Dataset ingestion, the synthetic shapes corpus, normalization and
//! training-time augmentation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Images in `[0,1]` (before normalization) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
    augmented: bool,
}

impl DatasetSplit {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(invalid(
                "DatasetSplit::new",
                format!(
                    "images {:?} do not match {} labels",
                    images.shape(),
                    labels.len()
                ),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(invalid(
                "DatasetSplit::new",
                format!("label {bad} outside [0, {class_count})"),
            ));
        }
        Ok(Self {
            images,
            labels,
            class_count,
            name: name.into(),
            augmented: false,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    /// Evaluation and attack paths must only ever see unaugmented images.
    pub fn ensure_unaugmented(&self, op: &'static str) -> Result<()> {
        if self.augmented {
            return Err(invalid(
                op,
                format!("split `{}` carries training augmentation", self.name),
            ));
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select(0, indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            name: self.name.clone(),
            augmented: self.augmented,
        })
    }

    pub fn range(&self, start: usize, end: usize) -> Self {
        let end = end.min(self.len());
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let images = Tensor::new(
            vec![end - start, c, h, w],
            self.images.values()[start * per..end * per].to_vec(),
        )
        .expect("slice of a valid split");
        Self {
            images,
            labels: self.labels[start..end].to_vec(),
            class_count: self.class_count,
            name: self.name.clone(),
            augmented: self.augmented,
        }
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Self {
        self.range(0, n.min(self.len()))
    }

    pub fn with_images(&self, images: Tensor) -> Result<Self> {
        if images.shape() != self.images.shape() {
            return Err(Error::ShapeMismatch {
                op: "with_images",
                left: self.images.shape().to_vec(),
                right: images.shape().to_vec(),
            });
        }
        Ok(Self {
            images,
            ..self.clone()
        })
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Keeps at most `cap` samples per class, drawn with `seed`; survivors
    /// keep their original relative order.
    pub fn stratified_cap(&self, cap: usize, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(seed, 0x05ee_dcab);
        let mut keep = Vec::new();
        for class in 0..self.class_count {
            let mut idx: Vec<usize> = (0..self.len())
                .filter(|&i| self.labels[i] == class)
                .collect();
            idx.shuffle(&mut rng);
            idx.truncate(cap);
            keep.extend(idx);
        }
        keep.sort_unstable();
        self.subset(&keep)
    }
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Decodes CIFAR-10 binary records (1 label byte + 3072 pixel bytes).
pub fn parse_cifar10_records(bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64;
        return Err(Error::Format {
            format: "cifar10",
            offset,
            msg: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD} bytes",
                bytes.len() % CIFAR_RECORD
            ),
        });
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(count * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(count);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format {
                format: "cifar10",
                offset: (r * CIFAR_RECORD) as u64,
                msg: format!("label byte {} out of range", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn cifar_split(files: &[std::path::PathBuf], name: &str) -> Result<DatasetSplit> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let bytes = fs::read(f)?;
        let (p, l) = parse_cifar10_records(&bytes)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    DatasetSplit::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, 10, name)
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`. Batch
/// files that are absent are skipped, but at least one train batch and the
/// test batch must exist.
pub fn load_cifar10_binary(
    dir: &Path,
    per_class_cap: Option<usize>,
    seed: u64,
) -> Result<(DatasetSplit, DatasetSplit)> {
    let train_files: Vec<_> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .filter(|p| p.exists())
        .collect();
    if train_files.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no data_batch_*.bin under {}", dir.display()),
        )));
    }
    let mut train = cifar_split(&train_files, "cifar10-train")?;
    let mut test = cifar_split(&[dir.join("test_batch.bin")], "cifar10-test")?;
    if let Some(cap) = per_class_cap {
        train = train.stratified_cap(cap, seed)?;
        test = test.stratified_cap(cap, seed ^ 1)?;
    }
    Ok((train, test))
}

fn be_u32(bytes: &[u8], at: usize, format: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Format {
            format,
            offset: at as u64,
            msg: "header truncated".into(),
        })
}

/// `(count, rows, cols, pixels/255)` from an IDX3 image file.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let magic = be_u32(bytes, 0, "idx")?;
    if magic != 0x0000_0803 {
        return Err(Error::Format {
            format: "idx",
            offset: 0,
            msg: format!("image magic {magic:#010x}, expected 0x00000803"),
        });
    }
    let n = be_u32(bytes, 4, "idx")? as usize;
    let rows = be_u32(bytes, 8, "idx")? as usize;
    let cols = be_u32(bytes, 12, "idx")? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Format {
            format: "idx",
            offset: 16 + body.len().min(n * rows * cols) as u64,
            msg: format!(
                "expected {} pixel bytes, found {}",
                n * rows * cols,
                body.len()
            ),
        });
    }
    Ok((
        n,
        rows,
        cols,
        body.iter().map(|&b| b as f32 / 255.0).collect(),
    ))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "idx")?;
    if magic != 0x0000_0801 {
        return Err(Error::Format {
            format: "idx",
            offset: 0,
            msg: format!("label magic {magic:#010x}, expected 0x00000801"),
        });
    }
    let n = be_u32(bytes, 4, "idx")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format {
            format: "idx",
            offset: 8 + body.len().min(n) as u64,
            msg: format!("expected {n} label bytes, found {}", body.len()),
        });
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DatasetSplit> {
    let (n, rows, cols, pixels) = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    idx_split(n, rows, cols, pixels, labels)
}

pub fn idx_split(
    n: usize,
    rows: usize,
    cols: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
) -> Result<DatasetSplit> {
    if labels.len() != n {
        return Err(invalid(
            "load_idx",
            format!("{n} images but {} labels", labels.len()),
        ));
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    DatasetSplit::new(
        Tensor::new(vec![n, 1, rows, cols], pixels)?,
        labels,
        classes,
        "idx",
    )
}

/// Parameters of the synthetic four-shape corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_side: usize,
    pub noise_sigma: f32,
    pub seed: u64,
}

pub const SYNTH_CLASSES: usize = 4;
pub const SYNTH_CLASS_NAMES: [&str; SYNTH_CLASSES] =
    ["filled_square", "hollow_square", "cross", "diagonal_stripe"];

fn shape_mask(class: usize, size: usize, flip_diag: bool, x: usize, y: usize) -> bool {
    match class {
        0 => true,
        1 => {
            let t = (size / 5).max(1);
            x < t || y < t || x >= size - t || y >= size - t
        }
        2 => {
            let bar = (size / 3).max(2);
            let lo = (size - bar) / 2;
            (lo..lo + bar).contains(&x) || (lo..lo + bar).contains(&y)
        }
        _ => {
            let yy = if flip_diag { size - 1 - y } else { y };
            x.abs_diff(yy) <= (size / 6).max(1)
        }
    }
}

/// Draws one image of `class` into `out` (`[3, side, side]`).
pub fn draw_shape(
    class: usize,
    side: usize,
    noise_sigma: f32,
    rng: &mut impl Rng,
    out: &mut [f32],
) {
    let lo = (side * 35).div_ceil(100);
    let hi = (side * 70 / 100).max(lo);
    let size = rng.random_range(lo..=hi);
    let x0 = rng.random_range(0..=side - size);
    let y0 = rng.random_range(0..=side - size);
    let flip_diag = rng.random_bool(0.5);
    let (fg, bg) = loop {
        let fg: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let bg: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let diff: f32 = fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f32>() / 3.0;
        if diff >= 0.35 {
            break (fg, bg);
        }
    };
    let noise = Normal::new(0.0f32, noise_sigma.max(0.0)).expect("finite sigma");
    for c in 0..3 {
        for y in 0..side {
            for x in 0..side {
                let inside = x >= x0
                    && y >= y0
                    && x < x0 + size
                    && y < y0 + size
                    && shape_mask(class, size, flip_diag, x - x0, y - y0);
                let base = if inside { fg[c] } else { bg[c] };
                let n = if noise_sigma > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                out[(c * side + y) * side + x] = (base + n).clamp(0.0, 1.0);
            }
        }
    }
}

fn synth_split(
    per_class: usize,
    side: usize,
    sigma: f32,
    seed: u64,
    stream: u64,
    name: &str,
) -> Result<DatasetSplit> {
    let n = per_class * SYNTH_CLASSES;
    let per = 3 * side * side;
    let mut pixels = vec![0.0f32; n * per];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % SYNTH_CLASSES;
        let mut rng = seed::rng(seed, stream.wrapping_add(i as u64) << 1 | 1);
        draw_shape(
            class,
            side,
            sigma,
            &mut rng,
            &mut pixels[i * per..(i + 1) * per],
        );
        labels.push(class);
    }
    DatasetSplit::new(
        Tensor::new(vec![n, 3, side, side], pixels)?,
        labels,
        SYNTH_CLASSES,
        name,
    )
}

/// Four shape classes (filled square, hollow square, cross, diagonal stripe)
/// at random positions, scales and colours, plus clipped Gaussian noise.
/// Labels cycle through the classes so every prefix is near-balanced.
pub fn synth_shapes(spec: &SynthSpec) -> Result<(DatasetSplit, DatasetSplit)> {
    if spec.image_side < 8 {
        return Err(invalid("synth_shapes", "image_side must be at least 8"));
    }
    let train = synth_split(
        spec.train_per_class,
        spec.image_side,
        spec.noise_sigma,
        spec.seed,
        0,
        "synth-train",
    )?;
    let test = synth_split(
        spec.test_per_class,
        spec.image_side,
        spec.noise_sigma,
        spec.seed,
        1 << 40,
        "synth-test",
    )?;
    Ok((train, test))
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn new(mean: Vec<f32>, std: Vec<f32>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(invalid("Normalization", "mean and std lengths differ"));
        }
        if let Some(s) = std.iter().find(|s| !s.is_finite() || **s <= 0.0) {
            return Err(invalid(
                "Normalization",
                format!("std must be positive, got {s}"),
            ));
        }
        Ok(Self { mean, std })
    }

    /// Channel statistics of a split's raw pixels.
    pub fn fit(split: &DatasetSplit) -> Result<Self> {
        let [c, h, w] = split.image_shape();
        let hw = h * w;
        let v = split.images.values();
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        for ch in 0..c {
            let vals = || {
                (0..split.len())
                    .flat_map(move |s| v[(s * c + ch) * hw..][..hw].iter().map(|&x| x as f64))
            };
            let count = (split.len() * hw) as f64;
            let mu = vals().sum::<f64>() / count;
            let var = vals().map(|x| (x - mu).powi(2)).sum::<f64>() / count;
            mean.push(mu as f32);
            std.push((var.sqrt() as f32).max(1e-3));
        }
        Self::new(mean, std)
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn inv_std(&self) -> Vec<f32> {
        self.std.iter().map(|s| 1.0 / s).collect()
    }
}

pub fn normalize(split: &DatasetSplit, norm: &Normalization) -> Result<DatasetSplit> {
    let norm = Normalization::new(norm.mean.clone(), norm.std.clone())?;
    let [c, h, w] = split.image_shape();
    if norm.channels() != c {
        return Err(Error::ShapeMismatch {
            op: "normalize",
            left: vec![c],
            right: vec![norm.channels()],
        });
    }
    let hw = h * w;
    let values = split
        .images
        .values()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let ch = (i / hw) % c;
            (x - norm.mean[ch]) / norm.std[ch]
        })
        .collect();
    split.with_images(Tensor::new(split.images.shape().to_vec(), values)?)
}

/// Random crop from a zero-padded canvas plus horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub pad_crop: usize,
    pub hflip_prob: f64,
}

impl AugmentationPolicy {
    pub fn none() -> Self {
        Self {
            pad_crop: 0,
            hflip_prob: 0.0,
        }
    }

    /// 2 px for 16×16 inputs, 4 px for 32×32.
    pub fn for_side(side: usize) -> Self {
        Self {
            pad_crop: (side / 8).max(1),
            hflip_prob: 0.5,
        }
    }
}

/// Mirrors every image left-right.
pub fn hflip(images: &Tensor) -> Tensor {
    let s = images.shape();
    let w = s[3];
    let mut out = images.values().to_vec();
    for row in out.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

pub fn augment(
    batch: &DatasetSplit,
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
) -> DatasetSplit {
    let [c, h, w] = batch.image_shape();
    let per = c * h * w;
    let pad = policy.pad_crop as isize;
    let src = batch.images.values();
    let mut out = vec![0.0f32; src.len()];
    for s in 0..batch.len() {
        let dy = rng.random_range(0..=2 * pad as i64) as isize - pad;
        let dx = rng.random_range(0..=2 * pad as i64) as isize - pad;
        let flip = policy.hflip_prob > 0.0 && rng.random_bool(policy.hflip_prob.min(1.0));
        let img = &src[s * per..(s + 1) * per];
        let dst = &mut out[s * per..(s + 1) * per];
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    if sx >= 0 && sx < w as isize {
                        dst[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    DatasetSplit {
        images: Tensor::new(batch.images.shape().to_vec(), out).expect("same shape"),
        augmented: true,
        ..batch.clone()
    }
}

pub fn augment_seeded(
    batch: &DatasetSplit,
    policy: &AugmentationPolicy,
    seed: u64,
) -> DatasetSplit {
    augment(batch, policy, &mut seed::rng(seed, 0xa06))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_synth(sigma: f32, seed: u64) -> (DatasetSplit, DatasetSplit) {
        synth_shapes(&SynthSpec {
            train_per_class: 5,
            test_per_class: 3,
            image_side: 12,
            noise_sigma: sigma,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn cifar_record_count_and_labels() {
        // 30,730,000 bytes hold exactly 10,000 records
        assert_eq!(30_730_000 / CIFAR_RECORD, 10_000);
        assert_eq!(30_730_000 % CIFAR_RECORD, 0);
        let mut bytes = vec![0u8; 3 * CIFAR_RECORD];
        bytes[0] = 7;
        bytes[CIFAR_RECORD] = 2;
        bytes[1] = 255;
        let (px, labels) = parse_cifar10_records(&bytes).unwrap();
        assert_eq!(labels, vec![7, 2, 0]);
        assert_eq!(px.len(), 3 * 3072);
        assert_eq!(px[0], 1.0);
    }

    #[test]
    fn cifar_truncated_reports_offset() {
        let bytes = vec![0u8; 2 * CIFAR_RECORD + 17];
        match parse_cifar10_records(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 2 * CIFAR_RECORD as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn cifar_cap_is_stratified() {
        let n = 10 * 150;
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let split = DatasetSplit::new(Tensor::zeros(&[n, 3, 2, 2]), labels, 10, "t").unwrap();
        let capped = split.stratified_cap(100, 3).unwrap();
        assert_eq!(capped.len(), 1000);
        assert!(capped.class_histogram().iter().all(|&c| c == 100));
    }

    #[test]
    fn idx_labels_and_images() {
        let mut lab = vec![0, 0, 8, 1, 0, 0, 0, 5];
        lab.extend([1, 2, 3, 4, 5]);
        assert_eq!(parse_idx_labels(&lab).unwrap().len(), 5);

        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend([0u8; 8]);
        let (n, r, c, px) = parse_idx_images(&img).unwrap();
        assert_eq!((n, r, c), (2, 2, 2));
        assert!(px.iter().all(|&v| v == 0.0));

        let mut bad = lab.clone();
        bad[3] = 3;
        assert!(parse_idx_labels(&bad).is_err());
        assert!(idx_split(2, 2, 2, px, vec![0, 1, 2]).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let (a, at) = tiny_synth(0.0, 9);
        let (b, _) = tiny_synth(0.0, 9);
        assert_eq!(a.images.values(), b.images.values());
        assert_eq!(a.class_histogram(), vec![5; 4]);
        assert_eq!(at.class_histogram(), vec![3; 4]);
        assert!(a.images.values().iter().all(|v| (0.0..=1.0).contains(v)));
        let (c, _) = tiny_synth(0.0, 10);
        assert_ne!(a.images.values(), c.images.values());
    }

    #[test]
    fn synth_rejects_small_side() {
        let spec = SynthSpec {
            train_per_class: 1,
            test_per_class: 1,
            image_side: 7,
            noise_sigma: 0.0,
            seed: 0,
        };
        assert!(synth_shapes(&spec).is_err());
    }

    #[test]
    fn normalize_identity_and_zero_std() {
        let (a, _) = tiny_synth(0.05, 1);
        let same = normalize(&a, &Normalization::identity(3)).unwrap();
        assert_eq!(same.images.values(), a.images.values());
        let bad = Normalization {
            mean: vec![0.0; 3],
            std: vec![1.0, 0.0, 1.0],
        };
        assert!(normalize(&a, &bad).is_err());
    }

    #[test]
    fn flip_is_involution_and_noop_policy_is_identity() {
        let (a, _) = tiny_synth(0.1, 2);
        assert_eq!(hflip(&hflip(&a.images)).values(), a.images.values());
        let flip_only = AugmentationPolicy {
            pad_crop: 0,
            hflip_prob: 1.0,
        };
        let once = augment_seeded(&a, &flip_only, 4);
        assert_eq!(once.images.values(), hflip(&a.images).values());
        let twice = augment_seeded(&once, &flip_only, 5);
        assert_eq!(twice.images.values(), a.images.values());
        let id = augment_seeded(&a, &AugmentationPolicy::none(), 4);
        assert_eq!(id.images.values(), a.images.values());
        assert!(id.is_augmented());
        assert!(id.ensure_unaugmented("eval").is_err());
    }

    #[test]
    fn default_pad_scales_with_side() {
        assert_eq!(AugmentationPolicy::for_side(16).pad_crop, 2);
        assert_eq!(AugmentationPolicy::for_side(32).pad_crop, 4);
    }
}
