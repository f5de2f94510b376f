//! Experiment driver: JSON configuration, run manifest, and the train /
//! prune / sweep / transfer / correlate / report recipes. Every file a
//! recipe writes goes through [`Run`] and is listed in `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackKind, AttackSpec, Corruption, DEFAULT_FGSM_ALPHA, DEFAULT_SEVERITY};
use crate::checkpoint::{load_checkpoint, save_checkpoint, save_checkpoint_with_optimizer};
use crate::data::{
    load_cifar10_binary, load_idx, synth_shapes, AugmentationPolicy, DatasetSplit, Normalization,
    SynthSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{
    correlate, correlation_csv, delta_report, delta_report_csv, delta_table_csv, eval_report_csv,
    evaluate_report, fmt_acc, fmt_r, transfer_csv, transfer_matrix, write_csv, CorrelationPoint,
    DeltaReport, EvalReport, TransferMatrix,
};
use crate::network::{ArchKind, ArchSpec, Network};
use crate::pruning::{
    prune_iterative, sweep_csv, sweep_single_elements, AdjustScheme, Criterion, ElementKind,
    PruneConfig, StructureMode, SweepBuckets,
};
use crate::seed;
use crate::train::{evaluate, train, TrainHyper};

pub const MANIFEST: &str = "manifest.json";
pub const BASE_CHECKPOINT: &str = "checkpoints/base";

fn cfg_err(field: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        train_per_class: usize,
        test_per_class: usize,
        image_side: usize,
        noise_sigma: f32,
    },
    /// Directory holding the CIFAR-10 binary batches.
    Cifar10 {
        path: Option<PathBuf>,
        per_class_cap: Option<usize>,
    },
    /// IDX image/label files (MNIST layout).
    Idx {
        train_images: Option<PathBuf>,
        train_labels: Option<PathBuf>,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Evaluate on the first `subset` test images only.
    pub subset: Option<usize>,
    /// Test images used per sweep evaluation (after `subset`).
    pub sweep_subset: Option<usize>,
    /// Training images used by data-driven criteria.
    pub calibration_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub kind: ArchKind,
    pub base_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f32,
    pub augment: bool,
    /// Completed-epoch counts saved as snapshots (for winning tickets).
    pub snapshot_epochs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSettings {
    /// Criterion tags: `l1`, `expected_abs`, `pls`.
    pub criteria: Vec<String>,
    pub pls_components: usize,
    pub ratio: f64,
    pub iterations: usize,
    pub structure: StructureMode,
    /// Scheme tags: `finetune`, `scratch-same`, `scratch-double`, `wticket`.
    pub schemes: Vec<String>,
    pub fine_tune_epochs: usize,
    pub rewind_epoch: usize,
    /// Element kinds for the single-element sweep: `filters`, `blocks`.
    pub sweep_elements: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSettings {
    /// Attack tags: `fgsm`, `occlusion`, or a corruption name.
    pub list: Vec<String>,
    pub fgsm_alpha: f32,
    pub severity: u8,
    /// Defaults to half the image side.
    pub occlusion_side: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub prune: PruneSettings,
    pub attacks: AttackSettings,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Threads for the element sweep; results do not depend on it.
    pub workers: usize,
}

impl ExperimentConfig {
    /// Synthetic four-class shapes, MiniResNet, PLS filter pruning at
    /// p = 0.1 with fine-tuning, all six attacks.
    pub fn desk(seed: u64, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            dataset: DatasetConfig {
                source: DatasetSource::Synthetic {
                    train_per_class: 256,
                    test_per_class: 128,
                    image_side: 16,
                    noise_sigma: 0.1,
                },
                subset: None,
                sweep_subset: Some(256),
                calibration_size: 512,
            },
            arch: ArchConfig {
                kind: ArchKind::MiniResnet,
                base_width: 8,
            },
            train: TrainConfig {
                epochs: 30,
                batch_size: 64,
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 5e-4,
                lr_milestones: vec![0.5, 0.75],
                lr_decay: 0.1,
                augment: true,
                snapshot_epochs: vec![2],
            },
            prune: PruneSettings {
                criteria: vec!["pls".into()],
                pls_components: 2,
                ratio: 0.1,
                iterations: 1,
                structure: StructureMode::Filters,
                schemes: vec!["finetune".into()],
                fine_tune_epochs: 4,
                rewind_epoch: 2,
                sweep_elements: vec!["filters".into(), "blocks".into()],
            },
            attacks: AttackSettings {
                list: [
                    "fgsm",
                    "occlusion",
                    "gaussian_noise",
                    "box_blur",
                    "contrast",
                    "brightness",
                ]
                .map(String::from)
                .to_vec(),
                fgsm_alpha: DEFAULT_FGSM_ALPHA,
                severity: DEFAULT_SEVERITY,
                occlusion_side: None,
            },
            seed,
            out_dir: out_dir.into(),
            workers: 1,
        }
    }

    /// A seconds-scale variant of [`Self::desk`] for smoke tests.
    pub fn smoke(seed: u64, out_dir: impl Into<PathBuf>) -> Self {
        let mut cfg = Self::desk(seed, out_dir);
        cfg.dataset.source = DatasetSource::Synthetic {
            train_per_class: 24,
            test_per_class: 12,
            image_side: 12,
            noise_sigma: 0.1,
        };
        cfg.dataset.sweep_subset = Some(24);
        cfg.dataset.calibration_size = 48;
        cfg.arch.base_width = 4;
        cfg.train.epochs = 3;
        cfg.train.batch_size = 16;
        cfg.train.snapshot_epochs = vec![1];
        cfg.prune.fine_tune_epochs = 1;
        cfg.prune.rewind_epoch = 1;
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| cfg_err("<config>", e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| cfg_err("--config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the canonical JSON plus the crate version.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        h.update(serde_json::to_vec(self).expect("config serializes"));
        hex(&h.finalize())
    }

    pub fn image_side(&self) -> usize {
        match &self.dataset.source {
            DatasetSource::Synthetic { image_side, .. } => *image_side,
            DatasetSource::Cifar10 { .. } => 32,
            DatasetSource::Idx { .. } => 28,
        }
    }

    pub fn criteria(&self) -> Result<Vec<Criterion>> {
        self.prune
            .criteria
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let c = Criterion::from_tag(t)
                    .map_err(|e| cfg_err(format!("prune.criteria[{i}]"), e.to_string()))?;
                Ok(match c {
                    Criterion::Pls { .. } => Criterion::Pls {
                        n_components: self.prune.pls_components,
                    },
                    other => other,
                })
            })
            .collect()
    }

    pub fn schemes(&self) -> Result<Vec<AdjustScheme>> {
        self.prune
            .schemes
            .iter()
            .enumerate()
            .map(|(i, t)| match t.as_str() {
                "finetune" => Ok(AdjustScheme::FineTune {
                    epochs: self.prune.fine_tune_epochs,
                }),
                "scratch-same" => Ok(AdjustScheme::ScratchSame),
                "scratch-double" => Ok(AdjustScheme::ScratchDouble),
                "wticket" => Ok(AdjustScheme::WinningTicket {
                    rewind_epoch: self.prune.rewind_epoch,
                }),
                other => Err(cfg_err(
                    format!("prune.schemes[{i}]"),
                    format!("unknown scheme `{other}`"),
                )),
            })
            .collect()
    }

    pub fn sweep_elements(&self) -> Result<Vec<ElementKind>> {
        self.prune
            .sweep_elements
            .iter()
            .enumerate()
            .map(|(i, t)| {
                ElementKind::from_tag(t)
                    .map_err(|e| cfg_err(format!("prune.sweep_elements[{i}]"), e.to_string()))
            })
            .collect()
    }

    pub fn attack_specs(&self) -> Result<Vec<AttackSpec>> {
        let a = &self.attacks;
        let side = self.image_side();
        let mut seen = Vec::new();
        a.list
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let field = format!("attacks.list[{i}]");
                if seen.contains(t) {
                    return Err(cfg_err(field, format!("duplicate attack `{t}`")));
                }
                seen.push(t.clone());
                let kind = match t.as_str() {
                    "fgsm" => AttackKind::Fgsm {
                        alpha: a.fgsm_alpha,
                    },
                    "occlusion" => AttackKind::Occlusion {
                        side_px: a.occlusion_side.unwrap_or(side.div_ceil(2)),
                    },
                    other => AttackKind::Corruption {
                        name: Corruption::from_tag(other)
                            .map_err(|e| cfg_err(&field, e.to_string()))?,
                        severity: a.severity,
                    },
                };
                kind.validate(side)
                    .map_err(|e| cfg_err(field, e.to_string()))?;
                Ok(AttackSpec::white_box(kind))
            })
            .collect()
    }

    pub fn hyper(&self) -> TrainHyper {
        let t = &self.train;
        TrainHyper {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lr_milestones: t.lr_milestones.clone(),
            lr_decay: t.lr_decay,
            augmentation: if t.augment {
                AugmentationPolicy::for_side(self.image_side())
            } else {
                AugmentationPolicy::none()
            },
            seed: seed::derive_seed(self.seed, 0x7a),
        }
    }

    /// Checks every field; errors carry the offending field path.
    pub fn validate(&self) -> Result<()> {
        match &self.dataset.source {
            DatasetSource::Synthetic {
                train_per_class,
                test_per_class,
                image_side,
                noise_sigma,
            } => {
                if *train_per_class == 0 || *test_per_class == 0 {
                    return Err(cfg_err(
                        "dataset.source.train_per_class",
                        "per-class counts must be positive",
                    ));
                }
                if *image_side < 8 {
                    return Err(cfg_err("dataset.source.image_side", "must be at least 8"));
                }
                if !(noise_sigma.is_finite() && *noise_sigma >= 0.0) {
                    return Err(cfg_err(
                        "dataset.source.noise_sigma",
                        "must be finite and non-negative",
                    ));
                }
            }
            DatasetSource::Cifar10 { path, .. } => {
                if path.is_none() {
                    return Err(cfg_err("dataset.source.path", "missing CIFAR-10 directory"));
                }
            }
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                for (name, p) in [
                    ("train_images", train_images),
                    ("train_labels", train_labels),
                    ("test_images", test_images),
                    ("test_labels", test_labels),
                ] {
                    if p.is_none() {
                        return Err(cfg_err(format!("dataset.source.{name}"), "missing path"));
                    }
                }
            }
        }
        if self.dataset.subset == Some(0) {
            return Err(cfg_err("dataset.subset", "must be positive"));
        }
        if self.arch.base_width == 0 {
            return Err(cfg_err("arch.base_width", "must be positive"));
        }
        self.hyper()
            .validate()
            .map_err(|e| cfg_err("train", e.to_string()))?;
        let p = &self.prune;
        if !(p.ratio > 0.0 && p.ratio < 1.0) {
            return Err(cfg_err(
                "prune.ratio",
                format!("{} outside (0, 1)", p.ratio),
            ));
        }
        if p.iterations == 0 {
            return Err(cfg_err("prune.iterations", "must be at least 1"));
        }
        if p.pls_components == 0 {
            return Err(cfg_err("prune.pls_components", "must be at least 1"));
        }
        if self.arch.kind == ArchKind::MiniVgg && p.structure != StructureMode::Filters {
            return Err(cfg_err(
                "prune.structure",
                "layer pruning requires residual architecture",
            ));
        }
        let schemes = self.schemes()?;
        if schemes
            .iter()
            .any(|s| matches!(s, AdjustScheme::WinningTicket { .. }))
            && !self.train.snapshot_epochs.contains(&p.rewind_epoch)
        {
            return Err(cfg_err(
                "prune.rewind_epoch",
                format!("epoch {} is not in train.snapshot_epochs", p.rewind_epoch),
            ));
        }
        self.criteria()?;
        self.sweep_elements()?;
        if self.attacks.list.is_empty() {
            return Err(cfg_err("attacks.list", "at least one attack is required"));
        }
        self.attack_specs()?;
        Ok(())
    }

    fn eval_seed(&self) -> u64 {
        seed::derive_seed(self.seed, 0xe7a1)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Train and (subset-capped) test splits for `cfg`.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(DatasetSplit, DatasetSplit)> {
    let (train_set, test_set) = match &cfg.dataset.source {
        DatasetSource::Synthetic {
            train_per_class,
            test_per_class,
            image_side,
            noise_sigma,
        } => synth_shapes(&SynthSpec {
            train_per_class: *train_per_class,
            test_per_class: *test_per_class,
            image_side: *image_side,
            noise_sigma: *noise_sigma,
            seed: seed::derive_seed(cfg.seed, 0xda7a),
        })?,
        DatasetSource::Cifar10 {
            path,
            per_class_cap,
        } => {
            let path = path
                .as_ref()
                .ok_or_else(|| cfg_err("dataset.source.path", "missing CIFAR-10 directory"))?;
            load_cifar10_binary(path, *per_class_cap, cfg.seed)?
        }
        DatasetSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let need = |p: &Option<PathBuf>, f: &str| {
                p.clone()
                    .ok_or_else(|| cfg_err(format!("dataset.source.{f}"), "missing path"))
            };
            let train_set = load_idx(
                &need(train_images, "train_images")?,
                &need(train_labels, "train_labels")?,
            )?;
            let test_set = load_idx(
                &need(test_images, "test_images")?,
                &need(test_labels, "test_labels")?,
            )?;
            (train_set, test_set)
        }
    };
    let test_set = match cfg.dataset.subset {
        Some(n) => test_set.head(n),
        None => test_set,
    };
    Ok((train_set, test_set))
}

pub fn arch_spec(cfg: &ExperimentConfig, train_set: &DatasetSplit) -> ArchSpec {
    let [c, side, _] = train_set.image_shape();
    let w = cfg.arch.base_width;
    let classes = train_set.class_count;
    match cfg.arch.kind {
        ArchKind::MiniVgg => ArchSpec::mini_vgg(w, classes, c, side),
        ArchKind::MiniResnet => ArchSpec::mini_resnet(w, classes, c, side),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub wall_clock_ms: u128,
    /// Paths relative to the output directory, in write order.
    pub files: Vec<String>,
    pub checkpoints: Vec<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn load(out_dir: &Path) -> Result<Self> {
        let path = out_dir.join(MANIFEST);
        if !path.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn files(&self) -> Vec<&str> {
        self.stages
            .iter()
            .flat_map(|s| s.files.iter().map(String::as_str))
            .collect()
    }
}

/// One command's output session: records every write, then appends a
/// stage to the manifest.
pub struct Run {
    out: PathBuf,
    started: Instant,
    record: StageRecord,
}

impl Run {
    pub fn begin(cfg: &ExperimentConfig, command: &str) -> Result<Self> {
        fs::create_dir_all(&cfg.out_dir)?;
        Ok(Self {
            out: cfg.out_dir.clone(),
            started: Instant::now(),
            record: StageRecord {
                command: command.into(),
                config_hash: cfg.hash(),
                seed: cfg.seed,
                wall_clock_ms: 0,
                files: Vec::new(),
                checkpoints: Vec::new(),
                notes: Vec::new(),
            },
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.record.files.push(rel.to_string());
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        self.write(rel, serde_json::to_string_pretty(value)?)
    }

    pub fn checkpoint(
        &mut self,
        rel: &str,
        net: &Network,
        opt: Option<&crate::optim::Sgd>,
    ) -> Result<PathBuf> {
        let dir = self.path(rel);
        match opt {
            Some(o) => save_checkpoint_with_optimizer(net, Some(o), &dir)?,
            None => save_checkpoint(net, &dir)?,
        }
        let mut entries: Vec<String> = fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        self.record
            .files
            .extend(entries.into_iter().map(|f| format!("{rel}/{f}")));
        self.record.checkpoints.push(rel.to_string());
        Ok(dir)
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.record.notes.push(note.into());
    }

    /// Appends this stage to `manifest.json`.
    pub fn finish(mut self) -> Result<StageRecord> {
        self.record.wall_clock_ms = self.started.elapsed().as_millis();
        let mut manifest = RunManifest::load(&self.out)?;
        manifest.stages.push(self.record.clone());
        fs::write(
            self.out.join(MANIFEST),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(self.record)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub train_accuracy: f64,
    pub report: EvalReport,
    pub stage: StageRecord,
}

/// Trains the base network, saves it (plus snapshots), and evaluates it
/// under every configured attack.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let (train_set, test_set) = load_data(cfg)?;
    let attacks = cfg.attack_specs()?;
    let mut run = Run::begin(cfg, "train")?;
    run.write("config.json", cfg.to_json())?;
    let mut net = Network::build(
        &arch_spec(cfg, &train_set),
        seed::derive_seed(cfg.seed, 0x1417),
    )?;
    net.normalization = Normalization::fit(&train_set)?;
    let hyper = cfg.hyper();
    let outcome = train(&mut net, &train_set, &hyper, &cfg.train.snapshot_epochs)?;
    for snap in &outcome.snapshots {
        run.checkpoint(
            &format!("checkpoints/base_epoch_{}", snap.epoch),
            &snap.network,
            Some(&snap.optimizer),
        )?;
    }
    run.checkpoint(BASE_CHECKPOINT, &net, None)?;

    let history: Vec<Vec<String>> = outcome
        .history
        .iter()
        .map(|s| {
            vec![
                s.epoch.to_string(),
                format!("{}", s.lr),
                format!("{:.6}", s.loss),
                fmt_acc(s.accuracy),
            ]
        })
        .collect();
    run.write(
        "tables/train_history.csv",
        write_csv(
            &["epoch", "lr", "loss", "train_accuracy"].map(String::from),
            &history,
        )?,
    )?;
    let train_accuracy = evaluate(&net, &train_set)?;
    let report = evaluate_report(&net, "base", &test_set, &attacks, cfg.eval_seed())?;
    run.write_json("reports/base_eval.json", &report)?;
    run.write("tables/base_eval.csv", eval_report_csv(&report)?)?;
    run.note(format!(
        "train accuracy {}, test accuracy {}",
        fmt_acc(train_accuracy),
        fmt_acc(report.acc_clean)
    ));
    Ok(TrainSummary {
        train_accuracy,
        report,
        stage: run.finish()?,
    })
}

fn load_base(cfg: &ExperimentConfig, base: Option<&Path>) -> Result<Network> {
    let path = base
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join(BASE_CHECKPOINT));
    if !path.exists() {
        return Err(cfg_err(
            "base checkpoint",
            format!("{} does not exist", path.display()),
        ));
    }
    load_checkpoint(&path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneCell {
    /// `criterion/structure/scheme`
    pub label: String,
    pub points: Vec<CorrelationPoint>,
    pub deltas: Vec<DeltaReport>,
    pub networks: Vec<Network>,
    pub stopped_early: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneSummary {
    pub base: EvalReport,
    pub cells: Vec<PruneCell>,
    pub stage: StageRecord,
}

fn cell_dir(label: &str) -> String {
    label.replace('/', "_")
}

/// Runs iterative pruning for every configured (criterion x scheme) cell
/// and writes checkpoints, per-iteration reports, and delta tables.
pub fn cmd_prune(cfg: &ExperimentConfig, base: Option<&Path>) -> Result<PruneSummary> {
    cfg.validate()?;
    let base_net = load_base(cfg, base)?;
    let (train_set, test_set) = load_data(cfg)?;
    let attacks = cfg.attack_specs()?;
    let hyper = cfg.hyper();
    let per_class = cfg
        .dataset
        .calibration_size
        .div_ceil(train_set.class_count.max(1));
    let calibration = train_set.stratified_cap(per_class, seed::derive_seed(cfg.seed, 0xca1))?;
    let schemes = cfg.schemes()?;
    let mut snapshots = Vec::new();
    for s in &schemes {
        if let AdjustScheme::WinningTicket { rewind_epoch } = s {
            let dir = cfg
                .out_dir
                .join(format!("checkpoints/base_epoch_{rewind_epoch}"));
            if !dir.exists() {
                return Err(cfg_err(
                    "prune.rewind_epoch",
                    format!("snapshot {} is missing", dir.display()),
                ));
            }
            snapshots.push((*rewind_epoch, load_checkpoint(&dir)?));
        }
    }

    let mut run = Run::begin(cfg, "prune")?;
    let base_report = evaluate_report(&base_net, "base", &test_set, &attacks, cfg.eval_seed())?;
    let mut table_rows = Vec::new();
    let mut cells = Vec::new();
    for criterion in cfg.criteria()? {
        for scheme in &schemes {
            let label = format!(
                "{}/{}/{}",
                criterion.tag(),
                cfg.prune.structure.tag(),
                scheme.tag()
            );
            let dir = cell_dir(&label);
            let pc = PruneConfig {
                criterion,
                ratio: cfg.prune.ratio,
                iterations: cfg.prune.iterations,
                mode: cfg.prune.structure,
                scheme: *scheme,
                seed: seed::derive_seed(cfg.seed, 0x9e0),
            };
            let outcome =
                prune_iterative(&base_net, &pc, &train_set, &calibration, &hyper, &snapshots)?;
            if let Some(why) = &outcome.stopped_early {
                run.note(format!("{label}: stopped early, {why}"));
            }
            let mut points = Vec::new();
            let mut deltas = Vec::new();
            let mut networks = Vec::new();
            for it in &outcome.iterations {
                let k = it.iteration;
                run.checkpoint(&format!("checkpoints/{dir}/iter_{k}"), &it.network, None)?;
                run.write_json(
                    &format!("reports/{dir}/iter_{k}_importance.json"),
                    &it.tables,
                )?;
                run.write_json(&format!("reports/{dir}/iter_{k}_plan.json"), &it.plans)?;
                let report = evaluate_report(
                    &it.network,
                    &format!("{label}/k{k}"),
                    &test_set,
                    &attacks,
                    cfg.eval_seed(),
                )?;
                run.write_json(&format!("reports/{dir}/iter_{k}_eval.json"), &report)?;
                let delta = delta_report(&base_report, &report)?;
                run.write(
                    &format!("tables/{dir}_k{k}_delta.csv"),
                    delta_report_csv(&delta)?,
                )?;
                table_rows.push((format!("{label}/k{k}"), delta.clone()));
                points.push(CorrelationPoint {
                    iteration: k,
                    report,
                });
                deltas.push(delta);
                networks.push(it.network.clone());
            }
            run.write_json(&format!("reports/{dir}/iterations.json"), &points)?;
            cells.push(PruneCell {
                label,
                points,
                deltas,
                networks,
                stopped_early: outcome.stopped_early,
            });
        }
    }
    run.write_json("reports/prune_base_eval.json", &base_report)?;
    if !table_rows.is_empty() {
        run.write("tables/delta_table.csv", delta_table_csv(&table_rows)?)?;
    }
    Ok(PruneSummary {
        base: base_report,
        cells,
        stage: run.finish()?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub sweeps: Vec<SweepBuckets>,
    pub stage: StageRecord,
}

/// Single-element removal sweep over the configured element kinds.
pub fn cmd_sweep(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<SweepSummary> {
    cfg.validate()?;
    let net = load_base(cfg, checkpoint)?;
    let (_, test_set) = load_data(cfg)?;
    let data = match cfg.dataset.sweep_subset {
        Some(n) => test_set.head(n),
        None => test_set,
    };
    let attacks = cfg.attack_specs()?;
    let mut run = Run::begin(cfg, "sweep")?;
    let mut sweeps = Vec::new();
    for elements in cfg.sweep_elements()? {
        if elements == ElementKind::Blocks && net.blocks().is_empty() {
            run.note("blocks skipped: network has no residual blocks");
            continue;
        }
        let s = sweep_single_elements(
            &net,
            elements,
            &data,
            &attacks,
            cfg.eval_seed(),
            cfg.workers,
        )?;
        run.write_json(&format!("reports/sweep_{}.json", elements.tag()), &s)?;
        sweeps.push(s);
    }
    run.write("tables/sweep.csv", sweep_csv(&sweeps)?)?;
    Ok(SweepSummary {
        sweeps,
        stage: run.finish()?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferSummary {
    pub matrix: TransferMatrix,
    /// Per source: whether every off-diagonal cell is at least the
    /// white-box diagonal.
    pub off_diagonal_at_least_diagonal: Vec<(String, bool)>,
    pub stage: StageRecord,
}

/// Path components after the last `checkpoints` directory, so tags do not
/// depend on where the run lives.
fn checkpoint_tag(path: &Path) -> String {
    let parts: Vec<String> = path
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    match parts.iter().rposition(|p| p == "checkpoints") {
        Some(i) if i + 1 < parts.len() => parts[i + 1..].join("/"),
        _ => parts.last().cloned().unwrap_or_default(),
    }
}

/// FGSM transfer matrix across two or more checkpoints.
pub fn cmd_transfer(cfg: &ExperimentConfig, checkpoints: &[PathBuf]) -> Result<TransferSummary> {
    cfg.validate()?;
    if checkpoints.len() < 2 {
        return Err(cfg_err(
            "checkpoints",
            "transfer needs at least two checkpoints",
        ));
    }
    let nets = checkpoints
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<_>>>()?;
    let tags: Vec<String> = checkpoints.iter().map(|p| checkpoint_tag(p)).collect();
    let (_, test_set) = load_data(cfg)?;
    let mut run = Run::begin(cfg, "transfer")?;
    let models: Vec<(String, &Network)> = tags.iter().cloned().zip(nets.iter()).collect();
    let matrix = transfer_matrix(&models, &test_set, cfg.attacks.fgsm_alpha)?;
    for src in &tags {
        let targets: Vec<&str> = tags.iter().skip(1).map(String::as_str).collect();
        run.note(format!(
            "source {src}: batch crafted at cell ({src}, {}), reused for targets {}",
            tags[0],
            targets.join(", ")
        ));
    }
    run.write("tables/transfer.csv", transfer_csv(&matrix)?)?;
    run.write_json("reports/transfer.json", &matrix)?;
    let off_diagonal_at_least_diagonal = matrix
        .tags
        .iter()
        .enumerate()
        .map(|(s, tag)| {
            let diag = matrix.cells[s][s];
            let ok = (0..matrix.tags.len())
                .filter(|&t| t != s)
                .all(|t| matrix.cells[s][t] >= diag);
            (tag.clone(), ok)
        })
        .collect();
    Ok(TransferSummary {
        matrix,
        off_diagonal_at_least_diagonal,
        stage: run.finish()?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelateSummary {
    pub r: Vec<(String, Option<f64>)>,
    pub stage: StageRecord,
}

/// Pearson r between clean and adversarial accuracy over the iteration
/// points stored in `iterations.json` files (or single eval reports).
pub fn cmd_correlate(cfg: &ExperimentConfig, inputs: &[PathBuf]) -> Result<CorrelateSummary> {
    let mut points: Vec<CorrelationPoint> = Vec::new();
    for (i, p) in inputs.iter().enumerate() {
        let bytes = fs::read(p)
            .map_err(|e| cfg_err(format!("reports[{i}]"), format!("{}: {e}", p.display())))?;
        if let Ok(many) = serde_json::from_slice::<Vec<CorrelationPoint>>(&bytes) {
            points.extend(many);
        } else {
            let report: EvalReport = serde_json::from_slice(&bytes)?;
            points.push(CorrelationPoint {
                iteration: points.len() + 1,
                report,
            });
        }
    }
    let rs = correlate(&points)?;
    let mut run = Run::begin(cfg, "correlate")?;
    run.write("tables/correlation.csv", correlation_csv(&points)?)?;
    for (a, r) in &rs {
        run.note(format!("r(clean, {a}) = {}", fmt_r(r)));
    }
    Ok(CorrelateSummary {
        r: rs.into_iter().map(|(a, r)| (a, r.ok())).collect(),
        stage: run.finish()?,
    })
}

/// Concatenates every CSV the manifest lists into `report.txt`, with
/// stage timings.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String> {
    let manifest = RunManifest::load(&cfg.out_dir)?;
    if manifest.stages.is_empty() {
        return Err(cfg_err(
            "out_dir",
            format!("no manifest under {}", cfg.out_dir.display()),
        ));
    }
    let mut text = String::new();
    for s in &manifest.stages {
        text.push_str(&format!(
            "stage {} ({} ms, {} files)\n",
            s.command,
            s.wall_clock_ms,
            s.files.len()
        ));
        for n in &s.notes {
            text.push_str(&format!("  {n}\n"));
        }
    }
    let mut csvs: Vec<&str> = manifest
        .files()
        .into_iter()
        .filter(|f| f.ends_with(".csv"))
        .collect();
    csvs.sort_unstable();
    csvs.dedup();
    for f in csvs {
        let body = fs::read_to_string(cfg.out_dir.join(f))?;
        text.push_str(&format!("\n== {f}\n{body}"));
    }
    let mut run = Run::begin(cfg, "report")?;
    run.write("report.txt", &text)?;
    run.finish()?;
    Ok(text)
}
