//! Checkpoint directories: `manifest.json` (topology, shapes, epoch, seed,
//! normalization) next to `params.bin` (little-endian f32, registry order).
//!
//! Blob order is every tensor of [`Network::params`], then the running mean
//! and variance of each batchnorm in forward order. The manifest's `shapes`
//! list names each entry, so a reader can walk the blob without the code.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormConfig, BatchNormState};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::network::{
    ArchKind, ArchSpec, BatchNorm, Conv, ConvUnit, DenseHead, LayerNode, Network, ResidualBlock,
};
use crate::optim::Sgd;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvMeta {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub prunable: bool,
    pub out_origin: Vec<usize>,
    pub in_origin: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerMeta {
    ConvBnRelu {
        conv: ConvMeta,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    Residual {
        conv1: ConvMeta,
        conv2: ConvMeta,
        projection: Option<ConvMeta>,
        stage: usize,
        origin: usize,
    },
    GlobalAvgPool,
    Dense {
        in_features: usize,
        out_features: usize,
        in_origin: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub arch_tag: String,
    pub arch: ArchSpec,
    pub epoch: usize,
    pub seed: u64,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub bn_momentum: f32,
    pub bn_epsilon: f32,
    pub bn_initialized: Vec<bool>,
    pub layers: Vec<LayerMeta>,
    pub shapes: Vec<BlobEntry>,
    /// Present when `optimizer.bin` holds SGD velocity in parameter order.
    pub optimizer: Option<OptimizerMeta>,
}

fn conv_meta(c: &Conv) -> ConvMeta {
    ConvMeta {
        in_channels: c.in_channels(),
        out_channels: c.out_channels(),
        kernel: c.kernel(),
        stride: c.stride,
        padding: c.padding,
        prunable: c.prunable,
        out_origin: c.out_origin.clone(),
        in_origin: c.in_origin.clone(),
    }
}

fn unit_from_meta(m: &ConvMeta) -> ConvUnit {
    let c = m.out_channels;
    ConvUnit {
        conv: Conv {
            weight: Tensor::zeros(&[c, m.in_channels, m.kernel, m.kernel]),
            bias: Tensor::zeros(&[c]),
            stride: m.stride,
            padding: m.padding,
            prunable: m.prunable,
            out_origin: m.out_origin.clone(),
            in_origin: m.in_origin.clone(),
        },
        bn: BatchNorm {
            gamma: Tensor::zeros(&[c]),
            beta: Tensor::zeros(&[c]),
            state: BatchNormState::uninitialized(c),
        },
    }
}

fn bn_entries(net: &Network) -> Vec<(String, usize, bool)> {
    let mut out = Vec::new();
    let mut push = |prefix: String, u: &ConvUnit| {
        out.push((prefix, u.bn.state.channels(), u.bn.state.initialized))
    };
    for (i, node) in net.nodes.iter().enumerate() {
        match node {
            LayerNode::ConvBnRelu(u) => push(format!("nodes.{i}.bn"), u),
            LayerNode::Residual(b) => {
                push(format!("nodes.{i}.conv1.bn"), &b.conv1);
                push(format!("nodes.{i}.conv2.bn"), &b.conv2);
                if let Some(p) = &b.projection {
                    push(format!("nodes.{i}.projection.bn"), p);
                }
            }
            _ => {}
        }
    }
    out
}

/// Names and shapes of every blob entry, in blob order.
pub fn blob_layout(net: &Network) -> Vec<BlobEntry> {
    let mut out: Vec<BlobEntry> = net
        .params()
        .into_iter()
        .map(|(name, t)| BlobEntry {
            name,
            shape: t.shape().to_vec(),
        })
        .collect();
    for (prefix, c, _) in bn_entries(net) {
        for stat in ["running_mean", "running_var"] {
            out.push(BlobEntry {
                name: format!("{prefix}.{stat}"),
                shape: vec![c],
            });
        }
    }
    out
}

pub fn manifest(net: &Network, optimizer: Option<&Sgd>) -> Manifest {
    let layers = net
        .nodes
        .iter()
        .map(|node| match node {
            LayerNode::ConvBnRelu(u) => LayerMeta::ConvBnRelu {
                conv: conv_meta(&u.conv),
            },
            LayerNode::MaxPool { size, stride } => LayerMeta::MaxPool {
                size: *size,
                stride: *stride,
            },
            LayerNode::Residual(b) => LayerMeta::Residual {
                conv1: conv_meta(&b.conv1.conv),
                conv2: conv_meta(&b.conv2.conv),
                projection: b.projection.as_ref().map(|p| conv_meta(&p.conv)),
                stage: b.stage,
                origin: b.origin,
            },
            LayerNode::GlobalAvgPool => LayerMeta::GlobalAvgPool,
            LayerNode::Dense(d) => LayerMeta::Dense {
                in_features: d.weight.shape()[0],
                out_features: d.weight.shape()[1],
                in_origin: d.in_origin.clone(),
            },
        })
        .collect();
    Manifest {
        format_version: FORMAT_VERSION,
        arch_tag: net.arch.kind.tag().to_string(),
        arch: net.arch.clone(),
        epoch: net.epoch,
        seed: net.seed,
        mean: net.normalization.mean.clone(),
        std: net.normalization.std.clone(),
        bn_momentum: net.bn_config.momentum,
        bn_epsilon: net.bn_config.epsilon,
        bn_initialized: bn_entries(net).into_iter().map(|(_, _, i)| i).collect(),
        layers,
        shapes: blob_layout(net),
        optimizer: optimizer.map(|o| OptimizerMeta {
            lr: o.lr,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
        }),
    }
}

pub fn encode_f32(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Parameter blob in manifest order.
pub fn params_blob(net: &Network) -> Vec<u8> {
    let mut values: Vec<f32> = Vec::with_capacity(net.param_count());
    for (_, t) in net.params() {
        values.extend_from_slice(t.values());
    }
    let mut stats = Vec::new();
    for node in &net.nodes {
        let mut push = |u: &ConvUnit| {
            stats.extend_from_slice(&u.bn.state.running_mean);
            stats.extend_from_slice(&u.bn.state.running_var);
        };
        match node {
            LayerNode::ConvBnRelu(u) => push(u),
            LayerNode::Residual(b) => {
                push(&b.conv1);
                push(&b.conv2);
                if let Some(p) = &b.projection {
                    push(p);
                }
            }
            _ => {}
        }
    }
    values.extend(stats);
    encode_f32(values)
}

/// Rebuilds a network from a manifest and its parameter blob.
pub fn decode(manifest: &Manifest, blob: &[u8], path: &Path) -> Result<Network> {
    let fail = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    if manifest.format_version != FORMAT_VERSION {
        return Err(fail(format!(
            "format_version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    match ArchKind::from_tag(&manifest.arch_tag) {
        Some(kind) if kind == manifest.arch.kind => {}
        _ => {
            return Err(fail(format!(
                "arch_tag `{}` does not match architecture {:?}",
                manifest.arch_tag, manifest.arch.kind
            )))
        }
    }
    let nodes = manifest
        .layers
        .iter()
        .map(|l| match l {
            LayerMeta::ConvBnRelu { conv } => LayerNode::ConvBnRelu(unit_from_meta(conv)),
            LayerMeta::MaxPool { size, stride } => LayerNode::MaxPool {
                size: *size,
                stride: *stride,
            },
            LayerMeta::Residual {
                conv1,
                conv2,
                projection,
                stage,
                origin,
            } => LayerNode::Residual(ResidualBlock {
                conv1: unit_from_meta(conv1),
                conv2: unit_from_meta(conv2),
                projection: projection.as_ref().map(unit_from_meta),
                stage: *stage,
                origin: *origin,
            }),
            LayerMeta::GlobalAvgPool => LayerNode::GlobalAvgPool,
            LayerMeta::Dense {
                in_features,
                out_features,
                in_origin,
            } => LayerNode::Dense(DenseHead {
                weight: Tensor::zeros(&[*in_features, *out_features]),
                bias: Tensor::zeros(&[*out_features]),
                in_origin: in_origin.clone(),
            }),
        })
        .collect();
    let mut net = Network {
        arch: manifest.arch.clone(),
        normalization: Normalization::new(manifest.mean.clone(), manifest.std.clone())
            .map_err(|e| fail(format!("normalization: {e}")))?,
        nodes,
        bn_config: BatchNormConfig {
            momentum: manifest.bn_momentum,
            epsilon: manifest.bn_epsilon,
        },
        epoch: manifest.epoch,
        seed: manifest.seed,
    };

    let layout = blob_layout(&net);
    if layout != manifest.shapes {
        let first = layout
            .iter()
            .zip(&manifest.shapes)
            .find(|(a, b)| a != b)
            .map(|(a, b)| {
                format!(
                    "{} {:?} vs listed {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )
            })
            .unwrap_or_else(|| {
                format!(
                    "{} entries vs {} listed",
                    layout.len(),
                    manifest.shapes.len()
                )
            });
        return Err(fail(format!(
            "layer topology disagrees with shapes: {first}"
        )));
    }
    let expected: usize = layout
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if blob.len() != expected * 4 {
        return Err(fail(format!(
            "{PARAMS_FILE} holds {} bytes but the manifest shapes need {} ({} values)",
            blob.len(),
            expected * 4,
            expected
        )));
    }
    let values = decode_f32(blob);
    let mut cursor = 0;
    for (_, t) in net.params_mut() {
        let n = t.len();
        t.values_mut().copy_from_slice(&values[cursor..cursor + n]);
        cursor += n;
    }
    let flags = &manifest.bn_initialized;
    let states = net.bn_states_mut();
    if flags.len() != states.len() {
        return Err(fail(format!(
            "bn_initialized lists {} entries for {} batchnorm layers",
            flags.len(),
            states.len()
        )));
    }
    for (state, &init) in states.into_iter().zip(flags) {
        let c = state.channels();
        state
            .running_mean
            .copy_from_slice(&values[cursor..cursor + c]);
        state
            .running_var
            .copy_from_slice(&values[cursor + c..cursor + 2 * c]);
        state.initialized = init;
        cursor += 2 * c;
    }
    net.validate()?;
    Ok(net)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn save_checkpoint(net: &Network, dir: &Path) -> Result<()> {
    save_checkpoint_with_optimizer(net, None, dir)
}

/// Writes the checkpoint directory; `optimizer` adds SGD velocity so that
/// training can resume exactly.
pub fn save_checkpoint_with_optimizer(
    net: &Network,
    optimizer: Option<&Sgd>,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let m = manifest(net, optimizer);
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)?)?;
    fs::write(dir.join(PARAMS_FILE), params_blob(net))?;
    if let Some(opt) = optimizer {
        let velocity = opt.velocity().iter().flatten().copied();
        fs::write(dir.join(OPTIMIZER_FILE), encode_f32(velocity))?;
    } else if dir.join(OPTIMIZER_FILE).exists() {
        fs::remove_file(dir.join(OPTIMIZER_FILE))?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    serde_json::from_slice(&read(&path)?).map_err(|e| Error::Checkpoint {
        path,
        msg: e.to_string(),
    })
}

pub fn load_checkpoint(dir: &Path) -> Result<Network> {
    Ok(load_checkpoint_with_optimizer(dir)?.0)
}

/// Loads and additionally requires the stored architecture to be `kind`.
pub fn load_checkpoint_as(dir: &Path, kind: ArchKind) -> Result<Network> {
    let net = load_checkpoint(dir)?;
    if net.kind() != kind {
        return Err(Error::Checkpoint {
            path: dir.to_path_buf(),
            msg: format!(
                "holds a {} network, expected {}",
                net.kind().tag(),
                kind.tag()
            ),
        });
    }
    Ok(net)
}

pub fn load_checkpoint_with_optimizer(dir: &Path) -> Result<(Network, Option<Sgd>)> {
    let m = read_manifest(dir)?;
    let net = decode(&m, &read(&dir.join(PARAMS_FILE))?, dir)?;
    let Some(meta) = &m.optimizer else {
        return Ok((net, None));
    };
    let path: PathBuf = dir.join(OPTIMIZER_FILE);
    let values = {
        let bytes = read(&path)?;
        let need = net.param_count() * 4;
        if bytes.len() != need {
            return Err(Error::Checkpoint {
                path,
                msg: format!("holds {} bytes, expected {need}", bytes.len()),
            });
        }
        decode_f32(&bytes)
    };
    let mut cursor = 0;
    let velocity = net
        .params()
        .iter()
        .map(|(_, t)| {
            let v = values[cursor..cursor + t.len()].to_vec();
            cursor += t.len();
            v
        })
        .collect();
    let opt = Sgd::with_velocity(meta.lr, meta.momentum, meta.weight_decay, velocity);
    Ok((net, Some(opt)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trained_like(seed: u64) -> Network {
        let mut net = Network::build(&ArchSpec::mini_resnet(4, 4, 3, 8), seed).unwrap();
        for (i, st) in net.bn_states_mut().into_iter().enumerate() {
            st.running_mean
                .iter_mut()
                .for_each(|m| *m = 0.03 * i as f32);
            st.running_var
                .iter_mut()
                .for_each(|v| *v = 1.0 + 0.2 * i as f32);
        }
        net.epoch = 7;
        net
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let net = trained_like(3);
        save_checkpoint(&net, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, net);
        let x = Tensor::from_fn(&[2, 3, 8, 8], |i| ((i * 37) % 101) as f32 / 101.0);
        let a = net.logits(&x).unwrap();
        let b = back.logits(&x).unwrap();
        assert!(a
            .values()
            .iter()
            .zip(b.values())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn manifest_is_readable_json_with_documented_keys() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&trained_like(1), dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in [
            "format_version",
            "arch_tag",
            "shapes",
            "epoch",
            "seed",
            "mean",
            "std",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["arch_tag"], "mini_resnet");
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&trained_like(1), dir.path()).unwrap();
        let p = dir.path().join(PARAMS_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 6]).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
        assert!(err.to_string().contains("bytes"));
    }

    #[test]
    fn shapes_disagreeing_with_blob_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let net = trained_like(1);
        save_checkpoint(&net, dir.path()).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        // Grow the dense head in both the topology and the shape list so the
        // two agree with each other but not with the blob.
        if let Some(LayerMeta::Dense { out_features, .. }) = m.layers.last_mut() {
            *out_features += 1;
        }
        m.arch.num_classes += 1;
        let n = m.shapes.len();
        let dense_w = m
            .shapes
            .iter()
            .position(|e| e.name.ends_with("dense.weight"))
            .unwrap();
        m.shapes[dense_w].shape[1] += 1;
        m.shapes[dense_w + 1].shape[0] += 1;
        assert_eq!(m.shapes.len(), n);
        fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_string(&m).unwrap(),
        )
        .unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(err.to_string().contains("manifest shapes need"), "{err}");
    }

    #[test]
    fn version_and_arch_mismatches_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&trained_like(1), dir.path()).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        m.format_version = 99;
        fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_string(&m).unwrap(),
        )
        .unwrap();
        assert!(load_checkpoint(dir.path())
            .unwrap_err()
            .to_string()
            .contains("format_version"));

        m.format_version = FORMAT_VERSION;
        m.arch_tag = "mini_vgg".into();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_string(&m).unwrap(),
        )
        .unwrap();
        assert!(load_checkpoint(dir.path())
            .unwrap_err()
            .to_string()
            .contains("arch_tag"));

        m.arch_tag = "mini_resnet".into();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_string(&m).unwrap(),
        )
        .unwrap();
        assert!(load_checkpoint_as(dir.path(), ArchKind::MiniVgg).is_err());
        assert!(load_checkpoint_as(dir.path(), ArchKind::MiniResnet).is_ok());
    }

    #[test]
    fn optimizer_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let net = trained_like(2);
        let velocity: Vec<Vec<f32>> = net
            .params()
            .iter()
            .enumerate()
            .map(|(i, (_, t))| vec![i as f32 * 0.5; t.len()])
            .collect();
        let opt = Sgd::with_velocity(0.05, 0.9, 5e-4, velocity);
        save_checkpoint_with_optimizer(&net, Some(&opt), dir.path()).unwrap();
        let (back, restored) = load_checkpoint_with_optimizer(dir.path()).unwrap();
        assert_eq!(back, net);
        assert_eq!(restored.unwrap(), opt);
    }
}
