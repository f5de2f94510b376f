//! Importance criteria, structured surgery, iterative pruning with
//! parameter adjustment, and the single-element removal sweep.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::autodiff::Tape;
use crate::data::DatasetSplit;
use crate::error::{invalid, Error, Result};
use crate::metrics::{evaluate_under_attack, write_csv};
use crate::network::{ConvLoc, ConvSlot, ConvUnit, LayerNode, Network, StructureKind};
use crate::seed;
use crate::tensor::Tensor;
use crate::train::{evaluate, train, EpochStats, TrainHyper};

pub const PLS_TOLERANCE: f64 = 1e-6;
pub const PLS_MAX_ITERS: usize = 500;
pub const PLS_DEFAULT_COMPONENTS: usize = 2;
pub const CALIBRATION_SIZE: usize = 512;
/// Fine-tuning runs at this fraction of the base learning rate.
pub const FINE_TUNE_LR_SCALE: f32 = 0.1;
pub const SWEEP_BUCKETS: usize = 6;

const FEATURE_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Criterion {
    L1,
    ExpectedAbs,
    Pls { n_components: usize },
}

impl Criterion {
    pub fn tag(&self) -> &'static str {
        match self {
            Criterion::L1 => "l1",
            Criterion::ExpectedAbs => "expected_abs",
            Criterion::Pls { .. } => "pls",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "l1" => Ok(Criterion::L1),
            "expected_abs" => Ok(Criterion::ExpectedAbs),
            "pls" => Ok(Criterion::Pls {
                n_components: PLS_DEFAULT_COMPONENTS,
            }),
            other => Err(invalid("criterion", format!("unknown criterion `{other}`"))),
        }
    }

    pub fn is_data_driven(&self) -> bool {
        !matches!(self, Criterion::L1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Filters,
    Blocks,
}

impl ElementKind {
    pub fn tag(self) -> &'static str {
        match self {
            ElementKind::Filters => "filters",
            ElementKind::Blocks => "blocks",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "filters" => Ok(ElementKind::Filters),
            "blocks" | "layers" => Ok(ElementKind::Blocks),
            other => Err(invalid(
                "elements",
                format!("unknown element kind `{other}`"),
            )),
        }
    }

    fn matches(self, s: &StructureKind) -> bool {
        matches!(
            (self, s),
            (ElementKind::Filters, StructureKind::Filter { .. })
                | (ElementKind::Blocks, StructureKind::Block { .. })
        )
    }
}

/// Which structures an iteration removes. `Both` removes blocks at `p/2`,
/// then filters at `p/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureMode {
    Filters,
    Layers,
    Both,
}

impl StructureMode {
    pub fn tag(self) -> &'static str {
        match self {
            StructureMode::Filters => "filters",
            StructureMode::Layers => "layers",
            StructureMode::Both => "both",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "filters" => Ok(StructureMode::Filters),
            "layers" => Ok(StructureMode::Layers),
            "both" => Ok(StructureMode::Both),
            other => Err(invalid(
                "structure",
                format!("unknown structure mode `{other}`"),
            )),
        }
    }

    /// `(element kind, ratio)` steps of one iteration.
    pub fn steps(self, p: f64) -> Vec<(ElementKind, f64)> {
        match self {
            StructureMode::Filters => vec![(ElementKind::Filters, p)],
            StructureMode::Layers => vec![(ElementKind::Blocks, p)],
            StructureMode::Both => vec![
                (ElementKind::Blocks, p / 2.0),
                (ElementKind::Filters, p / 2.0),
            ],
        }
    }

    pub fn check_network(self, net: &Network) -> Result<()> {
        if self != StructureMode::Filters && net.blocks().is_empty() {
            return Err(Error::Pruning(
                "layer pruning requires residual architecture".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub structure: StructureKind,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub criterion: String,
    pub iteration: usize,
    pub elements: ElementKind,
    /// [`Network::topology_signature`] of the scored network.
    pub topology: String,
    /// One entry per prunable structure of `elements`, in registry order.
    pub scores: Vec<Score>,
}

impl ImportanceTable {
    fn new(
        criterion: &str,
        net: &Network,
        elements: ElementKind,
        values: Vec<f64>,
    ) -> Result<Self> {
        let structures = prunable(net, elements);
        debug_assert_eq!(structures.len(), values.len());
        if let Some((s, v)) = structures.iter().zip(&values).find(|(_, v)| !v.is_finite()) {
            return Err(invalid(
                "importance",
                format!("{criterion} scored {s} as {v}"),
            ));
        }
        Ok(Self {
            criterion: criterion.to_string(),
            iteration: 0,
            elements,
            topology: net.topology_signature(),
            scores: structures
                .into_iter()
                .zip(values)
                .map(|(structure, score)| Score { structure, score })
                .collect(),
        })
    }

    pub fn score(&self, s: &StructureKind) -> Option<f64> {
        self.scores
            .iter()
            .find(|e| &e.structure == s)
            .map(|e| e.score)
    }
}

/// Prunable structures of one kind, in registry order.
pub fn prunable(net: &Network, elements: ElementKind) -> Vec<StructureKind> {
    net.structures()
        .into_iter()
        .filter(|s| s.prunable && elements.matches(&s.kind))
        .map(|s| s.kind)
        .collect()
}

fn block_units(b: &crate::network::ResidualBlock) -> Vec<&ConvUnit> {
    let mut out = vec![&b.conv1, &b.conv2];
    out.extend(b.projection.as_ref());
    out
}

/// Filter: `sum |w|` over its kernel. Block: mean `|w|` over its convs.
pub fn criterion_l1(net: &Network, elements: ElementKind) -> Result<ImportanceTable> {
    let locs = net.conv_locs();
    let blocks = net.blocks();
    let values = prunable(net, elements)
        .iter()
        .map(|s| match *s {
            StructureKind::Filter { layer, filter } => net
                .unit(locs[layer])
                .conv
                .filter(filter)
                .iter()
                .map(|&w| (w as f64).abs())
                .sum(),
            StructureKind::Block { block } => {
                let (mut sum, mut count) = (0.0f64, 0usize);
                for u in block_units(blocks[block]) {
                    sum += u
                        .conv
                        .weight
                        .values()
                        .iter()
                        .map(|&w| (w as f64).abs())
                        .sum::<f64>();
                    count += u.conv.weight.len();
                }
                sum / count as f64
            }
        })
        .collect();
    ImportanceTable::new(Criterion::L1.tag(), net, elements, values)
}

/// Global-average-pooled output of each prunable structure, one row per
/// sample: the post-relu channel map for filters, the whole post-relu block
/// output for blocks. `abs` pools `|a|` instead of `a`.
pub fn pooled_features(
    net: &Network,
    sample: &Tensor,
    elements: ElementKind,
    abs: bool,
) -> Result<Vec<Vec<f64>>> {
    let n = sample.shape().first().copied().unwrap_or(0);
    let structures = prunable(net, elements);
    let mut rows = Vec::with_capacity(n);
    for start in (0..n).step_by(FEATURE_BATCH) {
        let idx: Vec<usize> = (start..(start + FEATURE_BATCH).min(n)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(sample.select(0, &idx)?);
        let pass = net.forward_eval(&mut tape, x)?;
        let maps: BTreeMap<usize, &Tensor> = pass
            .filter_maps
            .iter()
            .map(|&(l, v)| (l, tape.value(v)))
            .collect();
        let pool = |t: &Tensor, i: usize, channels: std::ops::Range<usize>| -> f64 {
            let s = t.shape();
            let (c, hw) = (s[1], s[2] * s[3]);
            let mut acc = 0.0f64;
            for ch in channels.clone() {
                let off = (i * c + ch) * hw;
                for &v in &t.values()[off..off + hw] {
                    acc += if abs { (v as f64).abs() } else { v as f64 };
                }
            }
            acc / (channels.len() * hw) as f64
        };
        for i in 0..idx.len() {
            let row = structures
                .iter()
                .map(|s| match *s {
                    StructureKind::Filter { layer, filter } => {
                        pool(maps[&layer], i, filter..filter + 1)
                    }
                    StructureKind::Block { block } => {
                        let t = tape.value(pass.block_outputs[block]);
                        pool(t, i, 0..t.shape()[1])
                    }
                })
                .collect();
            rows.push(row);
        }
    }
    Ok(rows)
}

fn require_sample(op: &'static str, sample: &DatasetSplit) -> Result<()> {
    if sample.is_empty() {
        return Err(invalid(op, "calibration sample is empty"));
    }
    sample.ensure_unaugmented(op)
}

/// Mean `|activation|` over samples and positions of each structure's
/// post-relu output.
pub fn criterion_expected_abs(
    net: &Network,
    sample: &DatasetSplit,
    elements: ElementKind,
) -> Result<ImportanceTable> {
    require_sample("criterion_expected_abs", sample)?;
    let rows = pooled_features(net, &sample.images, elements, true)?;
    let m = rows.first().map_or(0, Vec::len);
    let values = (0..m)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
        .collect();
    ImportanceTable::new(Criterion::ExpectedAbs.tag(), net, elements, values)
}

/// VIP scores of a PLS regression of one-hot labels on pooled features.
pub fn criterion_pls(
    net: &Network,
    sample: &DatasetSplit,
    n_components: usize,
    elements: ElementKind,
) -> Result<ImportanceTable> {
    require_sample("criterion_pls", sample)?;
    if n_components == 0 || sample.len() < n_components + 1 {
        return Err(invalid(
            "criterion_pls",
            format!(
                "{} samples cannot support {n_components} components",
                sample.len()
            ),
        ));
    }
    let x = pooled_features(net, &sample.images, elements, false)?;
    let y: Vec<Vec<f64>> = sample
        .labels
        .iter()
        .map(|&l| {
            (0..sample.class_count)
                .map(|c| f64::from(u8::from(c == l)))
                .collect()
        })
        .collect();
    let fit = pls_vip(&x, &y, n_components)?;
    ImportanceTable::new(
        Criterion::Pls { n_components }.tag(),
        net,
        elements,
        fit.vip,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlsFit {
    pub vip: Vec<f64>,
    /// Unit-norm X weights, one vector per extracted component.
    pub weights: Vec<Vec<f64>>,
    /// Y variance explained by each component.
    pub ssy: Vec<f64>,
    /// Columns with (numerically) zero variance; they score 0.
    pub constant_columns: Vec<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `M^T v` for row-major `M`.
fn mat_t_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.first().map_or(0, Vec::len)];
    for (row, &s) in m.iter().zip(v) {
        for (o, &r) in out.iter_mut().zip(row) {
            *o += r * s;
        }
    }
    out
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn center(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len() as f64;
    let cols = m.first().map_or(0, Vec::len);
    let means: Vec<f64> = (0..cols)
        .map(|j| m.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    m.iter()
        .map(|r| r.iter().zip(&means).map(|(v, mu)| v - mu).collect())
        .collect()
}

/// NIPALS PLS2 on column-centered `x` (n x m) and `y` (n x q), then
/// `VIP_j = sqrt(m' * sum_k SSY_k (w_jk/|w_k|)^2 / sum_k SSY_k)` where `m'`
/// counts the non-constant columns.
pub fn pls_vip(x: &[Vec<f64>], y: &[Vec<f64>], n_components: usize) -> Result<PlsFit> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return Err(invalid(
            "pls",
            format!("{n} feature rows vs {} label rows", y.len()),
        ));
    }
    let m = x[0].len();
    let mut xc = center(x);
    let yc = center(y);
    let mut constant_columns = Vec::new();
    for j in 0..m {
        let ss: f64 = xc.iter().map(|r| r[j] * r[j]).sum();
        let raw: f64 = x.iter().map(|r| r[j] * r[j]).sum();
        if ss <= 1e-24 * raw.max(1.0) {
            constant_columns.push(j);
            xc.iter_mut().for_each(|r| r[j] = 0.0);
        }
    }
    let q = yc[0].len();
    let y_ss: Vec<f64> = (0..q)
        .map(|c| yc.iter().map(|r| r[c] * r[c]).sum())
        .collect();
    let start_col = (0..q)
        .max_by(|&a, &b| y_ss[a].total_cmp(&y_ss[b]).then(b.cmp(&a)))
        .filter(|&c| y_ss[c] > 0.0)
        .ok_or_else(|| invalid("pls", "labels have zero variance"))?;

    let mut weights = Vec::new();
    let mut ssy = Vec::new();
    'components: for k in 0..n_components {
        let mut u: Vec<f64> = yc.iter().map(|r| r[start_col]).collect();
        let mut t_old: Option<Vec<f64>> = None;
        let mut converged = None;
        for _ in 0..PLS_MAX_ITERS {
            let mut w = mat_t_vec(&xc, &u);
            let nw = norm(&w);
            if nw == 0.0 {
                break 'components;
            }
            w.iter_mut().for_each(|v| *v /= nw);
            let t = mat_vec(&xc, &w);
            let mut qv = mat_t_vec(&yc, &t);
            let nq = norm(&qv);
            if nq == 0.0 {
                break 'components;
            }
            qv.iter_mut().for_each(|v| *v /= nq);
            u = mat_vec(&yc, &qv);
            let done = t_old.as_ref().is_some_and(|old| {
                let diff: f64 = t.iter().zip(old).map(|(a, b)| (a - b) * (a - b)).sum();
                diff.sqrt() <= PLS_TOLERANCE * norm(&t)
            });
            if done {
                converged = Some((w, t));
                break;
            }
            t_old = Some(t);
        }
        let (w, t) = converged.ok_or(Error::PlsNoConvergence {
            component: k,
            iterations: PLS_MAX_ITERS,
        })?;
        let tt = dot(&t, &t);
        let p: Vec<f64> = mat_t_vec(&xc, &t).iter().map(|v| v / tt).collect();
        for (row, &ti) in xc.iter_mut().zip(&t) {
            for (v, &pj) in row.iter_mut().zip(&p) {
                *v -= ti * pj;
            }
        }
        let c = mat_t_vec(&yc, &t);
        ssy.push(dot(&c, &c) / tt);
        weights.push(w);
    }

    let total: f64 = ssy.iter().sum();
    let m_eff = (m - constant_columns.len()) as f64;
    let vip = (0..m)
        .map(|j| {
            if total == 0.0 || constant_columns.contains(&j) {
                return 0.0;
            }
            let acc: f64 = weights
                .iter()
                .zip(&ssy)
                .map(|(w, s)| s * w[j] * w[j] / dot(w, w))
                .sum();
            (m_eff * acc / total).sqrt()
        })
        .collect();
    Ok(PlsFit {
        vip,
        weights,
        ssy,
        constant_columns,
    })
}

/// Scores `net` with `criterion`. Data-driven criteria use `calibration`.
pub fn score(
    criterion: Criterion,
    net: &Network,
    calibration: &DatasetSplit,
    elements: ElementKind,
) -> Result<ImportanceTable> {
    match criterion {
        Criterion::L1 => criterion_l1(net, elements),
        Criterion::ExpectedAbs => criterion_expected_abs(net, calibration, elements),
        Criterion::Pls { n_components } => criterion_pls(net, calibration, n_components, elements),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub criterion: String,
    pub elements: ElementKind,
    pub ratio: f64,
    pub iteration: usize,
    pub topology: String,
    /// Sorted in registry order.
    pub removals: Vec<StructureKind>,
}

/// `ceil(p * n)`, ignoring binary noise in `p * n` below 1e-9.
pub fn removal_count(p: f64, n: usize) -> usize {
    ((p * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Group a structure belongs to for the never-empty rule, and that group's
/// full size (including non-prunable members).
fn group_of(net: &Network, s: &StructureKind) -> (String, usize) {
    match *s {
        StructureKind::Filter { layer, .. } => {
            let conv = &net.unit(net.conv_locs()[layer]).conv;
            (format!("conv layer {layer}"), conv.out_channels())
        }
        StructureKind::Block { block } => {
            let blocks = net.blocks();
            let stage = blocks[block].stage;
            (
                format!("stage {stage}"),
                blocks.iter().filter(|b| b.stage == stage).count(),
            )
        }
    }
}

/// The `ceil(p * n)` lowest-scoring structures, ties broken by registry
/// order. Candidates whose removal would empty a layer (or a stage of
/// blocks) are skipped.
pub fn select_removals(table: &ImportanceTable, p: f64, net: &Network) -> Result<PrunePlan> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid(
            "select_removals",
            format!("ratio {p} outside (0, 1)"),
        ));
    }
    if table.topology != net.topology_signature() {
        return Err(Error::Pruning(
            "importance table was computed on a different network".into(),
        ));
    }
    if table.scores.is_empty() {
        return Err(Error::Pruning(format!(
            "no prunable {} left",
            table.elements.tag()
        )));
    }
    let count = removal_count(p, table.scores.len());
    let mut order: Vec<&Score> = table.scores.iter().collect();
    order.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(a.structure.cmp(&b.structure))
    });
    let mut remaining: BTreeMap<String, usize> = BTreeMap::new();
    let mut removals = Vec::with_capacity(count);
    let mut blocked: Option<String> = None;
    for s in order {
        if removals.len() == count {
            break;
        }
        let (group, size) = group_of(net, &s.structure);
        let left = remaining.entry(group.clone()).or_insert(size);
        if *left <= 1 {
            blocked.get_or_insert(group);
            continue;
        }
        *left -= 1;
        removals.push(s.structure);
    }
    if removals.len() < count {
        return Err(Error::Pruning(format!(
            "ratio {p} needs {count} removals but would empty {}",
            blocked.unwrap_or_default()
        )));
    }
    removals.sort();
    Ok(PrunePlan {
        criterion: table.criterion.clone(),
        elements: table.elements,
        ratio: p,
        iteration: table.iteration,
        topology: table.topology.clone(),
        removals,
    })
}

fn keep_outputs(u: &mut ConvUnit, keep: &[usize]) -> Result<()> {
    let c = &mut u.conv;
    c.weight = c.weight.select(0, keep)?;
    c.bias = c.bias.select(0, keep)?;
    c.out_origin = keep.iter().map(|&k| c.out_origin[k]).collect();
    let bn = &mut u.bn;
    bn.gamma = bn.gamma.select(0, keep)?;
    bn.beta = bn.beta.select(0, keep)?;
    bn.state.running_mean = keep.iter().map(|&k| bn.state.running_mean[k]).collect();
    bn.state.running_var = keep.iter().map(|&k| bn.state.running_var[k]).collect();
    Ok(())
}

fn keep_inputs(u: &mut ConvUnit, keep: &[usize]) -> Result<()> {
    let c = &mut u.conv;
    c.weight = c.weight.select(1, keep)?;
    c.in_origin = keep.iter().map(|&k| c.in_origin[k]).collect();
    Ok(())
}

/// The conv (or dense head) reading the output of the conv at `loc`.
fn rewire_consumer(net: &mut Network, loc: ConvLoc, keep: &[usize]) -> Result<()> {
    match loc.slot {
        ConvSlot::First => keep_inputs(
            net.unit_mut(ConvLoc {
                node: loc.node,
                slot: ConvSlot::Second,
            }),
            keep,
        ),
        ConvSlot::Main => {
            for i in loc.node + 1..net.nodes.len() {
                match &mut net.nodes[i] {
                    LayerNode::ConvBnRelu(u) => return keep_inputs(u, keep),
                    LayerNode::Dense(d) => {
                        d.weight = d.weight.select(0, keep)?;
                        d.in_origin = keep.iter().map(|&k| d.in_origin[k]).collect();
                        return Ok(());
                    }
                    LayerNode::Residual(_) => break,
                    LayerNode::MaxPool { .. } | LayerNode::GlobalAvgPool => {}
                }
            }
            Err(Error::Pruning(format!(
                "conv at node {} feeds a residual join",
                loc.node
            )))
        }
        _ => Err(Error::Pruning(format!(
            "conv at node {} is pinned by a residual join",
            loc.node
        ))),
    }
}

/// Physically removes the planned structures and rewires their consumers.
pub fn surgery(net: &Network, plan: &PrunePlan) -> Result<Network> {
    if plan.topology != net.topology_signature() {
        return Err(Error::Pruning(
            "plan was computed on a different network".into(),
        ));
    }
    if plan.removals.is_empty() {
        return Err(Error::Pruning("plan removes nothing".into()));
    }
    let allowed = prunable(net, plan.elements);
    if let Some(bad) = plan.removals.iter().find(|s| !allowed.contains(s)) {
        return Err(Error::Pruning(format!(
            "{bad} is not a prunable {}",
            plan.elements.tag()
        )));
    }
    let mut out = net.clone();
    let mut filters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut blocks = Vec::new();
    for s in &plan.removals {
        match *s {
            StructureKind::Filter { layer, filter } => {
                filters.entry(layer).or_default().push(filter)
            }
            StructureKind::Block { block } => blocks.push(block),
        }
    }
    let locs = net.conv_locs();
    for (layer, removed) in filters {
        let loc = locs[layer];
        let keep: Vec<usize> = (0..net.unit(loc).conv.out_channels())
            .filter(|f| !removed.contains(f))
            .collect();
        if keep.is_empty() {
            return Err(Error::Pruning(format!(
                "removal would empty conv layer {layer}"
            )));
        }
        keep_outputs(out.unit_mut(loc), &keep)?;
        rewire_consumer(&mut out, loc, &keep)?;
    }
    blocks.sort_unstable();
    blocks.dedup();
    for &b in blocks.iter().rev() {
        let node = net.block_node(b).expect("block exists");
        out.nodes.remove(node);
    }
    out.validate()?;
    if out.param_count() >= net.param_count() {
        return Err(Error::Pruning("surgery did not shrink the network".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdjustScheme {
    FineTune { epochs: usize },
    ScratchSame,
    ScratchDouble,
    WinningTicket { rewind_epoch: usize },
}

impl AdjustScheme {
    pub fn tag(&self) -> &'static str {
        match self {
            AdjustScheme::FineTune { .. } => "finetune",
            AdjustScheme::ScratchSame => "scratch-same",
            AdjustScheme::ScratchDouble => "scratch-double",
            AdjustScheme::WinningTicket { .. } => "wticket",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjustOutcome {
    pub network: Network,
    pub history: Vec<EpochStats>,
}

/// Retrains a pruned network on clean data. `base` holds the base run's
/// hyperparameters; `snapshots` maps epochs of that run to networks.
pub fn adjust(
    net: &Network,
    scheme: AdjustScheme,
    data: &DatasetSplit,
    base: &TrainHyper,
    snapshots: &[(usize, Network)],
    seed: u64,
) -> Result<AdjustOutcome> {
    let mut n = net.clone();
    let hyper = match scheme {
        AdjustScheme::FineTune { epochs: 0 } => {
            return Ok(AdjustOutcome {
                network: n,
                history: Vec::new(),
            })
        }
        AdjustScheme::FineTune { epochs } => TrainHyper {
            epochs,
            lr: base.lr * FINE_TUNE_LR_SCALE,
            lr_milestones: Vec::new(),
            seed,
            ..base.clone()
        },
        AdjustScheme::ScratchSame | AdjustScheme::ScratchDouble => {
            n.reinitialize(seed);
            let factor = if scheme == AdjustScheme::ScratchDouble {
                2
            } else {
                1
            };
            TrainHyper {
                epochs: base.epochs * factor,
                seed,
                ..base.clone()
            }
        }
        AdjustScheme::WinningTicket { rewind_epoch } => {
            let (_, snap) = snapshots
                .iter()
                .find(|(e, _)| *e == rewind_epoch)
                .ok_or_else(|| {
                    Error::Pruning(format!(
                        "winning ticket needs a snapshot at epoch {rewind_epoch}"
                    ))
                })?;
            n.inherit_from(snap)?;
            TrainHyper {
                seed,
                ..base.clone()
            }
        }
    };
    n.epoch = 0;
    let out = train(&mut n, data, &hyper, &[])?;
    Ok(AdjustOutcome {
        network: n,
        history: out.history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub criterion: Criterion,
    pub ratio: f64,
    pub iterations: usize,
    pub mode: StructureMode,
    pub scheme: AdjustScheme,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneIteration {
    /// 1-based.
    pub iteration: usize,
    pub tables: Vec<ImportanceTable>,
    pub plans: Vec<PrunePlan>,
    pub network: Network,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub iterations: Vec<PruneIteration>,
    /// Why the loop ended before `K` iterations, if it did.
    pub stopped_early: Option<String>,
}

/// Iterative pruning: each iteration scores the previous iteration's
/// network, removes `ceil(p * n)` structures, and adjusts the survivors.
pub fn prune_iterative(
    net: &Network,
    cfg: &PruneConfig,
    train_set: &DatasetSplit,
    calibration: &DatasetSplit,
    base: &TrainHyper,
    snapshots: &[(usize, Network)],
) -> Result<PruneOutcome> {
    if cfg.iterations == 0 {
        return Err(invalid("prune_iterative", "K must be at least 1"));
    }
    if !(cfg.ratio > 0.0 && cfg.ratio < 1.0) {
        return Err(invalid(
            "prune_iterative",
            format!("ratio {} outside (0, 1)", cfg.ratio),
        ));
    }
    cfg.mode.check_network(net)?;
    let mut current = net.clone();
    let mut iterations = Vec::new();
    for k in 1..=cfg.iterations {
        let mut tables = Vec::new();
        let mut plans = Vec::new();
        let mut next = current.clone();
        for (elements, p) in cfg.mode.steps(cfg.ratio) {
            let mut table = score(cfg.criterion, &next, calibration, elements)?;
            table.iteration = k;
            let plan = match select_removals(&table, p, &next) {
                Ok(plan) => plan,
                Err(Error::Pruning(msg)) => {
                    return Ok(PruneOutcome {
                        iterations,
                        stopped_early: Some(format!("iteration {k}: {msg}")),
                    })
                }
                Err(e) => return Err(e),
            };
            next = surgery(&next, &plan)?;
            tables.push(table);
            plans.push(plan);
        }
        let adjusted = adjust(
            &next,
            cfg.scheme,
            train_set,
            base,
            snapshots,
            seed::derive_seed(cfg.seed, 0xad_0000 + k as u64),
        )?;
        current = adjusted.network;
        iterations.push(PruneIteration {
            iteration: k,
            tables,
            plans,
            network: current.clone(),
            history: adjusted.history,
        });
    }
    Ok(PruneOutcome {
        iterations,
        stopped_early: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementEval {
    pub structure: StructureKind,
    pub acc_clean: f64,
    /// One per attack, in sweep order.
    pub acc_adv: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackBuckets {
    pub attack: String,
    pub baseline_adv: f64,
    /// `buckets[i]` holds the elements accepted at `i` points of clean loss.
    pub buckets: Vec<Vec<StructureKind>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepBuckets {
    pub elements: ElementKind,
    pub total: usize,
    pub baseline_clean: f64,
    pub attacks: Vec<AttackBuckets>,
    pub evaluations: Vec<ElementEval>,
}

impl SweepBuckets {
    /// `100 * |L_i| / |E|` for every attack and bucket.
    pub fn percentages(&self) -> Vec<(String, Vec<f64>)> {
        self.attacks
            .iter()
            .map(|a| {
                let pct = a
                    .buckets
                    .iter()
                    .map(|b| {
                        if self.total == 0 {
                            0.0
                        } else {
                            100.0 * b.len() as f64 / self.total as f64
                        }
                    })
                    .collect();
                (a.attack.clone(), pct)
            })
            .collect()
    }
}

/// Whether an element's removal lands in bucket `i`: adversarial accuracy
/// strictly improves and clean accuracy drops by at most `i` points.
pub fn accepted(i: usize, clean: f64, adv: f64, base_clean: f64, base_adv: f64) -> bool {
    adv > base_adv && (clean - base_clean) * 100.0 >= -(i as f64) - 1e-9
}

fn eval_element(
    net: &Network,
    s: StructureKind,
    elements: ElementKind,
    data: &DatasetSplit,
    attacks: &[AttackSpec],
    seed: u64,
) -> Result<ElementEval> {
    let plan = PrunePlan {
        criterion: "single".into(),
        elements,
        ratio: 0.0,
        iteration: 0,
        topology: net.topology_signature(),
        removals: vec![s],
    };
    let pruned = surgery(net, &plan)?;
    Ok(ElementEval {
        structure: s,
        acc_clean: evaluate(&pruned, data)?,
        acc_adv: attacks
            .iter()
            .map(|a| evaluate_under_attack(&pruned, data, a, None, seed))
            .collect::<Result<_>>()?,
    })
}

/// Removes each prunable element alone (no retraining) and buckets it by
/// how much clean accuracy it costs while improving robustness. FGSM is
/// white-box against each pruned network.
pub fn sweep_single_elements(
    net: &Network,
    elements: ElementKind,
    data: &DatasetSplit,
    attacks: &[AttackSpec],
    seed: u64,
    workers: usize,
) -> Result<SweepBuckets> {
    if attacks.is_empty() {
        return Err(invalid("sweep_single_elements", "no attacks given"));
    }
    let baseline_clean = evaluate(net, data)?;
    let baseline_adv: Vec<f64> = attacks
        .iter()
        .map(|a| evaluate_under_attack(net, data, a, None, seed))
        .collect::<Result<_>>()?;
    let candidates = prunable(net, elements);
    let workers = workers.clamp(1, candidates.len().max(1));
    let per = candidates.len().div_ceil(workers).max(1);
    let results: Vec<Result<Vec<ElementEval>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = candidates
            .chunks(per)
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|&s| eval_element(net, s, elements, data, attacks, seed))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    let mut evaluations = Vec::with_capacity(candidates.len());
    for r in results {
        evaluations.extend(r?);
    }
    let buckets = attacks
        .iter()
        .enumerate()
        .map(|(a, spec)| AttackBuckets {
            attack: spec.kind.tag().to_string(),
            baseline_adv: baseline_adv[a],
            buckets: (0..SWEEP_BUCKETS)
                .map(|i| {
                    evaluations
                        .iter()
                        .filter(|e| {
                            accepted(
                                i,
                                e.acc_clean,
                                e.acc_adv[a],
                                baseline_clean,
                                baseline_adv[a],
                            )
                        })
                        .map(|e| e.structure)
                        .collect()
                })
                .collect(),
        })
        .collect();
    Ok(SweepBuckets {
        elements,
        total: candidates.len(),
        baseline_clean,
        attacks: buckets,
        evaluations,
    })
}

/// Six rows per attack: `elements, attack, loss_pp, count, total, percentage`.
pub fn sweep_csv(sweeps: &[SweepBuckets]) -> Result<String> {
    let header: Vec<String> = [
        "elements",
        "attack",
        "loss_pp",
        "count",
        "total",
        "percentage",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut rows = Vec::new();
    for s in sweeps {
        for a in &s.attacks {
            for (i, b) in a.buckets.iter().enumerate() {
                let pct = if s.total == 0 {
                    0.0
                } else {
                    100.0 * b.len() as f64 / s.total as f64
                };
                rows.push(vec![
                    s.elements.tag().to_string(),
                    a.attack.clone(),
                    i.to_string(),
                    b.len().to_string(),
                    s.total.to_string(),
                    format!("{pct:.2}"),
                ]);
            }
        }
    }
    write_csv(&header, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ArchSpec;

    fn vgg() -> Network {
        Network::build(&ArchSpec::mini_vgg(2, 3, 3, 8), 1).unwrap()
    }

    #[test]
    fn removal_counts() {
        assert_eq!(removal_count(0.1, 60), 6);
        assert_eq!(removal_count(0.1, 54), 6);
        assert_eq!(removal_count(0.1, 1), 1);
        assert_eq!(removal_count(0.3, 10), 3);
        assert_eq!(removal_count(0.05, 28), 2);
    }

    #[test]
    fn l1_hand_example() {
        let mut net = vgg();
        let loc = net.conv_locs()[0];
        let w = &mut net.unit_mut(loc).conv.weight;
        let per = w.len() / w.shape()[0];
        w.values_mut()[..per].fill(0.0);
        w.values_mut()[0] = 1.0;
        w.values_mut()[1] = -1.0;
        w.values_mut()[per..2 * per].fill(0.0);
        w.values_mut()[per] = 2.0;
        w.values_mut()[per + 1] = 2.0;
        let t = criterion_l1(&net, ElementKind::Filters).unwrap();
        assert_eq!(t.scores[0].score, 2.0);
        assert_eq!(t.scores[1].score, 4.0);
    }

    #[test]
    fn equal_scores_break_ties_by_registry_order() {
        let net = Network::build(&ArchSpec::mini_vgg(8, 3, 3, 8), 1).unwrap();
        let mut t = criterion_l1(&net, ElementKind::Filters).unwrap();
        t.scores.iter_mut().for_each(|s| s.score = 1.0);
        let plan = select_removals(&t, 0.05, &net).unwrap();
        assert_eq!(plan.removals.len(), 6);
        assert_eq!(
            plan.removals,
            t.scores[..plan.removals.len()]
                .iter()
                .map(|s| s.structure)
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn select_never_empties_a_layer() {
        let net = vgg();
        let mut t = criterion_l1(&net, ElementKind::Filters).unwrap();
        for s in &mut t.scores {
            s.score = match s.structure {
                StructureKind::Filter { layer: 0, .. } => 0.0,
                _ => 1.0,
            };
        }
        let plan = select_removals(&t, 0.2, &net).unwrap();
        let layer0 = plan
            .removals
            .iter()
            .filter(|s| matches!(s, StructureKind::Filter { layer: 0, .. }))
            .count();
        assert_eq!(layer0, 1);
        let err = select_removals(&t, 0.99, &net).unwrap_err().to_string();
        assert!(err.contains("conv layer"), "{err}");
    }

    #[test]
    fn surgery_bookkeeping() {
        let net = Network::build(&ArchSpec::mini_vgg(8, 3, 3, 8), 2).unwrap();
        let plan = PrunePlan {
            criterion: "manual".into(),
            elements: ElementKind::Filters,
            ratio: 0.1,
            iteration: 1,
            topology: net.topology_signature(),
            removals: vec![StructureKind::Filter {
                layer: 0,
                filter: 3,
            }],
        };
        let out = surgery(&net, &plan).unwrap();
        let locs = out.conv_locs();
        assert_eq!(out.unit(locs[0]).conv.out_channels(), 7);
        assert_eq!(out.unit(locs[1]).conv.in_channels(), 7);
        assert_eq!(out.unit(locs[0]).conv.out_origin, vec![0, 1, 2, 4, 5, 6, 7]);
        assert!(out.param_count() < net.param_count());
        assert!(surgery(&out, &plan).is_err());
    }

    #[test]
    fn layer_pruning_needs_residual_blocks() {
        let err = StructureMode::Layers.check_network(&vgg()).unwrap_err();
        assert_eq!(
            err.to_string(),
            "pruning: layer pruning requires residual architecture"
        );
    }

    #[test]
    fn bucket_acceptance_is_strict_on_robustness() {
        assert!(!accepted(5, 0.9, 0.5, 0.9, 0.5));
        assert!(accepted(0, 0.9, 0.51, 0.9, 0.5));
        assert!(accepted(1, 0.89, 0.51, 0.9, 0.5));
        assert!(!accepted(0, 0.89, 0.51, 0.9, 0.5));
    }

    #[test]
    fn vip_identity_and_constant_column() {
        let mut rng = seed::rng(3, 0);
        use rand::Rng;
        let y: Vec<Vec<f64>> = (0..30)
            .map(|i| (0..3).map(|c| f64::from(u8::from(i % 3 == c))).collect())
            .collect();
        let x: Vec<Vec<f64>> = (0..30)
            .map(|i| {
                vec![
                    (i % 3) as f64 + rng.random::<f64>(),
                    rng.random(),
                    4.0,
                    rng.random(),
                ]
            })
            .collect();
        let fit = pls_vip(&x, &y, 2).unwrap();
        assert_eq!(fit.constant_columns, vec![2]);
        assert_eq!(fit.vip[2], 0.0);
        let sum: f64 = fit.vip.iter().map(|v| v * v).sum();
        assert!((sum - 3.0).abs() < 1e-9, "{sum}");
        assert!(fit.vip[0] > fit.vip[1] && fit.vip[0] > fit.vip[3]);
    }
}
