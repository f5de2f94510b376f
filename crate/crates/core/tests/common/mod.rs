//! Double-precision naive-loop reference implementations used as oracles.
//! The oracles never call into the crate's kernels or tape; `Linear` is a
//! test victim for the attack checks, not an oracle.
#![allow(dead_code)]

use prunelab::network::{LayerNode, Network};

#[derive(Debug, Clone, PartialEq)]
pub struct T4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl T4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            v: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_f32(shape: &[usize], values: &[f32]) -> Self {
        Self {
            n: shape[0],
            c: shape[1],
            h: shape[2],
            w: shape[3],
            v: values.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.v[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.v[((n * self.c + c) * self.h + y) * self.w + x]
    }
}

/// Direct cross-correlation with zero padding.
pub fn conv2d(
    x: &T4,
    weight: &[f64],
    wshape: [usize; 4],
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> T4 {
    let [o, ci, kh, kw] = wshape;
    assert_eq!(ci, x.c);
    let oh = (x.h + 2 * pad - kh) / stride + 1;
    let ow = (x.w + 2 * pad - kw) / stride + 1;
    let mut out = T4::new(x.n, o, oh, ow);
    for n in 0..x.n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[oc];
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w
                                {
                                    acc += weight[((oc * ci + c) * kh + ky) * kw + kx]
                                        * x.at(n, c, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    *out.at_mut(n, oc, oy, ox) = acc;
                }
            }
        }
    }
    out
}

pub fn batchnorm_train(x: &T4, gamma: &[f64], beta: &[f64], eps: f64) -> T4 {
    let mut out = x.clone();
    let count = (x.n * x.h * x.w) as f64;
    for c in 0..x.c {
        let mut sum = 0.0;
        for n in 0..x.n {
            for y in 0..x.h {
                for xx in 0..x.w {
                    sum += x.at(n, c, y, xx);
                }
            }
        }
        let mean = sum / count;
        let mut var = 0.0;
        for n in 0..x.n {
            for y in 0..x.h {
                for xx in 0..x.w {
                    var += (x.at(n, c, y, xx) - mean).powi(2);
                }
            }
        }
        var /= count;
        for n in 0..x.n {
            for y in 0..x.h {
                for xx in 0..x.w {
                    *out.at_mut(n, c, y, xx) =
                        (x.at(n, c, y, xx) - mean) / (var + eps).sqrt() * gamma[c] + beta[c];
                }
            }
        }
    }
    out
}

pub fn batchnorm_eval(
    x: &T4,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> T4 {
    let mut out = x.clone();
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    *out.at_mut(n, c, y, xx) =
                        (x.at(n, c, y, xx) - mean[c]) / (var[c] + eps).sqrt() * gamma[c] + beta[c];
                }
            }
        }
    }
    out
}

pub fn relu(x: &T4) -> T4 {
    let mut out = x.clone();
    out.v.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

pub fn add(a: &T4, b: &T4) -> T4 {
    let mut out = a.clone();
    out.v.iter_mut().zip(&b.v).for_each(|(x, y)| *x += y);
    out
}

pub fn max_pool(x: &T4, size: usize, stride: usize) -> T4 {
    let oh = (x.h - size) / stride + 1;
    let ow = (x.w - size) / stride + 1;
    let mut out = T4::new(x.n, x.c, oh, ow);
    for n in 0..x.n {
        for c in 0..x.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for ky in 0..size {
                        for kx in 0..size {
                            m = m.max(x.at(n, c, oy * stride + ky, ox * stride + kx));
                        }
                    }
                    *out.at_mut(n, c, oy, ox) = m;
                }
            }
        }
    }
    out
}

/// `[N,C,H,W] -> N rows of C`
pub fn gap(x: &T4) -> Vec<Vec<f64>> {
    (0..x.n)
        .map(|n| {
            (0..x.c)
                .map(|c| {
                    let mut s = 0.0;
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            s += x.at(n, c, y, xx);
                        }
                    }
                    s / (x.h * x.w) as f64
                })
                .collect()
        })
        .collect()
}

pub fn dense(rows: &[Vec<f64>], weight: &[f64], m: usize, bias: &[f64]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            (0..m)
                .map(|j| {
                    bias[j]
                        + r.iter()
                            .enumerate()
                            .map(|(i, x)| x * weight[i * m + j])
                            .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[y];
    }
    total / labels.len() as f64
}

/// Activation pattern of every relu (sign mask) and max pool (flat argmax
/// per output) in one forward. In replay mode the recorded pattern is used
/// instead of the current inputs, which freezes the network onto one smooth
/// piece of its piecewise-smooth loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gates {
    relu: Vec<Vec<bool>>,
    pool: Vec<Vec<usize>>,
    replay: bool,
    cursor: (usize, usize),
    /// When set, every relu output is kept in `outputs`, in forward order.
    pub record: bool,
    pub outputs: Vec<T4>,
}

impl Gates {
    pub fn replaying(&self) -> Self {
        Self {
            replay: true,
            cursor: (0, 0),
            ..self.clone()
        }
    }

    pub fn recording() -> Self {
        Self {
            record: true,
            ..Self::default()
        }
    }

    fn relu(&mut self, x: &T4) -> T4 {
        let mask: Vec<bool> = if self.replay {
            self.cursor.0 += 1;
            self.relu[self.cursor.0 - 1].clone()
        } else {
            let m: Vec<bool> = x.v.iter().map(|&v| v > 0.0).collect();
            self.relu.push(m.clone());
            m
        };
        let mut out = x.clone();
        out.v.iter_mut().zip(mask).for_each(|(v, keep)| {
            if !keep {
                *v = 0.0
            }
        });
        if self.record {
            self.outputs.push(out.clone());
        }
        out
    }

    fn max_pool(&mut self, x: &T4, size: usize, stride: usize) -> T4 {
        let oh = (x.h - size) / stride + 1;
        let ow = (x.w - size) / stride + 1;
        let mut out = T4::new(x.n, x.c, oh, ow);
        let argmax: Vec<usize> = if self.replay {
            self.cursor.1 += 1;
            self.pool[self.cursor.1 - 1].clone()
        } else {
            let mut a = Vec::with_capacity(out.v.len());
            for plane in 0..x.n * x.c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = plane * x.h * x.w + oy * stride * x.w + ox * stride;
                        for ky in 0..size {
                            for kx in 0..size {
                                let idx =
                                    plane * x.h * x.w + (oy * stride + ky) * x.w + ox * stride + kx;
                                if x.v[idx] > x.v[best] {
                                    best = idx;
                                }
                            }
                        }
                        a.push(best);
                    }
                }
            }
            self.pool.push(a.clone());
            a
        };
        out.v.iter_mut().zip(argmax).for_each(|(o, i)| *o = x.v[i]);
        out
    }
}

/// Reference forward over `params` given in `Network::params()` order.
/// `train` selects batch statistics for every batchnorm.
pub fn forward(net: &Network, params: &[Vec<f64>], x: &T4, train: bool) -> Vec<Vec<f64>> {
    forward_gated(net, params, x, train, &mut Gates::default())
}

pub fn forward_gated(
    net: &Network,
    params: &[Vec<f64>],
    x: &T4,
    train: bool,
    gates: &mut Gates,
) -> Vec<Vec<f64>> {
    let eps = net.bn_config.epsilon as f64;
    let mut cursor = 0usize;
    let mut next = || {
        let p = &params[cursor];
        cursor += 1;
        p.clone()
    };
    let mut h = x.clone();
    let hw = h.h * h.w;
    for (i, v) in h.v.iter_mut().enumerate() {
        let c = (i / hw) % x.c;
        *v = (*v - net.normalization.mean[c] as f64) / net.normalization.std[c] as f64;
    }
    let unit =
        |inp: &T4, u: &prunelab::network::ConvUnit, next: &mut dyn FnMut() -> Vec<f64>| -> T4 {
            let w = next();
            let b = next();
            let g = next();
            let be = next();
            let s = u.conv.weight.shape();
            let y = conv2d(
                inp,
                &w,
                [s[0], s[1], s[2], s[3]],
                &b,
                u.conv.stride,
                u.conv.padding,
            );
            if train {
                batchnorm_train(&y, &g, &be, eps)
            } else {
                let m: Vec<f64> = u.bn.state.running_mean.iter().map(|&v| v as f64).collect();
                let v: Vec<f64> = u.bn.state.running_var.iter().map(|&v| v as f64).collect();
                batchnorm_eval(&y, &g, &be, &m, &v, eps)
            }
        };
    let mut pooled: Option<Vec<Vec<f64>>> = None;
    let mut logits = Vec::new();
    for node in &net.nodes {
        match node {
            LayerNode::ConvBnRelu(u) => h = gates.relu(&unit(&h, u, &mut next)),
            LayerNode::MaxPool { size, stride } => h = gates.max_pool(&h, *size, *stride),
            LayerNode::Residual(b) => {
                let a = gates.relu(&unit(&h, &b.conv1, &mut next));
                let a = unit(&a, &b.conv2, &mut next);
                let s = match &b.projection {
                    Some(p) => unit(&h, p, &mut next),
                    None => h.clone(),
                };
                h = gates.relu(&add(&a, &s));
            }
            LayerNode::GlobalAvgPool => pooled = Some(gap(&h)),
            LayerNode::Dense(d) => {
                let w = next();
                let b = next();
                let m = d.weight.shape()[1];
                logits = dense(pooled.as_ref().expect("pool before dense"), &w, m, &b);
            }
        }
    }
    logits
}

pub fn params_f64(net: &Network) -> Vec<Vec<f64>> {
    net.params()
        .iter()
        .map(|(_, t)| t.values().iter().map(|&v| v as f64).collect())
        .collect()
}

/// Simple deterministic pseudo-random stream for test inputs.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_f32(&mut self) -> f32 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((self.0 >> 40) as f32) / (1u64 << 24) as f32
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_f32()
    }

    pub fn vec(&mut self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

/// Central finite differences (step `h`) of `loss` around `params`.
pub fn finite_differences(
    params: &[Vec<f64>],
    h: f64,
    mut loss: impl FnMut(&[Vec<f64>]) -> f64,
) -> Vec<Vec<f64>> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut g = vec![0.0; params[t].len()];
        for i in 0..params[t].len() {
            let orig = work[t][i];
            work[t][i] = orig + h;
            let up = loss(&work);
            work[t][i] = orig - h;
            let down = loss(&work);
            work[t][i] = orig;
            g[i] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Denominator floor for relative gradient errors; gradients that are
/// analytically zero (conv bias ahead of batchnorm) otherwise divide by noise.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub max: f64,
    pub median: f64,
    pub count: usize,
}

/// Full-network check results. `smooth` differences the loss with the
/// activation pattern frozen at the evaluation point; `plain` differences
/// the raw loss, and `kinked` counts entries whose ±h evaluations changed
/// some relu sign or pool argmax (where plain differences do not estimate
/// the derivative).
#[derive(Debug, Clone, Copy)]
pub struct NetworkGradCheck {
    pub smooth: GradCheck,
    pub plain: GradCheck,
    pub kinked: usize,
}

pub fn compare(analytic: &[Vec<f32>], numeric: &[Vec<f64>]) -> GradCheck {
    let mut errs: Vec<f64> = analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| {
            assert_eq!(a.len(), n.len());
            a.iter()
                .zip(n)
                .map(|(&a, &n)| rel_err(a as f64, n, REL_FLOOR))
                .collect::<Vec<_>>()
        })
        .collect();
    let max = errs.iter().cloned().fold(0.0, f64::max);
    let count = errs.len();
    GradCheck {
        max,
        median: median(&mut errs),
        count,
    }
}

/// Train-mode cross-entropy gradients of every parameter of `net` against
/// double-precision central differences with step 1e-3.
pub fn network_gradient_check(net: &Network, seed: u64) -> NetworkGradCheck {
    use prunelab::autodiff::Tape;
    use prunelab::Tensor;

    let [c, side] = [net.arch.input_channels, net.arch.input_side];
    let n = 4;
    let mut rng = Lcg(seed ^ 0x5eed);
    let images = Tensor::new(
        vec![n, c, side, side],
        rng.vec(n * c * side * side, 0.0, 1.0),
    )
    .unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % net.num_classes()).collect();

    let mut work = net.clone();
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let pass = work.forward_train(&mut tape, x).unwrap();
    let loss = tape.softmax_cross_entropy(pass.logits, &labels).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f32>> = pass
        .params
        .iter()
        .map(|v| tape.grad(*v).unwrap().to_vec())
        .collect();

    let x64 = T4::from_f32(images.shape(), images.values());
    let base = params_f64(net);
    let mut at_theta = Gates::default();
    forward_gated(net, &base, &x64, true, &mut at_theta);
    let frozen = at_theta.replaying();

    let smooth = finite_differences(&base, 1e-3, |p| {
        cross_entropy(
            &forward_gated(net, p, &x64, true, &mut frozen.clone()),
            &labels,
        )
    });
    let mut kinked = 0;
    let mut work = base.clone();
    let mut plain = Vec::with_capacity(base.len());
    for t in 0..base.len() {
        let mut g = vec![0.0; base[t].len()];
        for i in 0..base[t].len() {
            let mut crossed = false;
            let mut eval = |v: f64, work: &mut Vec<Vec<f64>>| {
                work[t][i] = v;
                let mut gates = Gates::default();
                let l = cross_entropy(&forward_gated(net, work, &x64, true, &mut gates), &labels);
                crossed |= gates.relu != at_theta.relu || gates.pool != at_theta.pool;
                l
            };
            let up = eval(base[t][i] + 1e-3, &mut work);
            let down = eval(base[t][i] - 1e-3, &mut work);
            work[t][i] = base[t][i];
            g[i] = (up - down) / 2e-3;
            kinked += usize::from(crossed);
        }
        plain.push(g);
    }
    NetworkGradCheck {
        smooth: compare(&analytic, &smooth),
        plain: compare(&analytic, &plain),
        kinked,
    }
}

/// Post-relu maps keyed by conv index (VGG convs, ResNet stem and block
/// conv1) and the post-relu output of every residual block.
pub struct Probe {
    pub conv_maps: std::collections::BTreeMap<usize, T4>,
    pub block_outputs: Vec<T4>,
}

/// Eval-mode reference forward that keeps intermediate activations.
pub fn probe(net: &Network, x: &T4) -> Probe {
    let mut gates = Gates::recording();
    forward_gated(net, &params_f64(net), x, false, &mut gates);
    let mut outs = gates.outputs.into_iter();
    let mut conv_maps = std::collections::BTreeMap::new();
    let mut block_outputs = Vec::new();
    let mut conv = 0;
    for node in &net.nodes {
        match node {
            LayerNode::ConvBnRelu(_) => {
                conv_maps.insert(conv, outs.next().expect("relu output"));
                conv += 1;
            }
            LayerNode::Residual(b) => {
                conv_maps.insert(conv, outs.next().expect("conv1 output"));
                block_outputs.push(outs.next().expect("block output"));
                conv += 2 + usize::from(b.projection.is_some());
            }
            _ => {}
        }
    }
    Probe {
        conv_maps,
        block_outputs,
    }
}

/// Replaces every parameter and running statistic with seeded values so
/// that structural tests do not rely on the default initialization.
pub fn randomize(net: &mut Network, seed: u64) {
    let mut rng = Lcg(seed ^ 0xa11);
    for (name, p) in net.params_mut() {
        if name.ends_with("weight") {
            p.values_mut()
                .iter_mut()
                .for_each(|v| *v *= rng.uniform(0.5, 1.5));
        } else {
            let (lo, hi) = if name.ends_with("gamma") {
                (0.5, 1.5)
            } else {
                (-0.5, 0.5)
            };
            p.values_mut()
                .iter_mut()
                .for_each(|v| *v = rng.uniform(lo, hi));
        }
    }
    for s in net.bn_states_mut() {
        s.running_mean
            .iter_mut()
            .for_each(|v| *v = rng.uniform(-0.3, 0.3));
        s.running_var
            .iter_mut()
            .for_each(|v| *v = rng.uniform(0.5, 1.5));
        s.initialized = true;
    }
}

pub fn random_images(n: usize, c: usize, side: usize, seed: u64) -> prunelab::Tensor {
    let mut rng = Lcg(seed);
    prunelab::Tensor::new(
        vec![n, c, side, side],
        rng.vec(n * c * side * side, 0.0, 1.0),
    )
    .unwrap()
}

use prunelab::network::{ConvLoc, StructureKind};
use prunelab::pruning::{surgery, ElementKind, PrunePlan};

/// Zeroes a structure's outgoing contribution: a filter's kernel, bias and
/// batchnorm affine, or a block's residual-branch batchnorm affine.
pub fn zero_structure(net: &mut Network, s: StructureKind) {
    let unit = match s {
        StructureKind::Filter { layer, filter } => {
            let loc: ConvLoc = net.conv_locs()[layer];
            let u = net.unit_mut(loc);
            let per = u.conv.weight.len() / u.conv.out_channels();
            u.conv.weight.values_mut()[filter * per..(filter + 1) * per].fill(0.0);
            u.conv.bias.values_mut()[filter] = 0.0;
            u.bn.gamma.values_mut()[filter] = 0.0;
            u.bn.beta.values_mut()[filter] = 0.0;
            return;
        }
        StructureKind::Block { block } => {
            let node = net.block_node(block).unwrap();
            match &mut net.nodes[node] {
                LayerNode::Residual(b) => &mut b.conv2,
                _ => unreachable!(),
            }
        }
    };
    unit.bn.gamma.values_mut().fill(0.0);
    unit.bn.beta.values_mut().fill(0.0);
}

/// Max |logit difference| between the zeroed network and the network with
/// the zeroed structure removed.
pub fn zero_then_remove_diff(net: &Network, s: StructureKind, inputs: &prunelab::Tensor) -> f32 {
    let mut zeroed = net.clone();
    zero_structure(&mut zeroed, s);
    let elements = match s {
        StructureKind::Filter { .. } => ElementKind::Filters,
        StructureKind::Block { .. } => ElementKind::Blocks,
    };
    let plan = PrunePlan {
        criterion: "zeroed".into(),
        elements,
        ratio: 0.0,
        iteration: 0,
        topology: zeroed.topology_signature(),
        removals: vec![s],
    };
    let pruned = surgery(&zeroed, &plan).unwrap();
    assert!(pruned.param_count() < zeroed.param_count());
    zeroed
        .logits(inputs)
        .unwrap()
        .max_abs_diff(&pruned.logits(inputs).unwrap())
}

/// Naive flat-loop L1 oracle: walks raw weight buffers by index.
pub fn l1_oracle(net: &Network, s: StructureKind) -> f64 {
    match s {
        StructureKind::Filter { layer, filter } => {
            let w = &net.unit(net.conv_locs()[layer]).conv.weight;
            let sh = w.shape();
            let per = sh[1] * sh[2] * sh[3];
            let mut acc = 0.0f64;
            for i in 0..per {
                acc += (w.values()[filter * per + i] as f64).abs();
            }
            acc
        }
        StructureKind::Block { block } => {
            let node = net.block_node(block).unwrap();
            let LayerNode::Residual(b) = &net.nodes[node] else {
                unreachable!()
            };
            let mut units = vec![&b.conv1, &b.conv2];
            units.extend(b.projection.as_ref());
            let (mut acc, mut count) = (0.0f64, 0usize);
            for u in units {
                let v = u.conv.weight.values();
                for &w in v {
                    acc += (w as f64).abs();
                }
                count += v.len();
            }
            acc / count as f64
        }
    }
}

/// Per-sample loop: mean |activation| of each structure's post-relu output
/// from the double-precision reference forward, one image at a time.
pub fn expected_abs_oracle(
    net: &Network,
    images: &prunelab::Tensor,
    structures: &[StructureKind],
) -> Vec<f64> {
    let s = images.shape();
    let per = s[1] * s[2] * s[3];
    let mut sums = vec![0.0f64; structures.len()];
    for i in 0..s[0] {
        let x = T4::from_f32(
            &[1, s[1], s[2], s[3]],
            &images.values()[i * per..(i + 1) * per],
        );
        let p = probe(net, &x);
        for (acc, st) in sums.iter_mut().zip(structures) {
            *acc += match *st {
                StructureKind::Filter { layer, filter } => {
                    let m = &p.conv_maps[&layer];
                    let hw = m.h * m.w;
                    m.v[filter * hw..(filter + 1) * hw]
                        .iter()
                        .map(|v| v.abs())
                        .sum::<f64>()
                        / hw as f64
                }
                StructureKind::Block { block } => {
                    let m = &p.block_outputs[block];
                    m.v.iter().map(|v| v.abs()).sum::<f64>() / m.v.len() as f64
                }
            };
        }
    }
    sums.iter().map(|v| v / s[0] as f64).collect()
}

/// Independent PLS: each component's weight vector is the dominant
/// eigenvector of `X_k^T Y Y^T X_k` (symmetric eigendecomposition), then
/// the same deflation and VIP formula.
pub fn eigen_pls_vip(x: &[Vec<f64>], y: &[Vec<f64>], n_components: usize) -> Vec<f64> {
    use nalgebra::{DMatrix, SymmetricEigen};
    let (n, m, q) = (x.len(), x[0].len(), y[0].len());
    let center = |rows: &[Vec<f64>], cols: usize| {
        let mut mat = DMatrix::from_fn(n, cols, |i, j| rows[i][j]);
        for j in 0..cols {
            let mean = mat.column(j).mean();
            mat.column_mut(j).add_scalar_mut(-mean);
        }
        mat
    };
    let mut xk = center(x, m);
    let yc = center(y, q);
    let mut ws = Vec::new();
    let mut ssy = Vec::new();
    for _ in 0..n_components {
        let xy = xk.transpose() * &yc;
        let eig = SymmetricEigen::new(&xy * xy.transpose());
        let top = eig.eigenvalues.imax();
        if eig.eigenvalues[top] <= 1e-12 {
            break;
        }
        let w = eig.eigenvectors.column(top).into_owned();
        let t = &xk * &w;
        let tt = t.dot(&t);
        let p = xk.transpose() * &t / tt;
        xk -= &t * p.transpose();
        let c = yc.transpose() * &t;
        ssy.push(c.dot(&c) / tt);
        ws.push(w);
    }
    let total: f64 = ssy.iter().sum();
    (0..m)
        .map(|j| {
            let acc: f64 = ws
                .iter()
                .zip(&ssy)
                .map(|(w, s)| s * w[j] * w[j] / w.dot(w))
                .sum();
            (m as f64 * acc / total).sqrt()
        })
        .collect()
}

/// 40 samples, 3 classes; columns 0-1 carry the label signal, 2-5 are noise.
pub fn six_structure_problem(seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = Lcg(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..40 {
        let label = i % 3;
        let signal = label as f64;
        let mut row = vec![signal, signal];
        row.extend((0..4).map(|_| rng.uniform(-1.0, 1.0) as f64));
        x.push(row);
        y.push((0..3).map(|c| if c == label { 1.0 } else { 0.0 }).collect());
    }
    (x, y)
}

/// Softmax regression `z = x W + b` on flattened pixels.
pub struct Linear {
    pub w: prunelab::Tensor,
    pub b: prunelab::Tensor,
}

impl prunelab::attacks::InputGradient for Linear {
    fn input_gradient(
        &self,
        images: &prunelab::Tensor,
        labels: &[usize],
    ) -> prunelab::Result<prunelab::Tensor> {
        let n = images.shape()[0];
        let flat = images.reshaped(&[n, images.len() / n])?;
        let mut tape = prunelab::autodiff::Tape::new();
        let x = tape.param(&flat);
        let (w, b) = (tape.constant(self.w.clone()), tape.constant(self.b.clone()));
        let z = tape.dense(x, w, b)?;
        let loss = tape.softmax_cross_entropy(z, labels)?;
        let loss = tape.scale(loss, n as f32);
        tape.backward(loss)?;
        prunelab::Tensor::new(images.shape().to_vec(), tape.grad(x).unwrap().to_vec())
    }
}

/// Closed form: `dL/dx_i = W (softmax(z_i) - onehot(y_i))`, in f64.
pub fn closed_form(model: &Linear, images: &prunelab::Tensor, labels: &[usize]) -> Vec<f64> {
    let n = images.shape()[0];
    let d = images.len() / n;
    let m = model.b.len();
    let (w, b, x) = (model.w.values(), model.b.values(), images.values());
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let z: Vec<f64> = (0..m)
            .map(|k| {
                b[k] as f64
                    + (0..d)
                        .map(|j| x[i * d + j] as f64 * w[j * m + k] as f64)
                        .sum::<f64>()
            })
            .collect();
        let mx = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        let r: Vec<f64> = (0..m)
            .map(|k| e[k] / s - if k == labels[i] { 1.0 } else { 0.0 })
            .collect();
        out.extend((0..d).map(|j| (0..m).map(|k| w[j * m + k] as f64 * r[k]).sum::<f64>()));
    }
    out
}
