//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and the information its
//! backward rule needs. [`Tape::backward`] walks the nodes once in reverse
//! recording order, so inputs always precede their consumers.

use crate::error::{invalid, Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics owned by a batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub initialized: bool,
}

impl BatchNormState {
    /// Explicitly initialized statistics: mean 0, variance 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            initialized: true,
        }
    }

    /// Placeholder statistics that must be filled by a train-mode pass before
    /// any eval-mode use.
    pub fn uninitialized(channels: usize) -> Self {
        Self {
            initialized: false,
            ..Self::identity(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub momentum: f32,
    pub epsilon: f32,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    ChannelAffine {
        input: Var,
        scale: Vec<f32>,
    },
    Relu(Var),
    GlobalAvgPool(Var),
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Batch statistics observed by a train-mode batchnorm call.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedStats {
    pub mean: Vec<f32>,
    /// Unbiased variance, used for the running estimate.
    pub var_unbiased: Vec<f32>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Its `requires_grad` flag decides whether backward
    /// produces a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    /// Records a trainable leaf (copy of `param` with `requires_grad` set).
    pub fn param(&mut self, param: &Tensor) -> Var {
        let t = Tensor::new(param.shape().to_vec(), param.values().to_vec())
            .expect("tensor invariant")
            .with_requires_grad(true);
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xs,
                right: ws,
            });
        }
        if bs != [ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: ws,
                right: bs,
            });
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let span_h = (h + 2 * padding) as isize - kh as isize;
        let span_w = (w + 2 * padding) as isize - kw as isize;
        if span_h < 0 || span_w < 0 {
            return Err(invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"),
            ));
        }
        let g = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: span_h as usize / stride + 1,
            out_w: span_w as usize / stride + 1,
        };
        let k = g.patch_len();
        let p = g.positions();
        let mut out = vec![0.0f32; n * o * p];
        let mut cols = vec![0.0f32; k * p];
        let wv = self.value(weight).values();
        let bv = self.value(bias).values();
        let xv = self.value(input).values();
        for s in 0..n {
            kernels::im2col(&xv[s * c * h * w..(s + 1) * c * h * w], &g, &mut cols);
            let dst = &mut out[s * o * p..(s + 1) * o * p];
            for (oc, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(bv[oc]);
            }
            kernels::gemm_acc(wv, &cols, dst, o, k, p);
        }
        let value = Tensor::new(vec![n, o, g.out_h, g.out_w], out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry: g,
            },
            rg,
        ))
    }

    /// Affine map `input[N,D] · weight[D,M] + bias[M]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::ShapeMismatch {
                op: "dense",
                left: xs,
                right: ws,
            });
        }
        if self.shape(bias) != [ws[1]] {
            return Err(Error::ShapeMismatch {
                op: "dense bias",
                left: ws,
                right: self.shape(bias).to_vec(),
            });
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let bv = self.value(bias).values();
        let mut out: Vec<f32> = (0..n).flat_map(|_| bv.iter().copied()).collect();
        kernels::gemm_acc(
            self.value(input).values(),
            self.value(weight).values(),
            &mut out,
            n,
            d,
            m,
        );
        let value = Tensor::new(vec![n, m], out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Batch normalization over `[N,C,H,W]`.
    ///
    /// Train mode normalizes with the biased batch variance and returns the
    /// observed statistics; the caller folds them into its running state with
    /// [`update_running_stats`]. Eval mode uses `state` as is.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState,
        mode: Mode,
        cfg: BatchNormConfig,
    ) -> Result<(Var, Option<ObservedStats>)> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(invalid(
                "batchnorm2d",
                format!("expected [N,C,H,W], got {xs:?}"),
            ));
        }
        let c = xs[1];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::ShapeMismatch {
                    op: if name == "gamma" {
                        "batchnorm2d gamma"
                    } else {
                        "batchnorm2d beta"
                    },
                    left: xs.clone(),
                    right: self.shape(v).to_vec(),
                });
            }
        }
        if state.channels() != c {
            return Err(Error::ShapeMismatch {
                op: "batchnorm2d state",
                left: xs,
                right: vec![state.channels()],
            });
        }
        let (n, hw) = (xs[0], xs[2] * xs[3]);
        let count = n * hw;
        let x = self.value(input).values();
        let (mean, inv_std, observed) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(invalid(
                        "batchnorm2d",
                        "train mode needs at least two values per channel",
                    ));
                }
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let mut sum = 0.0f64;
                    for s in 0..n {
                        sum += x[(s * c + ch) * hw..][..hw]
                            .iter()
                            .map(|&v| v as f64)
                            .sum::<f64>();
                    }
                    let mu = sum / count as f64;
                    let mut sq = 0.0f64;
                    for s in 0..n {
                        sq += x[(s * c + ch) * hw..][..hw]
                            .iter()
                            .map(|&v| (v as f64 - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = mu as f32;
                    var[ch] = (sq / count as f64) as f32;
                }
                let inv: Vec<f32> = var.iter().map(|v| 1.0 / (v + cfg.epsilon).sqrt()).collect();
                let unbiased = var
                    .iter()
                    .map(|v| v * count as f32 / (count - 1) as f32)
                    .collect();
                let obs = ObservedStats {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, inv, Some(obs))
            }
            Mode::Eval => {
                if !state.initialized {
                    return Err(Error::UninitializedStats);
                }
                let inv = state
                    .running_var
                    .iter()
                    .map(|v| 1.0 / (v + cfg.epsilon).sqrt())
                    .collect();
                (state.running_mean.clone(), inv, None)
            }
        };
        let g = self.value(gamma).values();
        let b = self.value(beta).values();
        let mut out = vec![0.0f32; x.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], g[ch], b[ch]);
                for (o, &v) in out[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                    *o = (v - mu) * is * ga + be;
                }
            }
        }
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let var = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            rg,
        );
        Ok((var, observed))
    }

    /// Per-channel `(x - shift) * scale` with constant coefficients.
    pub fn channel_affine(&mut self, input: Var, shift: &[f32], scale: &[f32]) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || shift.len() != xs[1] || scale.len() != xs[1] {
            return Err(Error::ShapeMismatch {
                op: "channel_affine",
                left: xs,
                right: vec![shift.len(), scale.len()],
            });
        }
        let (c, hw) = (xs[1], xs[2] * xs[3]);
        let x = self.value(input).values();
        let out = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                (v - shift[ch]) * scale[ch]
            })
            .collect();
        let value = Tensor::new(xs, out)?;
        let rg = self.rg(input);
        Ok(self.push(
            value,
            Op::ChannelAffine {
                input,
                scale: scale.to_vec(),
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let out = t.values().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(input);
        self.push(value, Op::Relu(input), rg)
    }

    /// `[N,C,H,W] -> [N,C]`
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(invalid(
                "global_avg_pool",
                format!("expected [N,C,H,W], got {xs:?}"),
            ));
        }
        let hw = xs[2] * xs[3];
        let out = self
            .value(input)
            .values()
            .chunks(hw)
            .map(|c| c.iter().sum::<f32>() / hw as f32)
            .collect();
        let value = Tensor::new(vec![xs[0], xs[1]], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::GlobalAvgPool(input), rg))
    }

    /// Max pooling without padding. Ties route to the first row-major index.
    pub fn max_pool2d(&mut self, input: Var, size: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || size == 0 || stride == 0 || xs[2] < size || xs[3] < size {
            return Err(invalid(
                "max_pool2d",
                format!("window {size} stride {stride} invalid for {xs:?}"),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
        let x = self.value(input).values();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..size {
                        for kx in 0..size {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, rg))
    }

    /// `[N, ...] -> [N, prod(...)]`
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input);
        if xs.is_empty() {
            return Err(invalid("flatten", "cannot flatten a scalar"));
        }
        let n = xs[0];
        let rest = xs[1..].iter().product();
        self.reshape(input, &[n, rest])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshaped(shape)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    /// Elementwise sum; used for residual joins.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ResidualMismatch {
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let t = self.value(input);
        let out = t.values().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(input);
        self.push(value, Op::Scale(input, factor), rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.value(input).values().iter().map(|&v| v as f64).sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s as f32), Op::Sum(input), rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: ls,
                right: vec![labels.len()],
            });
        }
        let (n, j) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= j) {
            return Err(invalid(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {j} classes"),
            ));
        }
        let z = self.value(logits).values();
        let mut probs = vec![0.0f32; n * j];
        let mut loss = 0.0f64;
        for (s, &y) in labels.iter().enumerate() {
            let row = &z[s * j..(s + 1) * j];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let denom: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
            for (p, &v) in probs[s * j..(s + 1) * j].iter_mut().zip(row) {
                *p = (((v - max) as f64).exp() / denom) as f32;
            }
            loss += denom.ln() - (row[y] - max) as f64;
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar((loss / n as f64) as f32),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    fn acc(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut Vec<f32> {
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Populates gradients of `loss` with respect to every node that
    /// requires one. Multiple uses of a node sum their contributions.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                self.grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f32]) -> Result<()> {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let want = |v: Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let gm = geometry;
                let xs = nodes[input.0].value.shape();
                let n = xs[0];
                let o = nodes[weight.0].value.shape()[0];
                let k = gm.patch_len();
                let p = gm.positions();
                let img = gm.channels * gm.height * gm.width;
                let wv = nodes[weight.0].value.values();
                let xv = nodes[input.0].value.values();
                if want(*bias) {
                    let gb = Self::acc(grads, *bias, o);
                    for oc in 0..o {
                        let total: f64 = (0..n)
                            .flat_map(|s| &g[(s * o + oc) * p..][..p])
                            .map(|&v| v as f64)
                            .sum();
                        gb[oc] += total as f32;
                    }
                }
                let need_w = want(*weight);
                let need_x = want(*input);
                let mut cols = vec![0.0f32; k * p];
                let mut dcols = vec![0.0f32; k * p];
                let mut gw = vec![0.0f32; if need_w { o * k } else { 0 }];
                let mut gx = vec![0.0f32; if need_x { xv.len() } else { 0 }];
                for s in 0..n {
                    let gs = &g[s * o * p..(s + 1) * o * p];
                    if need_w {
                        kernels::im2col(&xv[s * img..(s + 1) * img], gm, &mut cols);
                        kernels::gemm_abt_acc(gs, &cols, &mut gw, o, p, k);
                    }
                    if need_x {
                        dcols.fill(0.0);
                        kernels::gemm_atb_acc(wv, gs, &mut dcols, o, k, p);
                        kernels::col2im_acc(&dcols, gm, &mut gx[s * img..(s + 1) * img]);
                    }
                }
                if need_w {
                    add_into(Self::acc(grads, *weight, o * k), &gw);
                }
                if need_x {
                    add_into(Self::acc(grads, *input, xv.len()), &gx);
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let xs = nodes[input.0].value.shape();
                let (n, d) = (xs[0], xs[1]);
                let m = nodes[weight.0].value.shape()[1];
                if want(*bias) {
                    let gb = Self::acc(grads, *bias, m);
                    for row in g.chunks(m) {
                        add_into(gb, row);
                    }
                }
                if want(*weight) {
                    let xv = nodes[input.0].value.values();
                    let gw = Self::acc(grads, *weight, d * m);
                    kernels::gemm_atb_acc(xv, g, gw, n, d, m);
                }
                if want(*input) {
                    let wv = nodes[weight.0].value.values();
                    let gx = Self::acc(grads, *input, n * d);
                    kernels::gemm_abt_acc(g, wv, gx, n, m, d);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let xs = nodes[input.0].value.shape();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let count = (n * hw) as f64;
                let xv = nodes[input.0].value.values();
                let gam = nodes[gamma.0].value.values();
                // Channel reductions in f64: with batch statistics the input
                // gradient sums to zero per channel, and f32 accumulation
                // leaves visible residue in that cancellation.
                let xhat =
                    |t: usize, ch: usize| (xv[t] as f64 - mean[ch] as f64) * inv_std[ch] as f64;
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for t in off..off + hw {
                            dgamma[ch] += g[t] as f64 * xhat(t, ch);
                            dbeta[ch] += g[t] as f64;
                        }
                    }
                }
                if want(*input) {
                    let gx = Self::acc(grads, *input, xv.len());
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            let scale = gam[ch] as f64 * inv_std[ch] as f64;
                            for t in off..off + hw {
                                let d = if *batch_stats {
                                    scale
                                        * (g[t] as f64
                                            - dbeta[ch] / count
                                            - xhat(t, ch) * dgamma[ch] / count)
                                } else {
                                    scale * g[t] as f64
                                };
                                gx[t] += d as f32;
                            }
                        }
                    }
                }
                if want(*gamma) {
                    let d: Vec<f32> = dgamma.iter().map(|&v| v as f32).collect();
                    add_into(Self::acc(grads, *gamma, c), &d);
                }
                if want(*beta) {
                    let d: Vec<f32> = dbeta.iter().map(|&v| v as f32).collect();
                    add_into(Self::acc(grads, *beta, c), &d);
                }
            }
            Op::ChannelAffine { input, scale } => {
                if want(*input) {
                    let xs = nodes[input.0].value.shape();
                    let (c, hw) = (xs[1], xs[2] * xs[3]);
                    let gx = Self::acc(grads, *input, g.len());
                    for (t, (a, &b)) in gx.iter_mut().zip(g).enumerate() {
                        *a += b * scale[(t / hw) % c];
                    }
                }
            }
            Op::Relu(input) => {
                if want(*input) {
                    let xv = nodes[input.0].value.values();
                    let gx = Self::acc(grads, *input, g.len());
                    for ((a, &b), &x) in gx.iter_mut().zip(g).zip(xv) {
                        if x > 0.0 {
                            *a += b;
                        }
                    }
                }
            }
            Op::GlobalAvgPool(input) => {
                if want(*input) {
                    let xs = nodes[input.0].value.shape();
                    let hw = xs[2] * xs[3];
                    let gx = Self::acc(grads, *input, xs.iter().product());
                    for (plane, &b) in g.iter().enumerate() {
                        let v = b / hw as f32;
                        gx[plane * hw..(plane + 1) * hw]
                            .iter_mut()
                            .for_each(|a| *a += v);
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if want(*input) {
                    let len = nodes[input.0].value.len();
                    let gx = Self::acc(grads, *input, len);
                    for (&idx, &b) in argmax.iter().zip(g) {
                        gx[idx] += b;
                    }
                }
            }
            Op::Reshape(input) => {
                if want(*input) {
                    add_into(Self::acc(grads, *input, g.len()), g);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        add_into(Self::acc(grads, v, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.values();
                let bv = nodes[b.0].value.values();
                if want(*a) {
                    let ga = Self::acc(grads, *a, g.len());
                    for ((x, &gg), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gg * o;
                    }
                }
                if want(*b) {
                    let gb = Self::acc(grads, *b, g.len());
                    for ((x, &gg), &o) in gb.iter_mut().zip(g).zip(av) {
                        *x += gg * o;
                    }
                }
            }
            Op::Scale(input, factor) => {
                if want(*input) {
                    let gx = Self::acc(grads, *input, g.len());
                    for (a, &b) in gx.iter_mut().zip(g) {
                        *a += b * factor;
                    }
                }
            }
            Op::Sum(input) => {
                if want(*input) {
                    let len = nodes[input.0].value.len();
                    let gx = Self::acc(grads, *input, len);
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if want(*logits) {
                    let n = labels.len();
                    let j = probs.len() / n.max(1);
                    let gx = Self::acc(grads, *logits, probs.len());
                    let s = g[0] / n as f32;
                    for (row, &y) in labels.iter().enumerate() {
                        for col in 0..j {
                            let onehot = if col == y { 1.0 } else { 0.0 };
                            gx[row * j + col] += (probs[row * j + col] - onehot) * s;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Folds observed batch statistics into running estimates:
/// `running = (1 - momentum) * running + momentum * observed`.
pub fn update_running_stats(state: &mut BatchNormState, observed: &ObservedStats, momentum: f32) {
    for (r, m) in state.running_mean.iter_mut().zip(&observed.mean) {
        *r = (1.0 - momentum) * *r + momentum * m;
    }
    for (r, v) in state.running_var.iter_mut().zip(&observed.var_unbiased) {
        *r = (1.0 - momentum) * *r + momentum * v;
    }
    state.initialized = true;
}
