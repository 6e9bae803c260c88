//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value and whatever
//! it needs for the backward rule. Node ids are issued in creation order,
//! so the tape is always topologically sorted and [`Tape::backward`] walks it
//! once in reverse.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps the input's spatial size; needs stride 1 and odd kernels.
    Same,
    Explicit(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Kind of a recorded operation. Also used to pick the target of
/// [`Tape::inject_fault`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    MaxPool2d,
    Upsample2x,
    BatchNorm,
    Relu,
    Sigmoid,
    Concat,
    Add,
    Mul,
    Dropout,
    Sum,
    DiceLoss,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::Upsample2x => "upsample2x",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Concat => "concat",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Dropout => "dropout",
            OpKind::Sum => "sum",
            OpKind::DiceLoss => "dice_loss",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        use OpKind::*;
        [Leaf, Conv2d, MaxPool2d, Upsample2x, BatchNorm, Relu, Sigmoid, Concat, Add, Mul, Dropout, Sum, DiceLoss]
            .into_iter()
            .find(|k| k.name() == name)
    }
}

enum Op<T> {
    Leaf,
    Constant,
    Conv2d { x: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Upsample2x { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu { x: Var },
    Sigmoid { x: Var },
    Concat { xs: Vec<Var> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Dropout { x: Var, mask: Vec<T> },
    Sum { x: Var },
    DiceLoss { pred: Var, target: Vec<T>, stats: Vec<DiceStats>, smooth: f64 },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf | Op::Constant => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::Upsample2x { .. } => OpKind::Upsample2x,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Concat { .. } => OpKind::Concat,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Sum { .. } => OpKind::Sum,
            Op::DiceLoss { .. } => OpKind::DiceLoss,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct DiceStats {
    intersection: f64,
    pred_sum: f64,
    target_sum: f64,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Batch statistics computed by a train-mode batch normalization, returned
/// so the caller can update its running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Shape>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient buffer for `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v` as a tensor; zeros if `v` is off the loss path.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::from_vec(shape.0, g.to_vec()).expect("gradient matches node shape"),
            None => Tensor::zeros(shape.0),
        }
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), fault: None }
    }

    /// Halves every gradient the backward rule of `kind` emits. Negative
    /// control for the gradient checker; never set during training.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Hash of the branch taken by every piecewise op: the sign of each ReLU
    /// input and each max-pool argmax. Two evaluations of the same graph
    /// with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for chunk in self.value(*x).data().chunks(64) {
                        let bits = chunk.iter().enumerate().fold(0u64, |b, (i, &v)| b | (u64::from(v > T::zero()) << i));
                        bits.hash(&mut h);
                    }
                }
                Op::MaxPool2d { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf that never receives a gradient (network inputs, fixed masks).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let (n, cin, h, w) = self.shape(x).nchw_dims("conv2d")?;
        let (cout, wcin, kh, kw) = self.shape(weight).nchw_dims("conv2d")?;
        if cin != wcin {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} has {cin} channels but weight {:?} expects {wcin}", self.shape(x), self.shape(weight)),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel {kh}×{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if let Some(b) = bias {
            if self.shape(b).dims() != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?} must be [{cout}]", self.shape(b))));
            }
        }
        let pad = match padding {
            Padding::Same => {
                if stride != 1 || kh != kw {
                    return Err(Error::InvalidArgument("same padding needs stride 1 and a square kernel".into()));
                }
                (kh - 1) / 2
            }
            Padding::Explicit(p) => p,
        };
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", format!("kernel {kh}×{kw} larger than padded input {h}×{w}")));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_vec([n, cout, geom.ho, geom.wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, weight, bias, geom }))
    }

    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.shape(x).nchw_dims("maxpool2d")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2d", format!("spatial size {h}×{w} must be even")));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(x).data(), n, c, h, w);
        let value = Tensor::from_vec([n, c, h / 2, w / 2], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.shape(x).nchw_dims("upsample2x")?;
        let out = kernels::upsample2_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::from_vec([n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2x { x }))
    }

    fn check_bn_vectors(&self, c: usize, gamma: Var, beta: Var) -> Result<()> {
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v).dims() != [c] {
                return Err(Error::shape("batchnorm", format!("{name} {:?} must be [{c}]", self.shape(v))));
            }
        }
        Ok(())
    }

    /// Batch normalization with batch statistics.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let (n, c, h, w) = self.shape(x).nchw_dims("batchnorm")?;
        self.check_bn_vectors(c, gamma, beta)?;
        if n * h * w < 2 {
            return Err(Error::shape("batchnorm", format!("train mode needs ≥2 values per channel, got {}", n * h * w)));
        }
        let hw = h * w;
        let (mean, var) = kernels::channel_stats(self.value(x).data(), n, c, hw);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = self.normalize(x, gamma, beta, &mean, &inv_std, n, c, hw);
        let stats = BatchStats {
            mean: mean.iter().map(|&v| T::from_f64_lossy(v)).collect(),
            var: var.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        };
        let inv_std = inv_std.into_iter().map(T::from_f64_lossy).collect();
        let value = Tensor::from_vec([n, c, h, w], out)?;
        let v = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: true });
        Ok((v, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = self.shape(x).nchw_dims("batchnorm")?;
        self.check_bn_vectors(c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batchnorm", format!("running statistics must have {c} entries")));
        }
        let mean: Vec<f64> = running_mean.iter().map(|v| v.as_f64()).collect();
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v.as_f64() + eps).sqrt()).collect();
        let (out, xhat) = self.normalize(x, gamma, beta, &mean, &inv_std, n, c, h * w);
        let inv_std = inv_std.into_iter().map(T::from_f64_lossy).collect();
        let value = Tensor::from_vec([n, c, h, w], out)?;
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: false }))
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        n: usize,
        c: usize,
        hw: usize,
    ) -> (Vec<T>, Vec<T>) {
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); xs.len()];
        let mut xhat = vec![T::zero(); xs.len()];
        for bn in 0..n {
            for ch in 0..c {
                let base = (bn * c + ch) * hw;
                let (mu, is) = (mean[ch], inv_std[ch]);
                for i in base..base + hw {
                    let xh = T::from_f64_lossy((xs[i].as_f64() - mu) * is);
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        (out, xhat)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => {
                let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
                self.push(value, Op::Relu { x })
            }
            Activation::Sigmoid => {
                let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
                self.push(value, Op::Sigmoid { x })
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Concatenates along the channel axis, in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.len() < 2 {
            return Err(Error::shape("concat", format!("needs at least 2 inputs, got {}", xs.len())));
        }
        let (n, _, h, w) = self.shape(xs[0]).nchw_dims("concat")?;
        let mut channels = Vec::with_capacity(xs.len());
        for (i, &v) in xs.iter().enumerate() {
            let (vn, vc, vh, vw) = self.shape(v).nchw_dims("concat")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(
                    "concat",
                    format!("input {i} has shape {:?}, incompatible with input 0 {:?}", self.shape(v), self.shape(xs[0])),
                ));
            }
            channels.push(vc);
        }
        let total: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for bn in 0..n {
            for (&v, &c) in xs.iter().zip(&channels) {
                let src = self.value(v).data();
                out.extend_from_slice(&src[bn * c * hw..(bn + 1) * c * hw]);
            }
        }
        let value = Tensor::from_vec([n, total, h, w], out)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("operands {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(self.shape(a).0.clone(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(self.shape(a).0.clone(), data)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    /// Inverted dropout: kept values are scaled by `1/(1-rate)`. Identity in
    /// eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let scale = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> =
            (0..self.value(x).numel()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { scale }).collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_vec(self.shape(x).0.clone(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    /// Sum of all elements, as a `1×1×1×1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(0.0f64, |acc, v| acc + v.as_f64());
        self.push(Tensor::full([1, 1, 1, 1], T::from_f64_lossy(s)), Op::Sum { x })
    }

    /// Soft dice loss `1 − (2Σpt + s)/(Σp + Σt + s)` per image, averaged over
    /// the batch. `target` is a constant.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor<T>, smooth: f64) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape(
                "dice_loss",
                format!("prediction {:?} vs target {:?}", self.shape(pred), target.shape()),
            ));
        }
        let n = self.shape(pred).dims().first().copied().unwrap_or(1).max(1);
        let per = target.numel() / n;
        let p = self.value(pred).data();
        let t = target.data();
        let mut stats = Vec::with_capacity(n);
        let mut loss = 0.0;
        for b in 0..n {
            let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
            for i in b * per..(b + 1) * per {
                let (pv, tv) = (p[i].as_f64(), t[i].as_f64());
                inter += pv * tv;
                sp += pv;
                st += tv;
            }
            loss += 1.0 - (2.0 * inter + smooth) / (sp + st + smooth);
            stats.push(DiceStats { intersection: inter, pred_sum: sp, target_sum: st });
        }
        let value = Tensor::full([1, 1, 1, 1], T::from_f64_lossy(loss / n as f64));
        Ok(self.push(value, Op::DiceLoss { pred, target: t.to_vec(), stats, smooth }))
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contribs = self.node_backward(node, &g);
            if self.fault == Some(node.op.kind()) {
                let half = T::from_f64_lossy(0.5);
                for (_, c) in contribs.iter_mut() {
                    c.iter_mut().for_each(|v| *v *= half);
                }
            }
            for (v, c) in contribs {
                debug_assert!(v.0 < i, "tape out of topological order");
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn node_backward(&self, node: &Node<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::Conv2d { x, weight, bias, geom } => {
                let need_dx = !self.is_const_leaf(*x);
                let cg = kernels::conv2d_backward(geom, self.value(*x).data(), self.value(*weight).data(), g, need_dx);
                let mut out = vec![(*weight, cg.dweight)];
                if let Some(dx) = cg.dx {
                    out.push((*x, dx));
                }
                if let Some(b) = bias {
                    out.push((*b, cg.dbias));
                }
                out
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&i, &gv) in argmax.iter().zip(g) {
                    dx[i] += gv;
                }
                vec![(*x, dx)]
            }
            Op::Upsample2x { x } => {
                let d = self.value(*x).dims();
                vec![(*x, kernels::upsample2_backward(g, d[0] * d[1], d[2], d[3]))]
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let d = self.value(*x).dims();
                let (n, c, hw) = (d[0], d[1], d[2] * d[3]);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); g.len()];
                let m = (n * hw) as f64;
                for ch in 0..c {
                    let (mut sg, mut sgx) = (0.0f64, 0.0f64);
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            sg += g[i].as_f64();
                            sgx += g[i].as_f64() * xhat[i].as_f64();
                        }
                    }
                    dbeta[ch] = T::from_f64_lossy(sg);
                    dgamma[ch] = T::from_f64_lossy(sgx);
                    let gm = gam[ch].as_f64();
                    let is = inv_std[ch].as_f64();
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            let v = if *train {
                                gm * is / m * (m * g[i].as_f64() - sg - xhat[i].as_f64() * sgx)
                            } else {
                                gm * is * g[i].as_f64()
                            };
                            dx[i] = T::from_f64_lossy(v);
                        }
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Relu { x } => {
                let xs = self.value(*x).data();
                let dx = xs.iter().zip(g).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect();
                vec![(*x, dx)]
            }
            Op::Sigmoid { x } => {
                let ys = node.value.data();
                let dx = ys.iter().zip(g).map(|(&y, &gv)| gv * y * (T::one() - y)).collect();
                vec![(*x, dx)]
            }
            Op::Concat { xs } => {
                let d = node.value.dims();
                let (n, total, hw) = (d[0], d[1], d[2] * d[3]);
                let mut offset = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &v in xs {
                    let c = self.value(v).dims()[1];
                    let mut dx = Vec::with_capacity(n * c * hw);
                    for b in 0..n {
                        let start = (b * total + offset) * hw;
                        dx.extend_from_slice(&g[start..start + c * hw]);
                    }
                    offset += c;
                    out.push((v, dx));
                }
                out
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                vec![
                    (*a, g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect()),
                    (*b, g.iter().zip(av).map(|(&gv, &x)| gv * x).collect()),
                ]
            }
            Op::Dropout { x, mask } => vec![(*x, g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect())],
            Op::Sum { x } => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::DiceLoss { pred, target, stats, smooth } => {
                let n = stats.len();
                let per = target.len() / n;
                let upstream = g[0].as_f64();
                let mut dp = vec![T::zero(); target.len()];
                for (b, s) in stats.iter().enumerate() {
                    let denom = s.pred_sum + s.target_sum + smooth;
                    let numer = 2.0 * s.intersection + smooth;
                    for i in b * per..(b + 1) * per {
                        let t = target[i].as_f64();
                        let d = -(2.0 * t * denom - numer) / (denom * denom) / n as f64;
                        dp[i] = T::from_f64_lossy(upstream * d);
                    }
                }
                vec![(*pred, dp)]
            }
        }
    }

    fn is_const_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Constant)
    }
}
