//! Tape-based reverse-mode differentiation over the small op set the
//! encoder-decoder needs.
//!
//! Every op is evaluated eagerly when it is recorded, so the tape order is
//! already a topological order and [`Graph::backward`] simply walks it in
//! reverse. Spatial ops accept `[C, H, W]` or batched `[N, C, H, W]` values
//! and return the same rank they were given.

pub mod kernels;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Element, Rng, Tensor, TensorError};
use kernels::ConvDims;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("expected a [C,H,W] or [N,C,H,W] value, got {0:?}")]
    BadRank(Vec<usize>),
    #[error("convolution expects {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("convolution weights must be [C_out, C_in, 3, 3] with bias [C_out], got {weight:?} and {bias:?}")]
    BadKernel { weight: Vec<usize>, bias: Vec<usize> },
    #[error("max-pooling needs even spatial extents, got {height}x{width}")]
    OddSpatial { height: usize, width: usize },
    #[error("spatial extents differ: {left:?} vs {right:?}")]
    SpatialMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("dropout rate must lie in [0, 1), got {0}")]
    InvalidRate(f64),
    #[error("leaky slope must lie in [0, 1), got {0}")]
    InvalidSlope(f64),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("no gradient recorded for node {0}; run backward first")]
    NoGradient(usize),
    #[error("mask has no valid pixels")]
    EmptyMask,
    #[error("mask must be binary (0 or 1), found {0}")]
    NonBinaryMask(f64),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    #[default]
    Infer,
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, dims: ConvDims },
    ConvLeaky { input: Var, weight: Var, bias: Var, dims: ConvDims, alpha: T },
    LeakyRelu { x: Var, alpha: T },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2 { x: Var, planes: usize, height: usize, width: usize },
    Concat { a: Var, b: Var },
    Dropout { x: Var, scale: Vec<T> },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Sum { x: Var },
    MaskedRmse { pred: Var, label: Tensor<T>, mask: Tensor<T>, valid: usize },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
}

/// `(n, c, h, w)` view of a 3-D or 4-D shape.
fn nchw(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(AutodiffError::BadRank(shape.to_vec())),
    }
}

fn with_nchw(like: &[usize], n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if like.len() == 3 {
        vec![c, h, w]
    } else {
        vec![n, c, h, w]
    }
}

pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, grad: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf whose gradient is kept after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Result<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref().ok_or(AutodiffError::NoGradient(v.0))
    }

    pub fn take_grad(&mut self, v: Var) -> Result<Tensor<T>> {
        self.nodes[v.0].grad.take().ok_or(AutodiffError::NoGradient(v.0))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (dims, value) = self.conv_value(input, weight, bias)?;
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(Op::Conv2d { input, weight, bias, dims }, value, rg))
    }

    /// Convolution followed by a Leaky ReLU, recorded as one node. Only the
    /// activated output is stored; its sign equals the pre-activation's.
    pub fn conv2d_leaky(&mut self, input: Var, weight: Var, bias: Var, alpha: T) -> Result<Var> {
        if !(alpha >= T::zero() && alpha < T::one()) {
            return Err(AutodiffError::InvalidSlope(alpha.as_f64()));
        }
        let (dims, mut value) = self.conv_value(input, weight, bias)?;
        for v in value.data_mut() {
            if *v <= T::zero() {
                *v = *v * alpha;
            }
        }
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(Op::ConvLeaky { input, weight, bias, dims, alpha }, value, rg))
    }

    fn conv_value(&self, input: Var, weight: Var, bias: Var) -> Result<(ConvDims, Tensor<T>)> {
        let xs = self.value(input).shape().to_vec();
        let (n, cin, h, w) = nchw(&xs)?;
        let ws = self.value(weight).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        let cout = match (ws.as_slice(), bs.as_slice()) {
            ([co, _, 3, 3], [cb]) if co == cb => *co,
            _ => return Err(AutodiffError::BadKernel { weight: ws, bias: bs }),
        };
        if ws[1] != cin {
            return Err(AutodiffError::ChannelMismatch { expected: ws[1], got: cin });
        }
        let dims = ConvDims { batch: n, in_channels: cin, out_channels: cout, height: h, width: w };
        let data = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            dims,
        );
        Ok((dims, Tensor::new(with_nchw(&xs, n, cout, h, w), data)?))
    }

    /// `max(alpha * x, x)`; the subgradient at 0 is `alpha`.
    pub fn leaky_relu(&mut self, x: Var, alpha: T) -> Result<Var> {
        if !(alpha >= T::zero() && alpha < T::one()) {
            return Err(AutodiffError::InvalidSlope(alpha.as_f64()));
        }
        let value = self.value(x).map(|v| if v > T::zero() { v } else { alpha * v });
        let rg = self.needs(&[x]);
        Ok(self.push(Op::LeakyRelu { x, alpha }, value, rg))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (n, c, h, w) = nchw(&xs)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(AutodiffError::OddSpatial { height: h, width: w });
        }
        let (data, argmax) = kernels::maxpool2_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::new(with_nchw(&xs, n, c, h / 2, w / 2), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::MaxPool2 { x, argmax }, value, rg))
    }

    /// Flat input index chosen by each output of a max-pool node.
    pub fn pool_argmax(&self, v: Var) -> Option<&[u32]> {
        match &self.nodes[v.0].op {
            Op::MaxPool2 { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (n, c, h, w) = nchw(&xs)?;
        let data = kernels::upsample2_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::new(with_nchw(&xs, n, c, 2 * h, 2 * w), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Upsample2 { x, planes: n * c, height: h, width: w }, value, rg))
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let (na, ca, ha, wa) = nchw(&sa)?;
        let (nb, cb, hb, wb) = nchw(&sb)?;
        if sa.len() != sb.len() || na != nb || ha != hb || wa != wb {
            return Err(AutodiffError::SpatialMismatch { left: sa, right: sb });
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(na * (ca + cb) * plane);
        for i in 0..na {
            data.extend_from_slice(&da[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&db[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::new(with_nchw(&sa, na, ca + cb, ha, wa), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Concat { a, b }, value, rg))
    }

    /// Inverted dropout. In [`Mode::Infer`], or with `rate == 0`, this is
    /// the identity and returns `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidRate(rate));
        }
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let scale: Vec<T> =
            (0..self.value(x).len()).map(|_| if rng.unit() < rate { T::zero() } else { keep }).collect();
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().zip(&scale).map(|(&v, &s)| v * s).collect(),
        )?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Dropout { x, scale }, value, rg))
    }

    /// Logistic sigmoid. Results are kept strictly inside `(0, 1)` even
    /// where the exact value rounds to an endpoint.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let hi = T::one().next_down();
        let lo = T::min_positive_value();
        let value = self.value(x).map(|v| {
            let s = if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            };
            s.max(lo).min(hi)
        });
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Sigmoid { x }, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add { a, b }, value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, value, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).mul(factor)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Scale { x, factor }, value, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum()?);
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Sum { x }, value, rg))
    }

    /// Root-mean-square error pooled over every pixel whose mask is 1.
    /// Masked-out pixels are skipped entirely, so neither their labels nor
    /// their predictions can influence the loss or any gradient.
    pub fn masked_rmse(&mut self, pred: Var, label: Tensor<T>, mask: Tensor<T>) -> Result<Var> {
        let ps = self.value(pred).shape().to_vec();
        for other in [label.shape(), mask.shape()] {
            if other != ps.as_slice() {
                return Err(TensorError::ShapeMismatch { left: ps.clone(), right: other.to_vec() }.into());
            }
        }
        let mut valid = 0usize;
        let mut sq = 0.0f64;
        for ((&p, &y), &m) in self.value(pred).data().iter().zip(label.data()).zip(mask.data()) {
            if m == T::one() {
                valid += 1;
                let d = (y - p).as_f64();
                sq += d * d;
            } else if m != T::zero() {
                return Err(AutodiffError::NonBinaryMask(m.as_f64()));
            }
        }
        if valid == 0 {
            return Err(AutodiffError::EmptyMask);
        }
        let value = Tensor::scalar(T::from_f64((sq / valid as f64).sqrt()));
        let rg = self.needs(&[pred]);
        Ok(self.push(Op::MaskedRmse { pred, label, mask, valid }, value, rg))
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(node.value.shape(), g.shape());
        match node.grad.as_mut() {
            None => node.grad = Some(g),
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
        }
    }

    /// Propagates adjoints from a scalar `loss` back to every node that
    /// requires a gradient. Adjoints of interior nodes are released once
    /// they have been pushed to their inputs; leaf gradients are kept.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let seed = Tensor::full(self.value(loss).shape(), T::one());
        self.accumulate(loss, seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            for (v, gv) in self.adjoints(i, g)? {
                self.accumulate(v, gv);
            }
        }
        Ok(())
    }

    /// Adjoints of node `i`'s inputs given its own adjoint `g`.
    fn adjoints(&self, i: usize, g: Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, dims } | Op::ConvLeaky { input, weight, bias, dims, .. } => {
                let (input, weight, bias, dims) = (*input, *weight, *bias, *dims);
                let g = match node.op {
                    Op::ConvLeaky { alpha, .. } => {
                        let data = node
                            .value
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&y, &d)| if y > T::zero() { d } else { alpha * d })
                            .collect();
                        Tensor::new(g.shape().to_vec(), data)?
                    }
                    _ => g,
                };
                let grads = kernels::conv2d_backward(
                    self.value(input).data(),
                    self.value(weight).data(),
                    g.data(),
                    dims,
                    self.nodes[input.0].requires_grad,
                );
                if let Some(gi) = grads.input {
                    let shape = self.value(input).shape().to_vec();
                    out.push((input, Tensor::new(shape, gi)?));
                }
                let ws = self.value(weight).shape().to_vec();
                out.push((weight, Tensor::new(ws, grads.weight)?));
                let bs = self.value(bias).shape().to_vec();
                out.push((bias, Tensor::new(bs, grads.bias)?));
            }
            Op::LeakyRelu { x, alpha } => {
                let (x, alpha) = (*x, *alpha);
                let xv = self.value(x);
                let data = xv.data().iter().zip(g.data()).map(|(&v, &d)| if v > T::zero() { d } else { alpha * d });
                let gx = Tensor::new(xv.shape().to_vec(), data.collect())?;
                out.push((x, gx));
            }
            Op::MaxPool2 { x, argmax } => {
                let x = *x;
                let mut gx = Tensor::zeros(self.value(x).shape());
                let buf = gx.data_mut();
                for (&idx, &d) in argmax.iter().zip(g.data()) {
                    buf[idx as usize] += d;
                }
                out.push((x, gx));
            }
            Op::Upsample2 { x, planes, height, width } => {
                let (x, planes, height, width) = (*x, *planes, *height, *width);
                let data = kernels::upsample2_backward(g.data(), planes, height, width);
                let gx = Tensor::new(self.value(x).shape().to_vec(), data)?;
                out.push((x, gx));
            }
            Op::Concat { a, b } => {
                let (a, b) = (*a, *b);
                let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
                let (n, ca, h, w) = nchw(&sa)?;
                let cb = nchw(&sb)?.1;
                let plane = h * w;
                let mut ga = Vec::with_capacity(n * ca * plane);
                let mut gb = Vec::with_capacity(n * cb * plane);
                for chunk in g.data().chunks_exact((ca + cb) * plane) {
                    ga.extend_from_slice(&chunk[..ca * plane]);
                    gb.extend_from_slice(&chunk[ca * plane..]);
                }
                out.push((a, Tensor::new(sa, ga)?));
                out.push((b, Tensor::new(sb, gb)?));
            }
            Op::Dropout { x, scale } => {
                let x = *x;
                let data = g.data().iter().zip(scale).map(|(&d, &s)| d * s).collect();
                let gx = Tensor::new(g.shape().to_vec(), data)?;
                out.push((x, gx));
            }
            Op::Sigmoid { x } => {
                let x = *x;
                let y = &node.value;
                let data = y.data().iter().zip(g.data()).map(|(&s, &d)| d * s * (T::one() - s)).collect();
                let gx = Tensor::new(g.shape().to_vec(), data)?;
                out.push((x, gx));
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                out.push((a, g.clone()));
                out.push((b, g));
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let ga = g.mul(self.value(b))?;
                let gb = g.mul(self.value(a))?;
                out.push((a, ga));
                out.push((b, gb));
            }
            Op::Scale { x, factor } => {
                let (x, factor) = (*x, *factor);
                out.push((x, g.mul(factor)?));
            }
            Op::Sum { x } => {
                let x = *x;
                let gx = Tensor::full(self.value(x).shape(), g.data()[0]);
                out.push((x, gx));
            }
            Op::MaskedRmse { pred, label, mask, valid } => {
                let pred = *pred;
                let loss = node.value.data()[0];
                let upstream = g.data()[0];
                let pv = self.value(pred);
                let gx = if loss == T::zero() {
                    Tensor::zeros(pv.shape())
                } else {
                    let denom = T::from_f64(*valid as f64) * loss;
                    let data = pv
                        .data()
                        .iter()
                        .zip(label.data())
                        .zip(mask.data())
                        .map(|((&p, &y), &m)| if m == T::one() { upstream * (p - y) / denom } else { T::zero() })
                        .collect();
                    Tensor::new(pv.shape().to_vec(), data)?
                };
                out.push((pred, gx));
            }
        }
        Ok(out)
    }
}
