//! The encoder-decoder network: layer layout, initialization, forward
//! passes and the latent feature map used for embedding.
//!
//! Default layout (two encoder blocks, 32 feature maps):
//!
//! ```text
//! enc_conv1 1->32, enc_conv2 32->32  ── skip1 (64x96)
//! maxpool, dropout
//! enc_conv3 32->32, enc_conv4 32->32 ── skip2 (32x48)
//! maxpool, dropout
//! lat_conv1, lat_conv2               ── latent (32x16x24)
//! upsample, concat skip2, dec_conv1 64->32, dec_conv2 32->32
//! upsample, concat skip1, dec_conv3 64->32, dec_conv4 32->32
//! out_conv 32->1, sigmoid
//! ```
//!
//! Every hidden convolution is followed by a Leaky ReLU.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Mode, Var};
use crate::tensor::{Element, Rng, Tensor, TensorError};

/// Half-width of the uniform weight initializer.
pub const INIT_RANGE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input {height}x{width} is not divisible by 2^{blocks}")]
    Indivisible { height: usize, width: usize, blocks: usize },
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("expected input shape {expected:?} (optionally batched), got {got:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("parameter layout does not match the config: {0}")]
    Layout(String),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Number of two-convolution blocks (each followed by a pool) in the encoder.
    pub encoder_blocks: usize,
    pub channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub leaky_alpha: f64,
    pub dropout: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { encoder_blocks: 2, channels: 32, input_height: 64, input_width: 96, leaky_alpha: 0.1, dropout: 0.5 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_blocks == 0 || self.channels == 0 {
            return Err(NetError::Config("encoder_blocks and channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_alpha) {
            return Err(NetError::Config(format!("leaky_alpha {} outside [0, 1)", self.leaky_alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NetError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        let f = 1usize << self.encoder_blocks;
        if self.input_height == 0 || self.input_width == 0 || self.input_height % f != 0 || self.input_width % f != 0 {
            return Err(NetError::Indivisible {
                height: self.input_height,
                width: self.input_width,
                blocks: self.encoder_blocks,
            });
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [1, self.input_height, self.input_width]
    }

    /// Shape of the bottleneck activation for one image.
    pub fn latent_shape(&self) -> [usize; 3] {
        let f = 1usize << self.encoder_blocks;
        [self.channels, self.input_height / f, self.input_width / f]
    }

    /// `(name, in_channels, out_channels)` for every convolution in order.
    pub fn layer_plan(&self) -> Vec<(String, usize, usize)> {
        let c = self.channels;
        let mut plan = Vec::new();
        for b in 0..self.encoder_blocks {
            plan.push((format!("enc_conv{}", 2 * b + 1), if b == 0 { 1 } else { c }, c));
            plan.push((format!("enc_conv{}", 2 * b + 2), c, c));
        }
        plan.push(("lat_conv1".to_string(), c, c));
        plan.push(("lat_conv2".to_string(), c, c));
        for b in 0..self.encoder_blocks {
            plan.push((format!("dec_conv{}", 2 * b + 1), 2 * c, c));
            plan.push((format!("dec_conv{}", 2 * b + 2), c, c));
        }
        plan.push(("out_conv".to_string(), c, 1));
        plan
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T = f32> {
    pub name: String,
    /// `[C_out, C_in, 3, 3]`
    pub weight: Tensor<T>,
    /// `[C_out]`
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams<T = f32> {
    pub config: NetConfig,
    pub layers: Vec<ConvLayer<T>>,
}

/// Graph handles for one bound copy of the parameters.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<(Var, Var)>,
}

impl BoundParams {
    /// All parameter handles in [`UNetParams::tensors`] order.
    pub fn flat(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().flat_map(|&(w, b)| [w, b])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NetOutputs {
    pub output: Var,
    pub latent: Var,
}

impl<T: Element> UNetParams<T> {
    /// Weights drawn from `U[-0.05, 0.05)`, biases zero.
    pub fn build(config: &NetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let lo = T::from_f64(-INIT_RANGE);
        let hi = T::from_f64(INIT_RANGE);
        let layers = config
            .layer_plan()
            .into_iter()
            .map(|(name, cin, cout)| {
                Ok(ConvLayer {
                    name,
                    weight: Tensor::uniform(rng, &[cout, cin, 3, 3], lo, hi)?,
                    bias: Tensor::zeros(&[cout]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config: config.clone(), layers })
    }

    pub fn zeros(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_plan()
            .into_iter()
            .map(|(name, cin, cout)| ConvLayer {
                name,
                weight: Tensor::zeros(&[cout, cin, 3, 3]),
                bias: Tensor::zeros(&[cout]),
            })
            .collect();
        Ok(Self { config: config.clone(), layers })
    }

    /// Checks that the layers match the config's plan in name and shape.
    pub fn check_layout(&self) -> Result<()> {
        self.config.validate()?;
        let plan = self.config.layer_plan();
        if plan.len() != self.layers.len() {
            return Err(NetError::Layout(format!("expected {} layers, found {}", plan.len(), self.layers.len())));
        }
        for ((name, cin, cout), layer) in plan.iter().zip(&self.layers) {
            if &layer.name != name
                || layer.weight.shape() != [*cout, *cin, 3, 3]
                || layer.bias.shape() != [*cout]
            {
                return Err(NetError::Layout(format!("layer {} does not match {name}", layer.name)));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Weight and bias tensors interleaved in layer order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn cast<U: Element>(&self) -> UNetParams<U> {
        UNetParams {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer { name: l.name.clone(), weight: l.weight.cast(), bias: l.bias.cast() })
                .collect(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self.layers.iter().map(|l| (g.param(l.weight.clone()), g.param(l.bias.clone()))).collect(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let expected = self.config.input_shape();
        let ok = match shape {
            [c, h, w] | [_, c, h, w] => [*c, *h, *w] == expected,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(NetError::InputShape { expected: expected.to_vec(), got: shape.to_vec() })
        }
    }

    /// Records the network on `g`. When `full` is false the graph stops at
    /// the latent map and `output` equals `latent`.
    fn record(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        x: Var,
        mode: Mode,
        rng: &Rng,
        full: bool,
    ) -> Result<NetOutputs> {
        self.check_input(g.value(x).shape())?;
        let alpha = T::from_f64(self.config.leaky_alpha);
        let blocks = self.config.encoder_blocks;
        let mut layer = bound.vars.iter();
        let mut conv = |g: &mut Graph<T>, h: Var, activate: bool| -> Result<Var> {
            let &(w, b) = layer.next().expect("layer plan covers every convolution");
            Ok(if activate { g.conv2d_leaky(h, w, b, alpha)? } else { g.conv2d(h, w, b)? })
        };

        let mut h = x;
        let mut skips = Vec::with_capacity(blocks);
        for b in 0..blocks {
            h = conv(g, h, true)?;
            h = conv(g, h, true)?;
            skips.push(h);
            h = g.maxpool2(h)?;
            h = g.dropout(h, self.config.dropout, mode, &mut rng.child(b as u64))?;
        }
        h = conv(g, h, true)?;
        h = conv(g, h, true)?;
        let latent = h;
        if !full {
            return Ok(NetOutputs { output: latent, latent });
        }
        for skip in skips.into_iter().rev() {
            h = g.upsample2(h)?;
            h = g.concat_channels(h, skip)?;
            h = conv(g, h, true)?;
            h = conv(g, h, true)?;
        }
        h = conv(g, h, false)?;
        let output = g.sigmoid(h)?;
        Ok(NetOutputs { output, latent })
    }

    /// Records a full forward pass on an existing graph. Dropout masks are
    /// drawn from children of `rng`, one per encoder block.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        x: Var,
        mode: Mode,
        rng: &Rng,
    ) -> Result<NetOutputs> {
        self.record(g, bound, x, mode, rng, true)
    }

    /// Network prediction for `[1, H, W]` or `[N, 1, H, W]` input.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode, rng: &Rng) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind_constants(&mut g);
        let xv = g.constant(x.clone());
        let out = self.record(&mut g, &bound, xv, mode, rng, true)?;
        Ok(g.value(out.output).clone())
    }

    /// The bottleneck activation (output of the last latent convolution).
    pub fn encode(&self, x: &Tensor<T>, mode: Mode, rng: &Rng) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind_constants(&mut g);
        let xv = g.constant(x.clone());
        let out = self.record(&mut g, &bound, xv, mode, rng, false)?;
        Ok(g.value(out.latent).clone())
    }

    fn bind_constants(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self
                .layers
                .iter()
                .map(|l| (g.constant(l.weight.clone()), g.constant(l.bias.clone())))
                .collect(),
        }
    }
}
