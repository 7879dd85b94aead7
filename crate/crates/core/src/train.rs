//! Training: masked loss, Adam, plateau learning-rate reduction,
//! augmentation, the epoch loop and the hyperparameter grid search.
//!
//! Every random choice is drawn from a stream addressed by
//! `(seed, purpose, epoch, index)`, so a run is reproducible from its seed
//! and resuming at an epoch boundary continues the same trajectory.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Mode};
use crate::dataio::{binarize, Checkpoint, Sample};
use crate::tensor::{Element, Rng, Tensor, TensorError};
use crate::unet::{NetConfig, NetError, UNetParams};

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

pub const MAX_CROP: f64 = 0.05;
pub const CONTRAST_RANGE: (f64, f64) = (0.5, 1.5);
pub const MAX_ROTATION_DEG: f64 = 10.0;
pub const MAX_SHIFT_LATERAL: f64 = 0.5;
pub const MAX_SHIFT_AXIAL: f64 = 0.1;

/// Sampling positions closer than this to a pixel centre are snapped to it.
const SNAP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid augmentation parameters: {0}")]
    Augment(String),
    #[error("epoch {epoch}, batch {batch}: no valid pixels in the batch")]
    EmptyMask { epoch: usize, batch: usize },
    #[error("epoch {epoch}, batch {batch}: non-finite loss {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("non-finite gradient in parameter tensor {0}")]
    NonFiniteGradient(usize),
    #[error("gradient count {grads} does not match parameter count {params}")]
    GradientCount { grads: usize, params: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training and validation share patients: {0:?}")]
    PatientOverlap(Vec<String>),
    #[error("checkpoint lacks optimizer or scheduler state")]
    NotResumable,
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Probability that a sample is augmented in a given epoch.
    pub augment_fraction: f64,
    /// Probability of mirroring once a sample is selected for augmentation.
    pub mirror_probability: f64,
    /// Pixels with confidence strictly above this take part in the loss.
    pub confidence_threshold: f64,
    pub learning_rate: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    /// Absolute decrease of the epoch loss that counts as an improvement.
    pub plateau_threshold: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 2100,
            augment_fraction: 0.9,
            mirror_probability: 0.5,
            confidence_threshold: 0.75,
            learning_rate: 1e-3,
            plateau_patience: 10,
            plateau_factor: 0.5,
            min_lr: 1e-6,
            plateau_threshold: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.augment_fraction) || !(0.0..=1.0).contains(&self.mirror_probability) {
            return bad("augment_fraction and mirror_probability must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return bad("confidence_threshold must lie in [0, 1]");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.learning_rate) {
            return bad("need 0 <= min_lr <= learning_rate and learning_rate > 0");
        }
        if self.plateau_patience == 0 || !(self.plateau_threshold >= 0.0) {
            return bad("plateau_patience must be positive and plateau_threshold non-negative");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2) && self.adam_epsilon > 0.0) {
            return bad("adam betas must lie in [0, 1) and epsilon must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, epsilon: self.adam_epsilon }
    }

    pub fn scheduler(&self) -> PlateauScheduler {
        PlateauScheduler {
            lr: self.learning_rate,
            best: None,
            wait: 0,
            patience: self.plateau_patience,
            factor: self.plateau_factor,
            min_lr: self.min_lr,
            threshold: self.plateau_threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Number of updates applied so far.
    pub step: u64,
    pub lr: f64,
}

impl<T: Element> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, lr: f64) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { v: m.clone(), m, step: 0, lr }
    }
}

/// One bias-corrected Adam update. Fails without touching anything if a
/// gradient is non-finite.
pub fn adam_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    hp: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::GradientCount { grads: grads.len(), params: params.len() });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch { left: p.shape().to_vec(), right: g.shape().to_vec() }.into());
        }
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient(i));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let g = g.as_f64();
            let m1 = hp.beta1 * m.as_f64() + (1.0 - hp.beta1) * g;
            let v1 = hp.beta2 * v.as_f64() + (1.0 - hp.beta2) * g * g;
            *m = T::from_f64(m1);
            *v = T::from_f64(v1);
            let update = state.lr * (m1 / c1) / ((v1 / c2).sqrt() + hp.epsilon);
            *p = T::from_f64(p.as_f64() - update);
        }
    }
    Ok(())
}

/// Halves (by `factor`) the learning rate after `patience` epochs without an
/// improvement larger than `threshold`, never going below `min_lr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub best: Option<f64>,
    /// Epochs since the last improvement.
    pub wait: usize,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    pub threshold: f64,
}

impl PlateauScheduler {
    /// Records one epoch's loss and returns the learning rate for the next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        match self.best {
            Some(best) if !(loss < best - self.threshold) => {
                self.wait += 1;
                if self.wait >= self.patience {
                    self.lr = (self.lr * self.factor).max(self.min_lr);
                    self.wait = 0;
                }
            }
            _ => {
                self.best = Some(loss);
                self.wait = 0;
            }
        }
        self.lr
    }
}

/// One draw of the geometric and contrast transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub mirror: bool,
    /// Fractions removed from the left, right, top and bottom before
    /// resizing back to the full frame.
    pub crop: [f64; 4],
    pub contrast: f64,
    pub rotation_deg: f64,
    /// Translation as a fraction of the width.
    pub shift_lateral: f64,
    /// Translation as a fraction of the height.
    pub shift_axial: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self { mirror: false, crop: [0.0; 4], contrast: 1.0, rotation_deg: 0.0, shift_lateral: 0.0, shift_axial: 0.0 }
    }

    /// Every component drawn uniformly from its range; mirroring with
    /// probability `mirror_probability`.
    pub fn sample(rng: &mut Rng, mirror_probability: f64) -> Self {
        Self {
            mirror: rng.bernoulli(mirror_probability),
            crop: [(); 4].map(|_| rng.range(0.0, MAX_CROP)),
            contrast: rng.range(CONTRAST_RANGE.0, CONTRAST_RANGE.1),
            rotation_deg: rng.range(-MAX_ROTATION_DEG, MAX_ROTATION_DEG),
            shift_lateral: rng.range(-MAX_SHIFT_LATERAL, MAX_SHIFT_LATERAL),
            shift_axial: rng.range(-MAX_SHIFT_AXIAL, MAX_SHIFT_AXIAL),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let within = |v: f64, lo: f64, hi: f64| v >= lo && v <= hi;
        let checks = [
            (self.crop.iter().all(|&c| within(c, 0.0, MAX_CROP)), "crop"),
            (within(self.contrast, CONTRAST_RANGE.0, CONTRAST_RANGE.1), "contrast"),
            (within(self.rotation_deg, -MAX_ROTATION_DEG, MAX_ROTATION_DEG), "rotation"),
            (within(self.shift_lateral, -MAX_SHIFT_LATERAL, MAX_SHIFT_LATERAL), "lateral shift"),
            (within(self.shift_axial, -MAX_SHIFT_AXIAL, MAX_SHIFT_AXIAL), "axial shift"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, what)) => Err(TrainError::Augment(format!("{what} out of range in {self:?}"))),
            None => Ok(()),
        }
    }

    /// Source coordinate `(y, x)` that output pixel `(y, x)` samples.
    /// The forward transform is crop-and-resize, then shift, then rotation
    /// about the frame centre, then mirroring; this walks it backwards.
    pub fn source(&self, y: usize, x: usize, height: usize, width: usize) -> (f64, f64) {
        let (h, w) = ((height - 1) as f64, (width - 1) as f64);
        let x = if self.mirror { w - x as f64 } else { x as f64 };
        let (cy, cx) = (h / 2.0, w / 2.0);
        let (dy, dx) = (y as f64 - cy, x - cx);
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let xr = cx + cos * dx + sin * dy;
        let yr = cy - sin * dx + cos * dy;
        let xs = xr - self.shift_lateral * width as f64;
        let ys = yr - self.shift_axial * height as f64;
        let [left, right, top, bottom] = self.crop;
        let snap = |v: f64| if (v - v.round()).abs() < SNAP { v.round() } else { v };
        (snap(top * h + ys * (1.0 - top - bottom)), snap(left * w + xs * (1.0 - left - right)))
    }
}

/// A training pair with its binarized confidence mask, all `[1, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub bmode: Tensor<f32>,
    pub label: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Example {
    pub fn from_sample(s: &Sample, threshold: f64) -> Self {
        Self { bmode: s.bmode.clone(), label: s.elasticity.clone(), mask: binarize(&s.confidence, threshold) }
    }
}

/// Applies one coordinate map to image, label and mask (bilinear for the
/// first two, zero outside the frame) and contrast to the image only. A
/// pixel stays valid only if every source pixel with nonzero interpolation
/// weight is inside the frame and valid.
pub fn augment(ex: &Example, p: &AugmentParams) -> Result<Example> {
    p.validate()?;
    let (h, w) = match ex.bmode.shape() {
        [1, h, w] => (*h, *w),
        s => return Err(TrainError::Augment(format!("expected [1, H, W], got {s:?}"))),
    };
    for t in [&ex.label, &ex.mask] {
        if t.shape() != ex.bmode.shape() {
            return Err(TensorError::ShapeMismatch { left: ex.bmode.shape().to_vec(), right: t.shape().to_vec() }.into());
        }
    }
    let (bm, lb, mk) = (ex.bmode.data(), ex.label.data(), ex.mask.data());
    let mut bmode = Vec::with_capacity(h * w);
    let mut label = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = p.source(y, x, h, w);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (mut b, mut l, mut valid) = (0.0f64, 0.0f64, true);
            for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    let wt = wy * wx;
                    if wt <= 0.0 {
                        continue;
                    }
                    let (yy, xx) = (y0 + dy, x0 + dx);
                    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                        valid = false;
                        continue;
                    }
                    let i = yy as usize * w + xx as usize;
                    b += wt * bm[i] as f64;
                    l += wt * lb[i] as f64;
                    valid &= mk[i] == 1.0;
                }
            }
            bmode.push(b as f32);
            label.push(l as f32);
            mask.push(if valid { 1.0 } else { 0.0 });
        }
    }
    if p.contrast != 1.0 {
        let mu = bmode.iter().map(|&v| v as f64).sum::<f64>() / bmode.len() as f64;
        for v in &mut bmode {
            *v = (mu + p.contrast * (*v as f64 - mu)).clamp(0.0, 1.0) as f32;
        }
    }
    let shape = ex.bmode.shape().to_vec();
    Ok(Example {
        bmode: Tensor::new(shape.clone(), bmode)?,
        label: Tensor::new(shape.clone(), label)?,
        mask: Tensor::new(shape, mask)?,
    })
}

/// The example as seen in `epoch`: augmented with probability
/// `augment_fraction`, using the stream for `(seed, epoch, index)`.
pub fn epoch_example(ex: &Example, index: usize, epoch: usize, config: &TrainConfig) -> Result<Example> {
    let mut rng = Rng::derive(config.seed, &[STREAM_AUGMENT, epoch as u64, index as u64]);
    if config.augment_fraction > 0.0 && rng.bernoulli(config.augment_fraction) {
        augment(ex, &AugmentParams::sample(&mut rng, config.mirror_probability))
    } else {
        Ok(ex.clone())
    }
}

/// Masked RMSE pooled over every valid pixel of the batch, recorded on `g`.
pub fn masked_rmse<T: Element>(
    g: &mut Graph<T>,
    pred: crate::autodiff::Var,
    label: Tensor<T>,
    mask: Tensor<T>,
) -> std::result::Result<crate::autodiff::Var, AutodiffError> {
    g.masked_rmse(pred, label, mask)
}

fn stack(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    Ok(Tensor::stack(items)?)
}

/// One pass over `data`: seeded shuffle, batches of `batch_size` (the last
/// may be shorter), augmentation, dropout, one Adam update per batch.
/// Returns the mean batch loss.
pub fn train_epoch(
    data: &[Example],
    params: &mut UNetParams<f32>,
    config: &TrainConfig,
    optimizer: &mut AdamState<f32>,
    epoch: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    Rng::derive(config.seed, &[STREAM_SHUFFLE, epoch as u64]).shuffle(&mut order);
    let hp = config.adam();
    let mut total = 0.0;
    let mut batches = 0usize;
    for (batch, idx) in order.chunks(config.batch_size).enumerate() {
        let examples = idx.iter().map(|&i| epoch_example(&data[i], i, epoch, config)).collect::<Result<Vec<_>>>()?;
        let x = stack(&examples.iter().map(|e| &e.bmode).collect::<Vec<_>>())?;
        let label = stack(&examples.iter().map(|e| &e.label).collect::<Vec<_>>())?;
        let mask = stack(&examples.iter().map(|e| &e.mask).collect::<Vec<_>>())?;
        drop(examples);

        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let xv = g.constant(x);
        let dropout_rng = Rng::derive(config.seed, &[STREAM_DROPOUT, epoch as u64, batch as u64]);
        let out = params.forward_graph(&mut g, &bound, xv, Mode::Train, &dropout_rng)?;
        let loss = match masked_rmse(&mut g, out.output, label, mask) {
            Err(AutodiffError::EmptyMask) => return Err(TrainError::EmptyMask { epoch, batch }),
            other => other?,
        };
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch, loss: value });
        }
        g.backward(loss)?;
        let grads = bound.flat().map(|v| g.take_grad(v)).collect::<std::result::Result<Vec<_>, _>>()?;
        drop(g);
        let mut targets: Vec<&mut Tensor<f32>> = params.tensors_mut().collect();
        adam_step(&mut targets, &grads, optimizer, &hp)?;
        total += value;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Masked RMSE pooled over all valid pixels of `data`, in infer mode.
pub fn evaluate_rmse(params: &UNetParams<f32>, data: &[Example]) -> Result<f64> {
    const CHUNK: usize = 16;
    let mut sq = 0.0f64;
    let mut count = 0usize;
    let rng = Rng::new(0);
    for chunk in data.chunks(CHUNK) {
        let x = stack(&chunk.iter().map(|e| &e.bmode).collect::<Vec<_>>())?;
        let pred = params.forward(&x, Mode::Infer, &rng)?;
        let per_image = pred.len() / chunk.len();
        for (e, p) in chunk.iter().zip(pred.data().chunks(per_image)) {
            for ((&p, &y), &m) in p.iter().zip(e.label.data()).zip(e.mask.data()) {
                if m == 1.0 {
                    let d = (y - p) as f64;
                    sq += d * d;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(AutodiffError::EmptyMask.into());
    }
    Ok((sq / count as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based index of the epoch just completed.
    pub epoch: usize,
    pub loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Learning rate for the next epoch.
    pub next_lr: f64,
}

/// Parameters plus all state that changes between epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub params: UNetParams<f32>,
    pub config: TrainConfig,
    pub optimizer: AdamState<f32>,
    pub scheduler: PlateauScheduler,
    /// Completed epochs.
    pub epoch: usize,
    pub losses: Vec<f64>,
}

impl Trainer {
    /// Fresh parameters initialized from the config seed.
    pub fn new(net: &NetConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = UNetParams::build(net, &mut Rng::derive(config.seed, &[STREAM_INIT]))?;
        let optimizer = AdamState::new(params.tensors(), config.learning_rate);
        Ok(Self { params, scheduler: config.scheduler(), optimizer, config, epoch: 0, losses: Vec::new() })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: Checkpoint) -> Result<Self> {
        let (Some(optimizer), Some(scheduler), Some(config)) = (ck.optimizer, ck.scheduler, ck.train_config) else {
            return Err(TrainError::NotResumable);
        };
        config.validate()?;
        Ok(Self { params: ck.params, config, optimizer, scheduler, epoch: ck.epoch, losses: ck.losses })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            seed: self.config.seed,
            epoch: self.epoch,
            optimizer: Some(self.optimizer.clone()),
            scheduler: Some(self.scheduler.clone()),
            train_config: Some(self.config.clone()),
            losses: self.losses.clone(),
        }
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn step_epoch(&mut self, data: &[Example]) -> Result<EpochStats> {
        let lr = self.optimizer.lr;
        let loss = train_epoch(data, &mut self.params, &self.config, &mut self.optimizer, self.epoch)?;
        let next_lr = self.scheduler.observe(loss);
        self.optimizer.lr = next_lr;
        self.epoch += 1;
        self.losses.push(loss);
        Ok(EpochStats { epoch: self.epoch, loss, lr, next_lr })
    }

    /// Runs the remaining epochs, reporting each one to `on_epoch`.
    pub fn run(&mut self, data: &[Example], mut on_epoch: impl FnMut(&Self, &EpochStats)) -> Result<()> {
        while !self.finished() {
            let stats = self.step_epoch(data)?;
            on_epoch(self, &stats);
        }
        Ok(())
    }
}

/// The grid of batch sizes, encoder depths and epoch counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub batch_sizes: Vec<usize>,
    pub encoder_blocks: Vec<usize>,
    pub epochs: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { batch_sizes: vec![16, 32, 64], encoder_blocks: vec![2, 3, 4], epochs: vec![2100, 2450, 2800] }
    }
}

impl GridSpec {
    /// Same grid with every epoch count multiplied by `scale` and rounded
    /// (at least one epoch).
    pub fn scaled(&self, scale: f64) -> Self {
        Self {
            epochs: self.epochs.iter().map(|&e| ((e as f64 * scale).round() as usize).max(1)).collect(),
            ..self.clone()
        }
    }

    pub fn cells(&self) -> usize {
        self.batch_sizes.len() * self.encoder_blocks.len() * self.epochs.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub batch_size: usize,
    pub encoder_blocks: usize,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub validation_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    /// Index into `rows` of the lowest validation RMSE (first on ties).
    pub best: usize,
}

impl GridReport {
    pub fn best_row(&self) -> &GridRow {
        &self.rows[self.best]
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:>6} {:>6} {:>7} {:>12} {:>12}\n", "batch", "blocks", "epochs", "train_loss", "val_rmse");
        for (i, r) in self.rows.iter().enumerate() {
            s += &format!(
                "{:>6} {:>6} {:>7} {:>12.6} {:>12.6}{}\n",
                r.batch_size,
                r.encoder_blocks,
                r.epochs,
                r.final_train_loss,
                r.validation_rmse,
                if i == self.best { "  *" } else { "" }
            );
        }
        s
    }
}

/// Trains every grid cell on `train` and scores it on `validation`.
///
/// Cells that differ only in epoch count share one trajectory: training is
/// deterministic and the epoch count does not affect earlier epochs, so the
/// model after `e` epochs of the longest run is exactly the `e`-epoch cell.
pub fn grid_search(
    train: &[Sample],
    validation: &[Sample],
    net: &NetConfig,
    config: &TrainConfig,
    grid: &GridSpec,
    mut on_row: impl FnMut(&GridRow),
) -> Result<GridReport> {
    if train.is_empty() || validation.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let train_ids: BTreeSet<&str> = train.iter().map(|s| s.patient_id.as_str()).collect();
    let overlap: Vec<String> = validation
        .iter()
        .map(|s| s.patient_id.as_str())
        .filter(|p| train_ids.contains(p))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(String::from)
        .collect();
    if !overlap.is_empty() {
        return Err(TrainError::PatientOverlap(overlap));
    }
    let threshold = config.confidence_threshold;
    let train_ex: Vec<Example> = train.iter().map(|s| Example::from_sample(s, threshold)).collect();
    let val_ex: Vec<Example> = validation.iter().map(|s| Example::from_sample(s, threshold)).collect();
    let mut stops = grid.epochs.clone();
    stops.sort_unstable();
    stops.dedup();

    let mut rows = Vec::with_capacity(grid.cells());
    for &batch_size in &grid.batch_sizes {
        for &encoder_blocks in &grid.encoder_blocks {
            let net = NetConfig { encoder_blocks, ..net.clone() };
            let cfg = TrainConfig { batch_size, epochs: *stops.last().unwrap_or(&0), ..config.clone() };
            let mut trainer = Trainer::new(&net, cfg)?;
            let mut scored = Vec::with_capacity(stops.len());
            for &stop in &stops {
                while trainer.epoch < stop {
                    trainer.step_epoch(&train_ex)?;
                }
                let rmse = evaluate_rmse(&trainer.params, &val_ex)?;
                scored.push((stop, trainer.losses.last().copied().unwrap_or(f64::NAN), rmse));
            }
            for &epochs in &grid.epochs {
                let &(_, loss, rmse) = scored.iter().find(|s| s.0 == epochs).expect("every epoch count was scored");
                let row = GridRow { batch_size, encoder_blocks, epochs, final_train_loss: loss, validation_rmse: rmse };
                on_row(&row);
                rows.push(row);
            }
        }
    }
    let best = rows
        .iter()
        .enumerate()
        .fold(0, |best, (i, r)| if r.validation_rmse < rows[best].validation_rmse { i } else { best });
    Ok(GridReport { rows, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Profile;

    fn indicator(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(&[1, h, w], |_| if rng.bernoulli(0.3) { 1.0 } else { 0.0 })
    }

    fn example(h: usize, w: usize, seed: u64) -> Example {
        let mut rng = Rng::new(seed);
        Example {
            bmode: Tensor::uniform(&mut rng, &[1, h, w], 0.0, 1.0).unwrap(),
            label: Tensor::uniform(&mut rng, &[1, h, w], 0.0, 1.0).unwrap(),
            mask: Tensor::ones(&[1, h, w]),
        }
    }

    #[test]
    fn adam_first_step_is_lr_in_magnitude() {
        let mut p = Tensor::<f64>::new(vec![3], vec![0.3, -0.2, 1.0]).unwrap();
        let g = Tensor::<f64>::new(vec![3], vec![5.0, -0.7, 120.0]).unwrap();
        let mut st = AdamState::new([&p], 1e-3);
        let before = p.clone();
        adam_step(&mut [&mut p], &[g.clone()], &mut st, &AdamConfig::default()).unwrap();
        for ((a, b), g) in p.data().iter().zip(before.data()).zip(g.data()) {
            let delta = a - b;
            assert_eq!(delta.signum(), -g.signum());
            assert!((delta.abs() - 1e-3).abs() < 1e-3 * 1e-6);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = Tensor::<f64>::new(vec![2], vec![0.5, -0.5]).unwrap();
        let mut st = AdamState::new([&p], 1e-2);
        for _ in 0..50 {
            adam_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.data(), &[0.5, -0.5]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_untouched() {
        let mut p = Tensor::<f32>::ones(&[2]);
        let mut st = AdamState::new([&p], 1e-3);
        let g = Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(
            adam_step(&mut [&mut p], &[g], &mut st, &AdamConfig::default()),
            Err(TrainError::NonFiniteGradient(0))
        ));
        assert_eq!(st.step, 0);
        assert_eq!(p, Tensor::ones(&[2]));
    }

    #[test]
    fn plateau_halves_after_patience() {
        let mut s = TrainConfig::default().scheduler();
        for k in 0..30 {
            assert_eq!(s.observe(1.0 - 0.01 * k as f64), 1e-3);
        }
        // epoch k sets the best; ten flat epochs follow
        let flat = 0.5;
        assert_eq!(s.observe(flat), 1e-3);
        for i in 1..=10 {
            let lr = s.observe(flat);
            if i < 10 {
                assert_eq!(lr, 1e-3);
            } else {
                assert_eq!(lr, 5e-4);
            }
        }
        // improvements smaller than the threshold do not count
        for _ in 0..9 {
            s.observe(flat - 1e-7);
        }
        assert_eq!(s.observe(flat - 2e-7), 2.5e-4);
    }

    #[test]
    fn plateau_respects_floor() {
        let mut s = TrainConfig::default().scheduler();
        for _ in 0..10_000 {
            assert!(s.observe(1.0) >= 1e-6);
        }
        assert_eq!(s.lr, 1e-6);
    }

    #[test]
    fn identity_augmentation_is_exact() {
        let ex = example(8, 12, 1);
        assert_eq!(augment(&ex, &AugmentParams::identity()).unwrap(), ex);
    }

    #[test]
    fn mirror_is_an_involution() {
        let ex = example(8, 12, 2);
        let m = AugmentParams { mirror: true, ..AugmentParams::identity() };
        let once = augment(&ex, &m).unwrap();
        assert_ne!(once, ex);
        assert_eq!(once.bmode.data()[0], ex.bmode.data()[11]);
        assert_eq!(augment(&once, &m).unwrap(), ex);
    }

    #[test]
    fn lateral_shift_moves_mask() {
        let (h, w) = (64, 96);
        let mut ex = example(h, w, 3);
        ex.mask = indicator(h, w, 4);
        let p = AugmentParams { shift_lateral: 10.0 / w as f64, ..AugmentParams::identity() };
        let out = augment(&ex, &p).unwrap();
        for y in 0..h {
            for x in 0..w {
                let got = out.mask.data()[y * w + x];
                let want = if x >= 10 { ex.mask.data()[y * w + x - 10] } else { 0.0 };
                assert_eq!(got, want, "({y},{x})");
                if x >= 10 {
                    assert_eq!(out.bmode.data()[y * w + x], ex.bmode.data()[y * w + x - 10]);
                }
            }
        }
    }

    #[test]
    fn image_and_label_share_the_coordinate_map() {
        let mut rng = Rng::new(5);
        for seed in 0..20 {
            let ind = indicator(16, 24, seed);
            let ex = Example { bmode: ind.clone(), label: ind.clone(), mask: Tensor::ones(&[1, 16, 24]) };
            let mut p = AugmentParams::sample(&mut rng, 0.5);
            p.contrast = 1.0;
            let out = augment(&ex, &p).unwrap();
            assert_eq!(out.bmode, out.label);
            // the mask is valid exactly where the whole stencil is in frame
            let as_mask = Example { bmode: ind.clone(), label: ind.clone(), mask: ind.clone() };
            let masked = augment(&as_mask, &p).unwrap();
            for (i, &m) in masked.mask.data().iter().enumerate() {
                if m == 1.0 {
                    assert_eq!(out.mask.data()[i], 1.0);
                    assert!((masked.bmode.data()[i] - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn sampled_params_stay_in_range() {
        let mut rng = Rng::new(6);
        let mut mirrors = 0;
        for _ in 0..10_000 {
            let p = AugmentParams::sample(&mut rng, 0.5);
            p.validate().unwrap();
            mirrors += p.mirror as usize;
        }
        assert!((4700..5300).contains(&mirrors));
        let bad = AugmentParams { rotation_deg: 10.5, ..AugmentParams::identity() };
        assert!(bad.validate().is_err());
        assert!(augment(&example(4, 4, 0), &bad).is_err());
    }

    #[test]
    fn contrast_keeps_image_in_unit_range() {
        let ex = example(8, 12, 7);
        let p = AugmentParams { contrast: 1.5, ..AugmentParams::identity() };
        let out = augment(&ex, &p).unwrap();
        assert!(out.bmode.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out.label, ex.label);
        assert_eq!(out.mask, ex.mask);
    }

    fn tiny_net() -> NetConfig {
        NetConfig { encoder_blocks: 1, channels: 4, input_height: 8, input_width: 12, ..NetConfig::default() }
    }

    fn tiny_samples(n: usize, patient_offset: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let ex = example(8, 12, 100 + (i + patient_offset) as u64);
                Sample {
                    bmode: ex.bmode,
                    elasticity: ex.label,
                    confidence: Tensor::ones(&[1, 8, 12]),
                    patient_id: format!("p{}", (i + patient_offset) / 2),
                    plane_id: format!("{i}"),
                    profile: Profile::ProstateKpa,
                }
            })
            .collect()
    }

    #[test]
    fn epoch_is_deterministic() {
        let data: Vec<Example> = (0..5).map(|i| example(8, 12, i)).collect();
        let cfg = TrainConfig { batch_size: 2, epochs: 3, ..TrainConfig::default() };
        let run = || {
            let mut t = Trainer::new(&tiny_net(), cfg.clone()).unwrap();
            t.run(&data, |_, _| {}).unwrap();
            t
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn all_masked_batch_is_an_error() {
        let mut data: Vec<Example> = (0..2).map(|i| example(8, 12, i)).collect();
        for e in &mut data {
            e.mask = Tensor::zeros(&[1, 8, 12]);
        }
        let cfg = TrainConfig { augment_fraction: 0.0, ..TrainConfig::default() };
        let mut t = Trainer::new(&tiny_net(), cfg).unwrap();
        let before = t.params.clone();
        assert!(matches!(t.step_epoch(&data), Err(TrainError::EmptyMask { epoch: 0, batch: 0 })));
        assert_eq!(t.params, before);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data: Vec<Example> = (0..3).map(|i| example(8, 12, i)).collect();
        let cfg = TrainConfig { batch_size: 2, epochs: 4, ..TrainConfig::default() };
        let mut full = Trainer::new(&tiny_net(), cfg.clone()).unwrap();
        full.run(&data, |_, _| {}).unwrap();
        let mut half = Trainer::new(&tiny_net(), cfg).unwrap();
        half.step_epoch(&data).unwrap();
        half.step_epoch(&data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        half.checkpoint().save(dir.path()).unwrap();
        let mut resumed = Trainer::resume(Checkpoint::load(dir.path()).unwrap()).unwrap();
        resumed.run(&data, |_, _| {}).unwrap();
        assert_eq!(resumed.losses, full.losses);
        assert_eq!(resumed.scheduler, full.scheduler);
        assert_eq!(resumed.optimizer, full.optimizer);
        assert_eq!(resumed.config, full.config);
        assert_eq!(resumed, full);
    }

    #[test]
    fn grid_search_covers_every_cell() {
        let train = tiny_samples(4, 0);
        let val = tiny_samples(2, 10);
        let grid = GridSpec { batch_sizes: vec![2, 4], encoder_blocks: vec![1, 2], epochs: vec![2, 1] };
        let mut seen = 0;
        let report = grid_search(&train, &val, &tiny_net(), &TrainConfig::default(), &grid, |_| seen += 1).unwrap();
        assert_eq!(report.rows.len(), 8);
        assert_eq!(seen, 8);
        assert!(report.rows.iter().all(|r| r.validation_rmse.is_finite()));
        assert!(report.rows.iter().all(|r| report.best_row().validation_rmse <= r.validation_rmse));
        assert_eq!(report.table().lines().count(), 9);
        // the one-epoch cell equals a separate one-epoch run
        let cfg = TrainConfig { batch_size: 2, epochs: 1, ..TrainConfig::default() };
        let mut t = Trainer::new(&NetConfig { encoder_blocks: 1, ..tiny_net() }, cfg).unwrap();
        let ex: Vec<Example> = train.iter().map(|s| Example::from_sample(s, 0.75)).collect();
        t.run(&ex, |_, _| {}).unwrap();
        let vex: Vec<Example> = val.iter().map(|s| Example::from_sample(s, 0.75)).collect();
        assert_eq!(report.rows[1].validation_rmse, evaluate_rmse(&t.params, &vex).unwrap());
    }

    #[test]
    fn grid_search_rejects_shared_patients() {
        let train = tiny_samples(4, 0);
        let val = tiny_samples(2, 2);
        let r = grid_search(&train, &val, &tiny_net(), &TrainConfig::default(), &GridSpec::default(), |_| {});
        assert!(matches!(r, Err(TrainError::PatientOverlap(ids)) if ids == vec!["p1".to_string()]));
    }

    #[test]
    fn default_grid_has_27_cells() {
        let g = GridSpec::default();
        assert_eq!(g.cells(), 27);
        assert_eq!(g.scaled(0.01).epochs, vec![21, 25, 28]);
    }
}
