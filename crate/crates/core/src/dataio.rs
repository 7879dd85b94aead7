//! Samples, the on-disk dataset and checkpoint formats, preprocessing and
//! image export.
//!
//! A dataset directory holds `manifest.json` plus three headerless
//! little-endian f32 rasters per sample. A checkpoint directory holds
//! `checkpoint.json` plus one raster per tensor.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Element, Rng, Tensor, TensorError};
use crate::train::{AdamState, PlateauScheduler, TrainConfig};
use crate::unet::{ConvLayer, NetConfig, NetError, UNetParams};

pub const FORMAT_VERSION: u32 = 1;
pub const HEIGHT: usize = 64;
pub const WIDTH: usize = 96;
/// B-mode intensities arrive as 8-bit gray levels.
pub const BMODE_SCALE: f64 = 255.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: expected {expected} bytes, found {found}")]
    SizeMismatch { path: PathBuf, expected: usize, found: usize },
    #[error("{what}: value {value} outside [{lo}, {hi}]")]
    Range { what: String, value: f64, lo: f64, hi: f64 },
    #[error("{0}: negative physical value")]
    Negative(String),
    #[error("{0}: non-finite value")]
    NonFinite(String),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("invalid sample: {0}")]
    Invalid(String),
    #[error("need {need} patients, dataset has {have}")]
    NotEnoughPatients { need: usize, have: usize },
    #[error("regrid target {0}x{1} is smaller than 2x2")]
    TargetTooSmall(usize, usize),
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Physical unit of the elasticity channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Young's modulus, normalized by 100 kPa.
    #[default]
    ProstateKpa,
    /// Shear-wave speed, normalized by 10 m/s.
    ThyroidMps,
}

impl Profile {
    pub fn scale(self) -> f64 {
        match self {
            Profile::ProstateKpa => 100.0,
            Profile::ThyroidMps => 10.0,
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Profile::ProstateKpa => "kPa",
            Profile::ThyroidMps => "m/s",
        }
    }
}

/// What a raster holds, which fixes its normalization constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Bmode,
    Elasticity(Profile),
}

impl Channel {
    pub fn scale(self) -> f64 {
        match self {
            Channel::Bmode => BMODE_SCALE,
            Channel::Elasticity(p) => p.scale(),
        }
    }
}

/// Maps physical values to `[0, 1]`: divide by the channel scale, then clamp.
pub fn normalize<T: Element>(raw: &Tensor<T>, channel: Channel) -> Result<Tensor<T>> {
    for &v in raw.data() {
        if !v.is_finite() {
            return Err(DataError::NonFinite(format!("{channel:?}")));
        }
        if v < T::zero() {
            return Err(DataError::Negative(format!("{channel:?}")));
        }
    }
    let s = channel.scale();
    Ok(raw.map(|v| T::from_f64((v.as_f64() / s).clamp(0.0, 1.0))))
}

pub fn denormalize<T: Element>(x: &Tensor<T>, channel: Channel) -> Tensor<T> {
    let s = channel.scale();
    x.map(|v| T::from_f64(v.as_f64() * s))
}

/// Corner-aligned bilinear resampling of a `[1, H, W]` (or `[H, W]`) image:
/// output pixel `i` samples source coordinate `i * (H - 1) / (h - 1)`.
pub fn regrid_bilinear<T: Element>(image: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    let (th, tw) = target;
    if th < 2 || tw < 2 {
        return Err(DataError::TargetTooSmall(th, tw));
    }
    let (lead, h, w) = match image.shape() {
        [h, w] => (vec![], *h, *w),
        [1, h, w] => (vec![1], *h, *w),
        s => return Err(DataError::Invalid(format!("cannot regrid shape {s:?}"))),
    };
    if h < 2 || w < 2 {
        return Err(DataError::Invalid(format!("source {h}x{w} is smaller than 2x2")));
    }
    let src = image.data();
    let coord = |i: usize, n: usize, m: usize| {
        let c = i as f64 * (n - 1) as f64 / (m - 1) as f64;
        let i0 = (c.floor() as usize).min(n - 2);
        (i0, c - i0 as f64)
    };
    let cols: Vec<(usize, f64)> = (0..tw).map(|x| coord(x, w, tw)).collect();
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let (y0, fy) = coord(y, h, th);
        for &(x0, fx) in &cols {
            let at = |yy: usize, xx: usize| src[yy * w + xx].as_f64();
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            // keep exact source values where a weight vanishes
            let v = if fy == 0.0 { top } else { top * (1.0 - fy) + bot * fy };
            out.push(T::from_f64(v));
        }
    }
    let mut shape = lead;
    shape.extend([th, tw]);
    Ok(Tensor::new(shape, out)?)
}

/// One co-registered training or test image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, H, W]` in `[0, 1]`
    pub bmode: Tensor<f32>,
    /// `[1, H, W]` normalized elasticity in `[0, 1]`
    pub elasticity: Tensor<f32>,
    /// `[1, H, W]` continuous estimation confidence in `[0, 1]`
    pub confidence: Tensor<f32>,
    pub patient_id: String,
    pub plane_id: String,
    pub profile: Profile,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.bmode.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.bmode.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.bmode.shape();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(DataError::Invalid(format!("raster shape {shape:?} is not [1, H, W]")));
        }
        for (name, t) in [("bmode", &self.bmode), ("elasticity", &self.elasticity), ("confidence", &self.confidence)] {
            if t.shape() != shape {
                return Err(DataError::Invalid(format!("{name} shape {:?} differs from {shape:?}", t.shape())));
            }
            check_unit_range(t, &format!("{}/{} {name}", self.patient_id, self.plane_id))?;
        }
        Ok(())
    }

    /// Binary mask of pixels whose confidence exceeds `threshold`.
    pub fn mask(&self, threshold: f64) -> Tensor<f32> {
        binarize(&self.confidence, threshold)
    }
}

pub fn binarize<T: Element>(confidence: &Tensor<T>, threshold: f64) -> Tensor<T> {
    confidence.map(|c| if c.as_f64() > threshold { T::one() } else { T::zero() })
}

fn check_unit_range(t: &Tensor<f32>, what: &str) -> Result<()> {
    for &v in t.data() {
        if !v.is_finite() {
            return Err(DataError::NonFinite(what.to_string()));
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(DataError::Range { what: what.to_string(), value: v as f64, lo: 0.0, hi: 1.0 });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub bmode: String,
    pub elasticity: String,
    pub confidence: String,
    pub width: usize,
    pub height: usize,
    pub patient_id: String,
    pub plane_id: String,
    pub profile: Profile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_spacing_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub samples: Vec<SampleRecord>,
}

pub const MANIFEST: &str = "manifest.json";

pub fn write_raster(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, t.to_le_bytes()).map_err(io_err(path))
}

pub fn read_raster(path: &Path, shape: &[usize]) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let expected = crate::tensor::numel(shape) * f32::BYTES;
    if bytes.len() != expected {
        return Err(DataError::SizeMismatch { path: path.to_path_buf(), expected, found: bytes.len() });
    }
    Ok(Tensor::from_le_bytes(shape, &bytes)?)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|source| DataError::Json { path: path.to_path_buf(), source })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| DataError::Json { path: path.to_path_buf(), source })
}

/// Writes `samples` into `dir` (which must exist) as a manifest plus rasters.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        s.validate()?;
        let name = |kind: &str| format!("{i:05}_{kind}.f32");
        for (kind, t) in [("bmode", &s.bmode), ("elasticity", &s.elasticity), ("confidence", &s.confidence)] {
            write_raster(&dir.join(name(kind)), t)?;
        }
        records.push(SampleRecord {
            bmode: name("bmode"),
            elasticity: name("elasticity"),
            confidence: name("confidence"),
            width: s.width(),
            height: s.height(),
            patient_id: s.patient_id.clone(),
            plane_id: s.plane_id.clone(),
            profile: s.profile,
            pixel_spacing_mm: None,
        });
    }
    let manifest = DatasetManifest { format_version: FORMAT_VERSION, samples: records };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Loads a dataset from its directory or its manifest path. Raster paths
/// are resolved relative to the manifest.
pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let manifest: DatasetManifest = read_json(&manifest_path)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DataError::Version(manifest.format_version));
    }
    manifest
        .samples
        .iter()
        .map(|r| {
            let shape = [1, r.height, r.width];
            let sample = Sample {
                bmode: read_raster(&base.join(&r.bmode), &shape)?,
                elasticity: read_raster(&base.join(&r.elasticity), &shape)?,
                confidence: read_raster(&base.join(&r.confidence), &shape)?,
                patient_id: r.patient_id.clone(),
                plane_id: r.plane_id.clone(),
                profile: r.profile,
            };
            sample.validate()?;
            Ok(sample)
        })
        .collect()
}

/// Sample indices of a patient-level split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub train_patients: Vec<String>,
    pub test_patients: Vec<String>,
}

/// Assigns whole patients to the train or test side. Patients are sorted,
/// shuffled with `seed`, and the first `train_count` go to training.
pub fn split_by_patient(samples: &[Sample], train_count: usize, test_count: usize, seed: u64) -> Result<Split> {
    let mut patients: Vec<String> =
        samples.iter().map(|s| s.patient_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if train_count + test_count > patients.len() {
        return Err(DataError::NotEnoughPatients { need: train_count + test_count, have: patients.len() });
    }
    Rng::new(seed).shuffle(&mut patients);
    let mut train_patients = patients[..train_count].to_vec();
    let mut test_patients = patients[train_count..train_count + test_count].to_vec();
    train_patients.sort();
    test_patients.sort();
    let pick = |set: &[String]| -> Vec<usize> {
        (0..samples.len()).filter(|&i| set.binary_search(&samples[i].patient_id).is_ok()).collect()
    };
    Ok(Split { train: pick(&train_patients), test: pick(&test_patients), train_patients, test_patients })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct BlobRef {
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    name: String,
    weight: BlobRef,
    bias: BlobRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerEntry {
    step: u64,
    lr: f64,
    first_moments: Vec<BlobRef>,
    second_moments: Vec<BlobRef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format_version: u32,
    config: NetConfig,
    seed: u64,
    epoch: usize,
    layers: Vec<LayerEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scheduler: Option<PlateauScheduler>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_config: Option<TrainConfig>,
    #[serde(default)]
    losses: Vec<f64>,
}

/// A model plus, optionally, everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: UNetParams<f32>,
    pub seed: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    pub optimizer: Option<AdamState<f32>>,
    pub scheduler: Option<PlateauScheduler>,
    pub train_config: Option<TrainConfig>,
    /// Mean training loss of every completed epoch.
    pub losses: Vec<f64>,
}

pub const CHECKPOINT: &str = "checkpoint.json";

impl Checkpoint {
    pub fn model(params: UNetParams<f32>, seed: u64) -> Self {
        Self { params, seed, epoch: 0, optimizer: None, scheduler: None, train_config: None, losses: Vec::new() }
    }

    /// Writes into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let blob = |file: String, t: &Tensor<f32>| -> Result<BlobRef> {
            write_raster(&dir.join(&file), t)?;
            Ok(BlobRef { file, shape: t.shape().to_vec() })
        };
        let layers = self
            .params
            .layers
            .iter()
            .map(|l| {
                Ok(LayerEntry {
                    name: l.name.clone(),
                    weight: blob(format!("{}.weight.f32", l.name), &l.weight)?,
                    bias: blob(format!("{}.bias.f32", l.name), &l.bias)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let optimizer = self
            .optimizer
            .as_ref()
            .map(|o| -> Result<OptimizerEntry> {
                Ok(OptimizerEntry {
                    step: o.step,
                    lr: o.lr,
                    first_moments: o
                        .m
                        .iter()
                        .enumerate()
                        .map(|(i, t)| blob(format!("adam_m_{i:03}.f32"), t))
                        .collect::<Result<_>>()?,
                    second_moments: o
                        .v
                        .iter()
                        .enumerate()
                        .map(|(i, t)| blob(format!("adam_v_{i:03}.f32"), t))
                        .collect::<Result<_>>()?,
                })
            })
            .transpose()?;
        let manifest = CheckpointManifest {
            format_version: FORMAT_VERSION,
            config: self.params.config.clone(),
            seed: self.seed,
            epoch: self.epoch,
            layers,
            optimizer,
            scheduler: self.scheduler.clone(),
            train_config: self.train_config.clone(),
            losses: self.losses.clone(),
        };
        write_json(&dir.join(CHECKPOINT), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = read_json(&dir.join(CHECKPOINT))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(DataError::Version(manifest.format_version));
        }
        let read = |b: &BlobRef| read_raster(&dir.join(&b.file), &b.shape);
        let layers = manifest
            .layers
            .iter()
            .map(|l| Ok(ConvLayer { name: l.name.clone(), weight: read(&l.weight)?, bias: read(&l.bias)? }))
            .collect::<Result<Vec<_>>>()?;
        let params = UNetParams { config: manifest.config, layers };
        params.check_layout()?;
        let optimizer = manifest
            .optimizer
            .as_ref()
            .map(|o| -> Result<AdamState<f32>> {
                Ok(AdamState {
                    m: o.first_moments.iter().map(read).collect::<Result<_>>()?,
                    v: o.second_moments.iter().map(read).collect::<Result<_>>()?,
                    step: o.step,
                    lr: o.lr,
                })
            })
            .transpose()?;
        if let Some(o) = &optimizer {
            let shapes_match = o.m.len() == o.v.len()
                && o.m.len() == params.tensors().count()
                && params.tensors().zip(o.m.iter().zip(&o.v)).all(|(p, (m, v))| p.shape() == m.shape() && p.shape() == v.shape());
            if !shapes_match {
                return Err(DataError::Invalid("optimizer moments do not mirror the parameters".into()));
            }
        }
        Ok(Self {
            params,
            seed: manifest.seed,
            epoch: manifest.epoch,
            optimizer,
            scheduler: manifest.scheduler,
            train_config: manifest.train_config,
            losses: manifest.losses,
        })
    }
}

/// How [`export_image`] renders a map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    /// Values in `[0, 1]` as an 8-bit graymap, `round(255 v)` with halves
    /// rounded up.
    Gray,
    /// Values in `[0, 1]` through the jet colormap.
    Elasticity,
    /// Signed percentages, clamped to `[-100, 100]`, through a blue-white-red
    /// map with white at 0%.
    SignedDifference,
}

/// Gray level for a unit value; halves round up.
pub fn gray_level(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Jet colormap on `[0, 1]`: dark blue, blue, cyan, yellow, red, dark red.
pub fn jet(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let channel = |offset: f64| gray_level((1.5 - (4.0 * v - offset).abs()).clamp(0.0, 1.0));
    [channel(3.0), channel(2.0), channel(1.0)]
}

/// Blue at -100%, white at 0%, red at +100%.
pub fn diverging(percent: f64) -> [u8; 3] {
    let t = if percent.is_nan() { 0.0 } else { percent.clamp(-100.0, 100.0) / 100.0 };
    let fade = gray_level(1.0 - t.abs());
    if t >= 0.0 {
        [255, fade, fade]
    } else {
        [fade, fade, 255]
    }
}

/// Writes a `[1, H, W]` or `[H, W]` map as a binary PGM (gray) or PPM.
pub fn export_image<T: Element>(map: &Tensor<T>, kind: ExportKind, path: &Path) -> Result<()> {
    let (h, w) = match map.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => return Err(DataError::Invalid(format!("cannot export shape {s:?}"))),
    };
    if !map.all_finite() {
        return Err(DataError::NonFinite(path.display().to_string()));
    }
    let values = map.data().iter().map(|v| v.as_f64());
    let (bytes, color, subtype): (Vec<u8>, _, _) = match kind {
        ExportKind::Gray => (values.map(gray_level).collect(), ExtendedColorType::L8, PnmSubtype::Graymap(SampleEncoding::Binary)),
        ExportKind::Elasticity => {
            (values.flat_map(jet).collect(), ExtendedColorType::Rgb8, PnmSubtype::Pixmap(SampleEncoding::Binary))
        }
        ExportKind::SignedDifference => {
            (values.flat_map(diverging).collect(), ExtendedColorType::Rgb8, PnmSubtype::Pixmap(SampleEncoding::Binary))
        }
    };
    let file = fs::File::create(path).map_err(io_err(path))?;
    PnmEncoder::new(io::BufWriter::new(file))
        .with_subtype(subtype)
        .write_image(&bytes, w as u32, h as u32, color)
        .map_err(|e| DataError::Image(format!("{}: {e}", path.display())))
}

/// Reads any supported image file as gray levels scaled to `[0, 1]`,
/// shape `[1, H, W]`.
pub fn read_gray_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| DataError::Image(format!("{}: {e}", path.display())))?.into_luma8();
    let (w, h) = img.dimensions();
    let raw = Tensor::new(vec![1, h as usize, w as usize], img.into_raw().into_iter().map(f32::from).collect())?;
    normalize(&raw, Channel::Bmode)
}
