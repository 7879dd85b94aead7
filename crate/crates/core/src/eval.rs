//! Error metrics over valid pixels, per-patient aggregation, paired
//! comparison of two models and signed percentage difference maps.
//!
//! Sign convention: the mean error is label minus prediction, so a negative
//! value means the model predicts stiffer tissue than the reference.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::autodiff::Mode;
use crate::dataio::{binarize, Profile, Sample};
use crate::tensor::{Element, Rng, Tensor, TensorError};
use crate::unet::{NetError, UNetParams};

/// Predictions below this (normalized) leave the difference map at 0%.
pub const DIFFERENCE_EPS: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no valid pixels")]
    EmptyMask,
    #[error("mask value {0} is not 0 or 1")]
    NonBinaryMask(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("paired samples have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("a paired t-test needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("no images to aggregate")]
    NoRows,
    #[error("patient sets differ between the two reports")]
    Unpaired,
    #[error("samples mix profiles")]
    MixedProfiles,
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Error statistics in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    /// Mean of label minus prediction.
    pub me: f64,
    pub valid: usize,
}

/// RMSE, MAE and ME over pixels where `mask` is 1, scaled to physical units.
pub fn metrics<T: Element>(pred: &Tensor<T>, label: &Tensor<T>, mask: &Tensor<T>, profile: Profile) -> Result<Metrics> {
    for t in [label, mask] {
        if t.shape() != pred.shape() {
            return Err(TensorError::ShapeMismatch { left: pred.shape().to_vec(), right: t.shape().to_vec() }.into());
        }
    }
    let (mut sq, mut abs, mut signed, mut valid) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    for ((&p, &y), &m) in pred.data().iter().zip(label.data()).zip(mask.data()) {
        if m == T::one() {
            let d = (y - p).as_f64();
            sq += d * d;
            abs += d.abs();
            signed += d;
            valid += 1;
        } else if m != T::zero() {
            return Err(EvalError::NonBinaryMask(m.as_f64()));
        }
    }
    if valid == 0 {
        return Err(EvalError::EmptyMask);
    }
    let n = valid as f64;
    let s = profile.scale();
    Ok(Metrics { rmse: s * (sq / n).sqrt(), mae: s * abs / n, me: s * signed / n, valid })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub patient_id: String,
    pub plane_id: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRow {
    pub patient_id: String,
    pub images: usize,
    pub rmse: f64,
    pub mae: f64,
    pub me: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation across patients; 0 for a single patient.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub unit: String,
    pub images: Vec<ImageRow>,
    pub patients: Vec<PatientRow>,
    pub rmse: Summary,
    pub mae: Summary,
    pub me: Summary,
    /// False when only one patient is present and the spread is undefined.
    pub std_defined: bool,
}

fn summarize(values: &[f64]) -> Summary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Summary { mean, std }
}

/// Per-patient means of the image metrics, then mean and sample standard
/// deviation across patients. Rows are sorted first, so input order does
/// not matter.
pub fn aggregate_per_patient(rows: &[ImageRow], unit: &str) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(EvalError::NoRows);
    }
    let mut images = rows.to_vec();
    images.sort_by(|a, b| (&a.patient_id, &a.plane_id).cmp(&(&b.patient_id, &b.plane_id)));
    let mut groups: BTreeMap<&str, Vec<&Metrics>> = BTreeMap::new();
    for r in &images {
        groups.entry(&r.patient_id).or_default().push(&r.metrics);
    }
    let patients: Vec<PatientRow> = groups
        .iter()
        .map(|(id, ms)| {
            let n = ms.len() as f64;
            PatientRow {
                patient_id: id.to_string(),
                images: ms.len(),
                rmse: ms.iter().map(|m| m.rmse).sum::<f64>() / n,
                mae: ms.iter().map(|m| m.mae).sum::<f64>() / n,
                me: ms.iter().map(|m| m.me).sum::<f64>() / n,
            }
        })
        .collect();
    let column = |f: fn(&PatientRow) -> f64| summarize(&patients.iter().map(f).collect::<Vec<_>>());
    Ok(MetricsReport {
        unit: unit.to_string(),
        rmse: column(|p| p.rmse),
        mae: column(|p| p.mae),
        me: column(|p| p.me),
        std_defined: patients.len() > 1,
        images,
        patients,
    })
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let u = &self.unit;
        let mut s = format!("{:<12} {:>6} {:>10} {:>10} {:>10}\n", "patient", "images", "RMSE", "MAE", "ME");
        for p in &self.patients {
            s += &format!("{:<12} {:>6} {:>10.4} {:>10.4} {:>10.4}\n", p.patient_id, p.images, p.rmse, p.mae, p.me);
        }
        let flag = if self.std_defined { "" } else { " (single patient, std undefined)" };
        s += &format!(
            "\nper-patient RMSE {:.4} +/- {:.4} {u}\nper-patient MAE  {:.4} +/- {:.4} {u}\nper-patient ME   {:.4} +/- {:.4} {u}{flag}\n",
            self.rmse.mean, self.rmse.std, self.mae.mean, self.mae.std, self.me.mean, self.me.std
        );
        s += "ME is label minus prediction; negative means predictions are stiffer than the reference.\n";
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_difference: f64,
    pub t: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// True when the differences have zero variance, so `t` is 0 or infinite.
    pub degenerate: bool,
}

/// Two-sided paired t-test on `a - b` with `n - 1` degrees of freedom.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::TooFewPairs(n));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let Summary { mean, std } = summarize(&d);
    if std == 0.0 {
        let (t, p) = if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) };
        return Ok(PairedTest { n, mean_difference: mean, t, p, degenerate: true });
    }
    let t = mean / (std / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("degrees of freedom are positive");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(PairedTest { n, mean_difference: mean, t, p, degenerate: false })
}

/// Per-patient values of one metric from two reports, paired by patient.
pub fn paired_patient_values(a: &MetricsReport, b: &MetricsReport, metric: fn(&PatientRow) -> f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let ids = |r: &MetricsReport| r.patients.iter().map(|p| p.patient_id.clone()).collect::<Vec<_>>();
    if ids(a) != ids(b) {
        return Err(EvalError::Unpaired);
    }
    Ok((a.patients.iter().map(metric).collect(), b.patients.iter().map(metric).collect()))
}

/// Signed error as a percentage of the prediction,
/// `100 (pred - label) / pred`; 0 where the prediction is below
/// [`DIFFERENCE_EPS`] or the pixel is invalid.
pub fn difference_map<T: Element>(pred: &Tensor<T>, label: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    for t in [label, mask] {
        if t.shape() != pred.shape() {
            return Err(TensorError::ShapeMismatch { left: pred.shape().to_vec(), right: t.shape().to_vec() }.into());
        }
    }
    let data = pred
        .data()
        .iter()
        .zip(label.data())
        .zip(mask.data())
        .map(|((&p, &y), &m)| {
            let p64 = p.as_f64();
            if m == T::one() && p64 > DIFFERENCE_EPS {
                T::from_f64(100.0 * (p64 - y.as_f64()) / p64)
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(Tensor::new(pred.shape().to_vec(), data)?)
}

/// Infer-mode predictions, one `[1, H, W]` map per sample.
pub fn predict(params: &UNetParams<f32>, bmodes: &[&Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
    const CHUNK: usize = 16;
    let rng = Rng::new(0);
    let mut out = Vec::with_capacity(bmodes.len());
    for chunk in bmodes.chunks(CHUNK) {
        let x = Tensor::stack(chunk)?;
        let pred = params.forward(&x, Mode::Infer, &rng)?;
        for i in 0..chunk.len() {
            out.push(pred.outer(i)?);
        }
    }
    Ok(out)
}

/// Model predictions and the per-patient report on `samples`.
pub fn evaluate(params: &UNetParams<f32>, samples: &[Sample], threshold: f64) -> Result<(MetricsReport, Vec<Tensor<f32>>)> {
    let profile = samples.first().ok_or(EvalError::NoRows)?.profile;
    if samples.iter().any(|s| s.profile != profile) {
        return Err(EvalError::MixedProfiles);
    }
    let preds = predict(params, &samples.iter().map(|s| &s.bmode).collect::<Vec<_>>())?;
    let rows = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| {
            Ok(ImageRow {
                patient_id: s.patient_id.clone(),
                plane_id: s.plane_id.clone(),
                metrics: metrics(p, &s.elasticity, &binarize(&s.confidence, threshold), profile)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((aggregate_per_patient(&rows, profile.unit())?, preds))
}
