//! Exact t-SNE for a few hundred latent vectors, plus latent extraction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Mode;
use crate::tensor::{Rng, Tensor, TensorError};
use crate::unet::{NetError, UNetParams};

/// Entropy tolerance of the bandwidth search, in bits.
pub const ENTROPY_TOL: f64 = 1e-5;
const MAX_BISECTIONS: usize = 50;
const MAX_EXPANSIONS: usize = 64;
const P_FLOOR: f64 = 1e-12;
const MIN_GAIN: f64 = 0.01;

#[derive(Debug, Error)]
pub enum TsneError {
    #[error("t-SNE needs at least 5 points, got {0}")]
    TooFewPoints(usize),
    #[error("perplexity {perplexity} needs more than {need} points, got {n}")]
    PerplexityTooLarge { perplexity: f64, n: usize, need: f64 },
    #[error("invalid embedding config: {0}")]
    Config(String),
    #[error("rows have different lengths")]
    Ragged,
    #[error("non-finite feature value")]
    NonFinite,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TsneError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Iterations run with exaggerated affinities and the initial momentum.
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if n < 5 {
            return Err(TsneError::TooFewPoints(n));
        }
        let need = 3.0 * self.perplexity + 1.0;
        if !(self.perplexity > 1.0) || (n as f64) <= need {
            return Err(TsneError::PerplexityTooLarge { perplexity: self.perplexity, n, need });
        }
        if self.iterations < self.exaggeration_iterations.max(250) {
            return Err(TsneError::Config("iterations must be at least 250 and cover the exaggeration phase".into()));
        }
        if !(self.learning_rate > 0.0 && self.early_exaggeration >= 1.0) {
            return Err(TsneError::Config("learning_rate must be positive and exaggeration at least 1".into()));
        }
        Ok(())
    }
}

/// Squared Euclidean distances, `n x n` row-major.
pub fn squared_distances(x: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = x.len();
    let d = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != d) {
        return Err(TsneError::Ragged);
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(TsneError::NonFinite);
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    Ok(out)
}

/// Row-conditional affinities and the entropy (bits) each row reached.
#[derive(Debug, Clone, PartialEq)]
pub struct Affinities {
    /// `n x n`, row `i` is `p(j | i)`; the diagonal is 0.
    pub conditional: Vec<f64>,
    pub entropy_bits: Vec<f64>,
    /// Gaussian precision `1 / (2 sigma^2)` per row, in units of the
    /// squared input distances.
    pub beta: Vec<f64>,
}

/// Row distribution `exp(-beta d) / Z` over `d` shifted so its minimum is
/// 0, and its entropy in bits.
fn row_distribution(d: &[f64], beta: f64, p: &mut [f64]) -> f64 {
    let mut z = 0.0;
    for (pj, &dj) in p.iter_mut().zip(d) {
        *pj = (-beta * dj).exp();
        z += *pj;
    }
    let mut weighted = 0.0;
    for (pj, &dj) in p.iter_mut().zip(d) {
        *pj /= z;
        weighted += dj * *pj;
    }
    (z.ln() + beta * weighted) / std::f64::consts::LN_2
}

/// Finds, per row, the bandwidth whose entropy is `log2(perplexity)`: the
/// bracket on `ln beta` is widened until it straddles the target, then
/// bisected at most 50 times or until within [`ENTROPY_TOL`].
pub fn conditional_affinities(dist2: &[f64], n: usize, perplexity: f64) -> Affinities {
    let target = perplexity.log2();
    let mut conditional = vec![0.0; n * n];
    let mut entropy_bits = vec![0.0; n];
    let mut betas = vec![0.0; n];
    let mut d = vec![0.0; n - 1];
    let mut p = vec![0.0; n - 1];
    for i in 0..n {
        let others = (0..n).filter(|&j| j != i);
        for (k, j) in others.clone().enumerate() {
            d[k] = dist2[i * n + j];
        }
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        let spread = d.iter().map(|v| v - min).fold(0.0, f64::max);
        d.iter_mut().for_each(|v| *v -= min);
        if spread == 0.0 {
            // all neighbours equidistant: the distribution is uniform for any bandwidth
            p.fill(1.0 / (n - 1) as f64);
            entropy_bits[i] = ((n - 1) as f64).log2();
        } else {
            let mut entropy = |log_beta: f64| row_distribution(&d, log_beta.exp(), &mut p);
            let centre = (1.0 / spread).ln();
            // beyond this every non-nearest weight underflows; it is the
            // bandwidth floor that keeps exact duplicates finite
            let nearest = d.iter().copied().filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min);
            let cap = (700.0 / nearest).ln();
            let (mut lo, mut hi) = (centre - 1.0, (centre + 1.0).min(cap));
            for _ in 0..MAX_EXPANSIONS {
                if entropy(lo) >= target {
                    break;
                }
                lo -= 2.0 * (hi - lo);
            }
            for _ in 0..MAX_EXPANSIONS {
                if hi >= cap || entropy(hi) <= target {
                    break;
                }
                hi = (hi + 2.0 * (hi - lo)).min(cap);
            }
            let mut mid = 0.5 * (lo + hi);
            let mut h = entropy(mid);
            for _ in 0..MAX_BISECTIONS {
                if (h - target).abs() < ENTROPY_TOL {
                    break;
                }
                if h > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
                mid = 0.5 * (lo + hi);
                h = entropy(mid);
            }
            entropy_bits[i] = h;
            betas[i] = mid.exp();
        }
        for (k, j) in others.enumerate() {
            conditional[i * n + j] = p[k];
        }
    }
    Affinities { conditional, entropy_bits, beta: betas }
}

/// `(p(j|i) + p(i|j)) / 2n`, floored at a tiny positive value.
pub fn joint_affinities(conditional: &[f64], n: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((conditional[i * n + j] + conditional[j * n + i]) / (2.0 * n as f64)).max(P_FLOOR);
            }
        }
    }
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub coords: Vec<[f64; 2]>,
    /// KL divergence of the unexaggerated affinities after every iteration.
    pub kl: Vec<f64>,
}

/// Embeds the rows of `x` in two dimensions.
pub fn embed(x: &[Vec<f64>], config: &EmbeddingConfig) -> Result<Embedding> {
    let n = x.len();
    config.validate(n)?;
    let dist2 = squared_distances(x)?;
    let aff = conditional_affinities(&dist2, n, config.perplexity);
    let p = joint_affinities(&aff.conditional, n);

    let mut rng = Rng::new(config.seed);
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [1e-4 * rng.normal(), 1e-4 * rng.normal()]).collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![[0.0; 2]; n];
    let mut kl = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let early = it < config.exaggeration_iterations;
        let exaggeration = if early { config.early_exaggeration } else { 1.0 };
        let momentum = if early { config.initial_momentum } else { config.final_momentum };

        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let (dx, dy) = (y[i][0] - y[j][0], y[i][1] - y[j][1]);
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                z += 2.0 * q;
            }
        }
        let mut divergence = 0.0;
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let pij = p[i * n + j];
                let qij = (num[i * n + j] / z).max(P_FLOOR);
                divergence += pij * (pij / qij).ln();
                let coeff = 4.0 * (exaggeration * pij - qij) * num[i * n + j];
                g[0] += coeff * (y[i][0] - y[j][0]);
                g[1] += coeff * (y[i][1] - y[j][1]);
            }
            grad[i] = g;
        }
        for i in 0..n {
            for k in 0..2 {
                let same_sign = (grad[i][k] > 0.0) == (update[i][k] > 0.0);
                gains[i][k] = if same_sign { gains[i][k] * 0.8 } else { gains[i][k] + 0.2 };
                gains[i][k] = gains[i][k].max(MIN_GAIN);
                update[i][k] = momentum * update[i][k] - config.learning_rate * gains[i][k] * grad[i][k];
                y[i][k] += update[i][k];
            }
        }
        center(&mut y);
        kl.push(divergence);
    }
    Ok(Embedding { coords: y, kl })
}

fn center(y: &mut [[f64; 2]]) {
    let n = y.len() as f64;
    let mean = y.iter().fold([0.0; 2], |m, p| [m[0] + p[0] / n, m[1] + p[1] / n]);
    for p in y.iter_mut() {
        p[0] -= mean[0];
        p[1] -= mean[1];
    }
}

/// Flattened infer-mode latent map of each image.
pub fn latent_features(params: &UNetParams<f32>, bmodes: &[&Tensor<f32>]) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 16;
    let rng = Rng::new(0);
    let mut rows = Vec::with_capacity(bmodes.len());
    for chunk in bmodes.chunks(CHUNK) {
        let latent = params.encode(&Tensor::stack(chunk)?, Mode::Infer, &rng)?;
        let d = latent.len() / chunk.len();
        rows.extend(latent.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()));
    }
    Ok(rows)
}
