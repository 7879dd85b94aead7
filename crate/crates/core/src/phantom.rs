//! Synthetic phantoms: co-registered speckle B-mode, elasticity and
//! confidence maps in which stiff inclusions are hypoechoic.
//!
//! Patient-level properties (background stiffness, echogenicity, coupling,
//! speckle grain) are drawn once per patient; each plane then draws its own
//! inclusions, field of view and voids.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Profile, Sample};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    Config(String),
    #[error("sample count must be at least 1")]
    NoSamples,
}

pub type Result<T> = std::result::Result<T, PhantomError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Normalized background elasticity range.
    pub background_elasticity: [f64; 2],
    pub inclusion_count: [usize; 2],
    pub inclusion_elasticity: [f64; 2],
    /// Semi-axis range in pixels.
    pub inclusion_radius_px: [f64; 2],
    /// Standard deviation, in pixels, of the kernel that correlates speckle.
    pub speckle_correlation_px: [f64; 2],
    /// How strongly stiffness darkens the echo (the coupling kappa).
    pub coupling: [f64; 2],
    pub void_count: [usize; 2],
    pub planes_per_patient: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the log speckle.
    pub speckle_sigma: f64,
    /// Fractional echo loss from the top to the bottom of the frame.
    pub attenuation: f64,
    pub profile: Profile,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            background_elasticity: [0.15, 0.35],
            inclusion_count: [0, 3],
            inclusion_elasticity: [0.4, 0.9],
            inclusion_radius_px: [6.0, 20.0],
            speckle_correlation_px: [1.5, 3.0],
            coupling: [0.2, 0.6],
            void_count: [0, 2],
            planes_per_patient: 3,
            height: 64,
            width: 96,
            speckle_sigma: 0.5,
            attenuation: 0.3,
            profile: Profile::ProstateKpa,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// Shear-speed variant: same geometry, normalized by 10 m/s.
    pub fn thyroid() -> Self {
        Self {
            background_elasticity: [0.15, 0.3],
            inclusion_elasticity: [0.35, 0.8],
            profile: Profile::ThyroidMps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PhantomError::Config(m));
        let unit = |r: [f64; 2]| r[0] <= r[1] && r[0] >= 0.0 && r[1] <= 1.0;
        for (name, r) in [
            ("background_elasticity", self.background_elasticity),
            ("inclusion_elasticity", self.inclusion_elasticity),
            ("coupling", self.coupling),
        ] {
            if !unit(r) {
                return bad(format!("{name} {r:?} must be an ordered range inside [0, 1]"));
            }
        }
        if self.inclusion_count[0] > self.inclusion_count[1] || self.void_count[0] > self.void_count[1] {
            return bad("count ranges must be ordered".into());
        }
        let [rlo, rhi] = self.inclusion_radius_px;
        if !(rlo >= 0.0 && rlo <= rhi && 2.0 * rhi <= self.height.min(self.width) as f64) {
            return bad(format!("inclusion radii {:?} must fit the frame", self.inclusion_radius_px));
        }
        let [clo, chi] = self.speckle_correlation_px;
        if !(clo > 0.0 && clo <= chi) {
            return bad("speckle correlation range must be positive and ordered".into());
        }
        if self.height < 8 || self.width < 8 || self.planes_per_patient == 0 {
            return bad("frame must be at least 8x8 and planes_per_patient positive".into());
        }
        if !(self.speckle_sigma >= 0.0 && (0.0..1.0).contains(&self.attenuation)) {
            return bad("speckle_sigma must be non-negative and attenuation in [0, 1)".into());
        }
        Ok(())
    }
}

/// An ellipse in pixel coordinates. `angle` rotates the x semi-axis
/// counter-clockwise, in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: (f64, f64),
    /// `(ry, rx)` semi-axes in pixels.
    pub radii: (f64, f64),
    pub angle: f64,
}

impl Ellipse {
    /// Approximate signed distance in pixels from pixel `(y, x)` to the
    /// boundary, negative inside: the distance to the centre minus the
    /// distance from the centre to the boundary along the same ray.
    fn signed_distance(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        let (sin, cos) = self.angle.sin_cos();
        let u = (cos * dx + sin * dy) / self.radii.1;
        let v = (-sin * dx + cos * dy) / self.radii.0;
        let rho = u.hypot(v);
        let dist = dy.hypot(dx);
        if rho == 0.0 {
            return f64::NEG_INFINITY;
        }
        dist - dist / rho
    }

    /// Fraction of pixel `(y, x)` counted as inside, ramping over a 1-px band.
    pub fn coverage(&self, y: f64, x: f64) -> f64 {
        if self.radii.0 <= 0.0 || self.radii.1 <= 0.0 {
            return 0.0;
        }
        (0.5 - self.signed_distance(y, x)).clamp(0.0, 1.0)
    }
}

/// Blends `value` into a `[.., H, W]` canvas with anti-aliased coverage.
pub fn render_ellipse(ellipse: &Ellipse, value: f32, canvas: &mut Tensor<f32>) {
    let shape = canvas.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    for (i, c) in canvas.data_mut().iter_mut().enumerate() {
        let (y, x) = (((i / w) % h) as f64, (i % w) as f64);
        let a = ellipse.coverage(y, x);
        if a >= 1.0 {
            *c = value;
        } else if a > 0.0 {
            *c = (*c as f64 * (1.0 - a) + value as f64 * a) as f32;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    pub shape: Ellipse,
    pub elasticity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub sample: Sample,
    pub inclusions: Vec<Inclusion>,
}

const STREAM_PATIENT: u64 = 0;
const STREAM_PLANE: u64 = 1;
/// Minimum share of the frame whose confidence clears the training threshold.
pub const MIN_ROI_FRACTION: f64 = 0.3;
const ROI_THRESHOLD: f32 = 0.75;
const VOID_CONFIDENCE: f32 = 0.3;

/// `n` samples; sample `i` belongs to patient `i / planes_per_patient`.
pub fn generate(config: &PhantomConfig, n: usize) -> Result<Vec<PhantomSample>> {
    generate_range(config, 0, n)
}

/// Samples `start..start + n` of the sequence [`generate`] produces. Two
/// ranges starting on patient boundaries share no patients.
pub fn generate_range(config: &PhantomConfig, start: usize, n: usize) -> Result<Vec<PhantomSample>> {
    config.validate()?;
    if n == 0 {
        return Err(PhantomError::NoSamples);
    }
    Ok((start..start + n).map(|i| generate_one(config, i)).collect())
}

fn draw(rng: &mut Rng, r: [f64; 2]) -> f64 {
    rng.range(r[0], r[1])
}

struct Patient {
    background: f64,
    echo: f64,
    coupling: f64,
    correlation: f64,
}

fn generate_one(config: &PhantomConfig, index: usize) -> PhantomSample {
    let (h, w) = (config.height, config.width);
    let patient = index / config.planes_per_patient;
    let plane = index % config.planes_per_patient;
    let mut prng = Rng::derive(config.seed, &[STREAM_PATIENT, patient as u64]);
    let pat = Patient {
        background: draw(&mut prng, config.background_elasticity),
        echo: prng.range(0.45, 0.6),
        coupling: draw(&mut prng, config.coupling),
        correlation: draw(&mut prng, config.speckle_correlation_px),
    };
    let mut rng = Rng::derive(config.seed, &[STREAM_PLANE, index as u64]);

    let [blo, bhi] = config.background_elasticity;
    let (fy, fx, phase) = (rng.range(0.5, 1.5), rng.range(0.5, 1.5), rng.range(0.0, std::f64::consts::TAU));
    let background = Tensor::from_fn(&[1, h, w], |i| {
        let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
        let wobble = 0.03 * (std::f64::consts::PI * fx * x + phase).sin() * (std::f64::consts::PI * fy * y).cos();
        (pat.background + wobble).clamp(blo, bhi) as f32
    });

    let mut elasticity = background.clone();
    let count = rng.int_inclusive(config.inclusion_count[0], config.inclusion_count[1]);
    let inclusions: Vec<Inclusion> = (0..count)
        .map(|_| Inclusion {
            shape: Ellipse {
                center: (rng.range(0.0, (h - 1) as f64), rng.range(0.0, (w - 1) as f64)),
                radii: (draw(&mut rng, config.inclusion_radius_px), draw(&mut rng, config.inclusion_radius_px)),
                angle: rng.range(0.0, std::f64::consts::PI),
            },
            elasticity: draw(&mut rng, config.inclusion_elasticity),
        })
        .collect();
    for inc in &inclusions {
        render_ellipse(&inc.shape, inc.elasticity as f32, &mut elasticity);
    }

    let noise = correlated_noise(&mut rng, h, w, pat.correlation);
    let s = config.speckle_sigma;
    let bmode = Tensor::from_fn(&[1, h, w], |i| {
        let depth = (i / w) as f64 / (h - 1) as f64;
        let stiffer = (elasticity.data()[i] - background.data()[i]) as f64;
        let echo = pat.echo * (1.0 - pat.coupling * stiffer) * (1.0 - config.attenuation * depth);
        let speckle = (s * noise[i] - 0.5 * s * s).exp();
        (echo * speckle).clamp(0.0, 1.0) as f32
    });

    let roi = Ellipse {
        center: (rng.range(0.45, 0.55) * (h - 1) as f64, rng.range(0.45, 0.55) * (w - 1) as f64),
        radii: (rng.range(0.4, 0.55) * h as f64, rng.range(0.35, 0.5) * w as f64),
        angle: rng.range(-0.15, 0.15),
    };
    let mut confidence = Tensor::zeros(&[1, h, w]);
    render_ellipse(&roi, 1.0, &mut confidence);
    let roi_only = confidence.clone();
    let voids = rng.int_inclusive(config.void_count[0], config.void_count[1]);
    for _ in 0..voids {
        let v = Ellipse {
            center: (rng.range(0.2, 0.8) * (h - 1) as f64, rng.range(0.2, 0.8) * (w - 1) as f64),
            radii: (rng.range(3.0, 8.0), rng.range(3.0, 8.0)),
            angle: rng.range(0.0, std::f64::consts::PI),
        };
        render_ellipse(&v, VOID_CONFIDENCE, &mut confidence);
    }
    if roi_fraction(&confidence) < MIN_ROI_FRACTION {
        confidence = roi_only;
    }

    PhantomSample {
        sample: Sample {
            bmode,
            elasticity,
            confidence,
            patient_id: format!("P{patient:04}"),
            plane_id: format!("P{patient:04}-{}", plane + 1),
            profile: config.profile,
        },
        inclusions,
    }
}

/// Share of pixels whose confidence clears the training threshold.
pub fn roi_fraction(confidence: &Tensor<f32>) -> f64 {
    confidence.data().iter().filter(|&&c| c > ROI_THRESHOLD).count() as f64 / confidence.len() as f64
}

/// Unit-variance Gaussian noise smoothed by a separable Gaussian kernel of
/// standard deviation `sigma` pixels (zero padding outside the frame,
/// renormalized per pixel).
fn correlated_noise(rng: &mut Rng, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp()).collect();
    let white: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
    let blur = |src: &[f64], len: usize, stride: usize, lines: usize, step: usize| {
        let mut out = vec![0.0; src.len()];
        for line in 0..lines {
            for i in 0..len {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, &kv) in kernel.iter().enumerate() {
                    let j = i as isize + k as isize - radius;
                    if j >= 0 && (j as usize) < len {
                        acc += kv * src[line * step + j as usize * stride];
                        norm += kv * kv;
                    }
                }
                out[line * step + i * stride] = acc / norm.sqrt();
            }
        }
        out
    };
    let rows = blur(&white, w, 1, h, w);
    blur(&rows, h, w, w, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ellipse_rendering_cases() {
        let mut canvas = Tensor::<f32>::full(&[1, 8, 12], 0.2);
        let before = canvas.clone();
        let zero = Ellipse { center: (4.0, 6.0), radii: (0.0, 3.0), angle: 0.0 };
        render_ellipse(&zero, 0.9, &mut canvas);
        assert_eq!(canvas, before);

        let e = Ellipse { center: (4.0, 6.0), radii: (2.5, 3.5), angle: 0.4 };
        render_ellipse(&e, 0.9, &mut canvas);
        assert_eq!(canvas.get(&[0, 4, 6]).unwrap(), 0.9);
        assert!(canvas.data().iter().any(|&v| v > 0.2 && v < 0.9));
        assert_eq!(canvas.get(&[0, 0, 0]).unwrap(), 0.2);

        let big = Ellipse { center: (4.0, 6.0), radii: (50.0, 50.0), angle: 0.0 };
        render_ellipse(&big, 0.6, &mut canvas);
        assert!(canvas.data().iter().all(|&v| v == 0.6));
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = PhantomConfig { seed: 11, ..PhantomConfig::default() };
        let a = generate(&cfg, 6).unwrap();
        assert_eq!(a, generate(&cfg, 6).unwrap());
        let b = generate(&PhantomConfig { seed: 12, ..cfg.clone() }, 6).unwrap();
        assert_ne!(a[0].sample.bmode, b[0].sample.bmode);
        // sample i does not depend on how many were requested
        assert_eq!(generate(&cfg, 2).unwrap()[1], a[1]);
        assert_eq!(generate_range(&cfg, 3, 3).unwrap(), a[3..].to_vec());
        assert_eq!(a[3].sample.patient_id, "P0001");
        assert_eq!(a[2].sample.plane_id, "P0000-3");
        assert!(matches!(generate(&cfg, 0), Err(PhantomError::NoSamples)));
    }

    #[test]
    fn inclusion_free_maps_stay_in_background_range() {
        let cfg = PhantomConfig { inclusion_count: [0, 0], ..PhantomConfig::default() };
        for s in generate(&cfg, 9).unwrap() {
            assert!(s.inclusions.is_empty());
            assert!(s.sample.elasticity.data().iter().all(|&v| (0.15..=0.35).contains(&(v as f64))));
        }
    }

    #[test]
    fn samples_are_valid_and_cover_the_roi() {
        let cfg = PhantomConfig { void_count: [2, 2], ..PhantomConfig::default() };
        let all = generate(&cfg, 60).unwrap();
        let (mut below, mut above) = (false, false);
        for s in &all {
            s.sample.validate().unwrap();
            assert!(roi_fraction(&s.sample.confidence) >= MIN_ROI_FRACTION);
            let e = s.sample.elasticity.data();
            assert!(e.iter().all(|&v| (0.15..=0.9).contains(&(v as f64))));
            below |= e.iter().any(|&v| v < 0.5);
            above |= e.iter().any(|&v| v > 0.5);
        }
        assert!(below && above);
        assert!(generate(&PhantomConfig { coupling: [0.6, 0.2], ..cfg }, 1).is_err());
    }

    #[test]
    fn thyroid_profile_is_tagged() {
        let s = generate(&PhantomConfig::thyroid(), 1).unwrap();
        assert_eq!(s[0].sample.profile, Profile::ThyroidMps);
    }

    /// Plug-in mutual information (nats) between two equal-length label
    /// vectors with values in `0..bins`.
    fn mutual_information(a: &[usize], b: &[usize], bins: usize) -> f64 {
        let n = a.len() as f64;
        let mut joint = vec![0.0; bins * bins];
        let (mut pa, mut pb) = (vec![0.0; bins], vec![0.0; bins]);
        for (&i, &j) in a.iter().zip(b) {
            joint[i * bins + j] += 1.0 / n;
            pa[i] += 1.0 / n;
            pb[j] += 1.0 / n;
        }
        let mut mi = 0.0;
        for i in 0..bins {
            for j in 0..bins {
                let p = joint[i * bins + j];
                if p > 0.0 {
                    mi += p * (p / (pa[i] * pb[j])).ln();
                }
            }
        }
        mi
    }

    fn quantile_bins(v: &[f64], bins: usize) -> Vec<usize> {
        let mut sorted = v.to_vec();
        sorted.sort_by(f64::total_cmp);
        let edges: Vec<f64> = (1..bins).map(|k| sorted[k * sorted.len() / bins]).collect();
        v.iter().map(|x| edges.iter().filter(|&&e| *x >= e).count()).collect()
    }

    #[test]
    fn local_variance_carries_information_about_elasticity() {
        let cfg = PhantomConfig { seed: 3, ..PhantomConfig::default() };
        let (mut var, mut elast) = (Vec::new(), Vec::new());
        for s in generate(&cfg, 100).unwrap() {
            let (b, e, c) = (s.sample.bmode.data(), s.sample.elasticity.data(), s.sample.confidence.data());
            let w = cfg.width;
            for y in (3..cfg.height - 3).step_by(4) {
                for x in (3..w - 3).step_by(4) {
                    if c[y * w + x] <= 0.75 {
                        continue;
                    }
                    let win: Vec<f64> =
                        (0..25).map(|k| b[(y + k / 5 - 2) * w + x + k % 5 - 2] as f64).collect();
                    let mean = win.iter().sum::<f64>() / 25.0;
                    var.push(win.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 24.0);
                    elast.push(e[y * w + x] as f64);
                }
            }
        }
        let (a, b) = (quantile_bins(&var, 8), quantile_bins(&elast, 8));
        let observed = mutual_information(&a, &b, 8);
        let mut rng = Rng::new(99);
        let mut shuffled = b.clone();
        let perms = 200;
        let mut exceed = 0;
        for _ in 0..perms {
            rng.shuffle(&mut shuffled);
            if mutual_information(&a, &shuffled, 8) >= observed {
                exceed += 1;
            }
        }
        let p = (1 + exceed) as f64 / (1 + perms) as f64;
        assert!(observed > 0.0 && p < 0.01, "mi {observed} p {p}");
    }

    #[test]
    fn coupling_sets_inclusion_darkening() {
        // Mean B-mode inside stiff inclusions relative to the rest of the frame.
        let ratio = |kappa: f64| {
            let cfg = PhantomConfig { seed: 8, coupling: [kappa, kappa], inclusion_count: [2, 3], ..PhantomConfig::default() };
            let (mut inside, mut outside) = ((0.0, 0usize), (0.0, 0usize));
            for s in generate(&cfg, 30).unwrap() {
                let b = s.sample.bmode.data();
                for (i, &v) in b.iter().enumerate() {
                    let (y, x) = ((i / cfg.width) as f64, (i % cfg.width) as f64);
                    let acc = if s.inclusions.iter().any(|inc| inc.shape.coverage(y, x) > 0.99) {
                        &mut inside
                    } else {
                        &mut outside
                    };
                    acc.0 += v as f64;
                    acc.1 += 1;
                }
            }
            (inside.0 / inside.1 as f64) / (outside.0 / outside.1 as f64)
        };
        let r: Vec<f64> = [0.0, 0.3, 0.6].iter().map(|&k| ratio(k)).collect();
        assert!((r[0] - 1.0).abs() < 0.1, "{r:?}");
        assert!(r[0] > r[1] && r[1] > r[2], "{r:?}");
    }
}
