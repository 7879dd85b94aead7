//! Acceptance suite. Prints one PASS/FAIL line per criterion and a list of
//! failed criteria at the end. With `SSWE_ACCEPTANCE_STRICT=1` a failure
//! also makes the run exit non-zero.
//!
//! `cargo test --test acceptance -- 4 7` runs only criteria 4 and 7.
//! With `SSWE_ACCEPTANCE_QUICK=1` the training-heavy criteria (4, 5, 11)
//! are reported as SKIP instead of run.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use sswe::autodiff::{Graph, Mode, Var};
use sswe::dataio::{self, Profile, Sample};
use sswe::eval;
use sswe::phantom::{self, PhantomConfig};
use sswe::tensor::{Rng, Tensor};
use sswe::train::{
    self, adam_step, augment, AdamState, AugmentParams, Example, GridSpec, TrainConfig, Trainer, CONTRAST_RANGE,
    MAX_CROP, MAX_ROTATION_DEG, MAX_SHIFT_AXIAL, MAX_SHIFT_LATERAL,
};
use sswe::tsne::{self, EmbeddingConfig, ENTROPY_TOL};
use sswe::unet::{NetConfig, UNetParams};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Criterion = (u32, &'static str, bool, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "gradient oracle", false, gradient_oracle),
        (2, "masking contract", false, masking_contract),
        (3, "architecture shapes", false, architecture),
        (4, "overfit run", true, overfit),
        (5, "generalization run", true, generalization),
        (6, "augmentation", false, augmentation),
        (7, "scheduler and optimizer", false, optimizer),
        (8, "metrics", false, metrics),
        (9, "t-SNE benchmark", false, tsne_benchmark),
        (10, "reproducibility", false, reproducibility),
        (11, "grid search", true, grid),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let quick = std::env::var_os("SSWE_ACCEPTANCE_QUICK").is_some_and(|v| v != "0");
    let mut failed = Vec::new();
    for (n, name, heavy, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        if quick && heavy {
            println!("criterion {n:>2} SKIP {name}: training-heavy, skipped by SSWE_ACCEPTANCE_QUICK");
            continue;
        }
        let start = Instant::now();
        let Outcome { pass, detail } = run();
        let secs = start.elapsed().as_secs_f64();
        println!("criterion {n:>2} {} {name}: {detail} ({secs:.1} s)", if pass { "PASS" } else { "FAIL" });
        if !pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        if std::env::var_os("SSWE_ACCEPTANCE_STRICT").is_some_and(|v| v != "0") {
            std::process::exit(1);
        }
    }
}

fn random_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::uniform(rng, shape, lo, hi).unwrap()
}

// ---------------------------------------------------------------- 1

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
/// Floor on the relative-error denominator, so that gradients that are
/// zero analytically are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Builds `f(inputs)` and reduces it to a scalar with fixed random weights.
fn scalar_loss(
    inputs: &[Tensor<f64>],
    weights: &Option<Tensor<f64>>,
    f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> (Graph<f64>, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let loss = match weights {
        Some(w) => {
            let wv = g.constant(w.clone());
            let prod = g.mul(out, wv).unwrap();
            g.sum(prod).unwrap()
        }
        None => out,
    };
    (g, vars, loss)
}

/// Largest relative error between analytic and central-difference
/// gradients over the given coordinates of each input (all if `None`).
fn grad_check(
    inputs: &[Tensor<f64>],
    coords: &[Option<Vec<usize>>],
    f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> (f64, usize) {
    let (g0, _, out0) = scalar_loss(inputs, &None, f);
    let out_len = g0.value(out0).len();
    let weights = (out_len > 1).then(|| {
        let shape = g0.value(out0).shape().to_vec();
        random_tensor(&mut Rng::new(99), &shape, -1.0, 1.0)
    });
    drop(g0);
    let (mut g, vars, loss) = scalar_loss(inputs, &weights, f);
    g.backward(loss).unwrap();
    let grads: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().clone()).collect();
    let value = |xs: &[Tensor<f64>]| {
        let (g, _, l) = scalar_loss(xs, &weights, f);
        g.value(l).data()[0]
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut xs = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let all: Vec<usize> = (0..input.len()).collect();
        let idx = coords[k].as_ref().unwrap_or(&all);
        for &i in idx {
            let orig = input.data()[i];
            xs[k].data_mut()[i] = orig + FD_STEP;
            let up = value(&xs);
            xs[k].data_mut()[i] = orig - FD_STEP;
            let down = value(&xs);
            xs[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[k].data()[i], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

fn gradient_oracle() -> Outcome {
    let mut rng = Rng::new(11);
    let x = random_tensor(&mut rng, &[2, 3, 4, 6], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let b = random_tensor(&mut rng, &[4], -0.5, 0.5);
    let y = random_tensor(&mut rng, &[2, 3, 4, 6], -1.0, 1.0);
    let half = random_tensor(&mut rng, &[2, 3, 2, 3], -1.0, 1.0);
    let label = random_tensor(&mut rng, &[2, 1, 4, 6], 0.0, 1.0);
    let mask = Tensor::from_fn(&[2, 1, 4, 6], |i| if i % 3 == 0 { 0.0 } else { 1.0 });
    let pred = random_tensor(&mut rng, &[2, 1, 4, 6], 0.0, 1.0);
    let all = |n: usize| vec![None; n];

    type Case<'a> = (&'a str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>);
    let cases: Vec<Case> = vec![
        ("conv2d", vec![x.clone(), w.clone(), b.clone()], Box::new(|g, v| g.conv2d(v[0], v[1], v[2]).unwrap())),
        (
            "conv2d_leaky",
            vec![x.clone(), w.clone(), b.clone()],
            Box::new(|g, v| g.conv2d_leaky(v[0], v[1], v[2], 0.1).unwrap()),
        ),
        ("leaky_relu", vec![x.clone()], Box::new(|g, v| g.leaky_relu(v[0], 0.1).unwrap())),
        ("maxpool2", vec![x.clone()], Box::new(|g, v| g.maxpool2(v[0]).unwrap())),
        ("upsample2", vec![half.clone()], Box::new(|g, v| g.upsample2(v[0]).unwrap())),
        ("concat_channels", vec![x.clone(), y.clone()], Box::new(|g, v| g.concat_channels(v[0], v[1]).unwrap())),
        (
            "dropout",
            vec![x.clone()],
            Box::new(|g, v| g.dropout(v[0], 0.5, Mode::Train, &mut Rng::new(4)).unwrap()),
        ),
        ("sigmoid", vec![x.clone()], Box::new(|g, v| g.sigmoid(v[0]).unwrap())),
        ("add", vec![x.clone(), y.clone()], Box::new(|g, v| g.add(v[0], v[1]).unwrap())),
        ("mul", vec![x.clone(), y.clone()], Box::new(|g, v| g.mul(v[0], v[1]).unwrap())),
        ("scale", vec![x.clone()], Box::new(|g, v| g.scale(v[0], -2.5).unwrap())),
        ("sum", vec![x.clone()], Box::new(|g, v| g.sum(v[0]).unwrap())),
        ("masked_rmse", vec![pred.clone()], {
            let (label, mask) = (label.clone(), mask.clone());
            Box::new(move |g, v| g.masked_rmse(v[0], label.clone(), mask.clone()).unwrap())
        }),
    ];
    let mut worst = 0.0f64;
    let mut worst_name = "";
    let mut checked = 0;
    for (name, inputs, f) in &cases {
        let (err, n) = grad_check(inputs, &all(inputs.len()), f.as_ref());
        checked += n;
        if err >= worst {
            worst = err;
            worst_name = name;
        }
    }

    let net = NetConfig { input_height: 8, input_width: 12, ..NetConfig::default() };
    let mut params = UNetParams::<f64>::build(&net, &mut Rng::new(5)).unwrap();
    // Ten times the training init range. At the training init the deep
    // activations are so small that a 1e-5 step flips pooling and leaky
    // branches, which central differences cannot follow.
    for layer in &mut params.layers {
        layer.weight = layer.weight.map(|v| 10.0 * v);
    }
    let mut prng = Rng::new(6);
    let image = random_tensor(&mut prng, &[1, 1, 8, 12], 0.0, 1.0);
    let target = random_tensor(&mut prng, &[1, 1, 8, 12], 0.0, 1.0);
    let valid = Tensor::from_fn(&[1, 1, 8, 12], |i| if i % 5 == 0 { 0.0 } else { 1.0 });
    let mut inputs = vec![image];
    inputs.extend(params.tensors().cloned());
    // Every input pixel, every bias, and a spread of weights per layer.
    let coords: Vec<Option<Vec<usize>>> = inputs
        .iter()
        .enumerate()
        .map(|(k, t)| {
            if k == 0 || t.rank() == 1 {
                None
            } else {
                let mut r = Rng::new(k as u64);
                Some((0..24).map(|_| r.int_inclusive(0, t.len() - 1)).collect())
            }
        })
        .collect();
    let layout = params.clone();
    let full = move |g: &mut Graph<f64>, v: &[Var]| {
        let bound = sswe::unet::BoundParams { vars: v[1..].chunks(2).map(|p| (p[0], p[1])).collect() };
        let out = layout.forward_graph(g, &bound, v[0], Mode::Train, &Rng::new(7)).unwrap();
        g.masked_rmse(out.output, target.clone(), valid.clone()).unwrap()
    };
    let (net_err, n) = grad_check(&inputs, &coords, &full);
    checked += n;
    let pass = worst < GRAD_TOL && net_err < GRAD_TOL;
    outcome(
        pass,
        format!(
            "max rel error {worst:.2e} over {} ops (worst {worst_name}), {net_err:.2e} on the 8x12 network; {checked} coordinates, tol {GRAD_TOL:e}",
            cases.len()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn loss_and_grads(
    params: &UNetParams<f32>,
    x: &Tensor<f32>,
    label: &Tensor<f32>,
    mask: &Tensor<f32>,
    nudge: &Tensor<f32>,
) -> (u32, Vec<Vec<u32>>) {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let xv = g.constant(x.clone());
    let out = params.forward_graph(&mut g, &bound, xv, Mode::Train, &Rng::new(3)).unwrap();
    let nv = g.constant(nudge.clone());
    let pred = g.add(out.output, nv).unwrap();
    let loss = g.masked_rmse(pred, label.clone(), mask.clone()).unwrap();
    g.backward(loss).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let grads = bound.flat().map(|v| bits(g.grad(v).unwrap())).collect();
    (g.value(loss).data()[0].to_bits(), grads)
}

fn masking_contract() -> Outcome {
    let net = NetConfig { channels: 8, input_height: 16, input_width: 24, ..NetConfig::default() };
    let params = UNetParams::<f32>::build(&net, &mut Rng::new(1)).unwrap();
    let mut rng = Rng::new(2);
    let shape = [2, 1, 16, 24];
    let x = Tensor::uniform(&mut rng, &shape, 0.0f32, 1.0).unwrap();
    let label = Tensor::uniform(&mut rng, &shape, 0.0f32, 1.0).unwrap();
    let mask = Tensor::from_fn(&shape, |_| if rng.bernoulli(0.6) { 1.0f32 } else { 0.0 });
    let zero = Tensor::zeros(&shape);
    let base = loss_and_grads(&params, &x, &label, &mask, &zero);

    let mut trials = 0;
    let mut same = 0;
    for t in 0..20u64 {
        let mut r = Rng::new(100 + t);
        let junk = |r: &mut Rng, m: f32| if m == 0.0 { r.range(-50.0, 50.0) as f32 } else { 0.0 };
        let mut label2 = label.clone();
        for (l, &m) in label2.data_mut().iter_mut().zip(mask.data()) {
            *l += junk(&mut r, m);
        }
        let nudge = Tensor::new(shape.to_vec(), mask.data().iter().map(|&m| junk(&mut r, m)).collect()).unwrap();
        for (lab, nud) in [(&label2, &zero), (&label, &nudge), (&label2, &nudge)] {
            trials += 1;
            if loss_and_grads(&params, &x, lab, &mask, nud) == base {
                same += 1;
            }
        }
    }
    outcome(same == trials, format!("{same}/{trials} masked-pixel perturbations left loss and all gradients bitwise unchanged"))
}

// ---------------------------------------------------------------- 3

/// Parameter count worked out per layer from the architecture description.
fn parameter_oracle() -> usize {
    let conv = |cin: usize, cout: usize| 3 * 3 * cin * cout + cout;
    let c = 32;
    let encoder = conv(1, c) + conv(c, c) + conv(c, c) + conv(c, c);
    let latent = conv(c, c) + conv(c, c);
    let decoder = 2 * (conv(2 * c, c) + conv(c, c));
    let head = conv(c, 1);
    encoder + latent + decoder + head
}

const PINNED_PARAMETERS: usize = 102_273;

fn architecture() -> Outcome {
    let net = NetConfig::default();
    let params = UNetParams::<f32>::build(&net, &mut Rng::new(8)).unwrap();
    let x = Tensor::uniform(&mut Rng::new(9), &[1, 64, 96], 0.0f32, 1.0).unwrap();
    let rng = Rng::new(0);
    let y = params.forward(&x, Mode::Infer, &rng).unwrap();
    let latent = params.encode(&x, Mode::Infer, &rng).unwrap();
    let batch = Tensor::uniform(&mut Rng::new(10), &[3, 1, 64, 96], 0.0f32, 1.0).unwrap();
    let yb = params.forward(&batch, Mode::Train, &rng).unwrap();
    let in_range = |t: &Tensor<f32>| t.data().iter().all(|&v| v > 0.0 && v < 1.0);
    let latent_shape = latent.shape().iter().rev().take(3).rev().copied().collect::<Vec<_>>();
    let count = params.param_count();
    let checks = [
        y.shape() == [1, 64, 96] || y.shape() == [1, 1, 64, 96],
        yb.shape() == [3, 1, 64, 96],
        latent_shape == [32, 16, 24] && latent.len() == 32 * 16 * 24,
        count == parameter_oracle() && count == PINNED_PARAMETERS,
        in_range(&y) && in_range(&yb),
    ];
    outcome(
        checks.iter().all(|&c| c),
        format!(
            "output {:?}, latent {:?}, {count} parameters (oracle {}, pinned {PINNED_PARAMETERS}), outputs in (0,1): {}",
            y.shape(),
            latent.shape(),
            parameter_oracle(),
            checks[4]
        ),
    )
}

// ---------------------------------------------------------------- 4

fn phantoms(n: usize, seed: u64) -> Vec<Sample> {
    let cfg = PhantomConfig { seed, ..PhantomConfig::default() };
    phantom::generate(&cfg, n).unwrap().into_iter().map(|p| p.sample).collect()
}

fn overfit() -> Outcome {
    const TARGET: f64 = 0.02;
    const MAX_EPOCHS: usize = 2000;
    const CHECK_EVERY: usize = 10;
    let data: Vec<Example> = phantoms(8, 40).iter().map(|s| Example::from_sample(s, 0.75)).collect();
    let config = TrainConfig { augment_fraction: 0.0, epochs: MAX_EPOCHS, seed: 41, ..TrainConfig::default() };
    // Memorization, so no dropout; eight samples fit in one batch.
    let net = NetConfig { dropout: 0.0, ..NetConfig::default() };
    let mut trainer = Trainer::new(&net, config).unwrap();
    let mut rmse = f64::INFINITY;
    while !trainer.finished() {
        trainer.step_epoch(&data).unwrap();
        if trainer.epoch % CHECK_EVERY == 0 || trainer.finished() {
            rmse = train::evaluate_rmse(&trainer.params, &data).unwrap();
            if rmse < TARGET {
                break;
            }
        }
    }
    outcome(rmse < TARGET, format!("training masked RMSE {rmse:.4} after {} epochs (target < {TARGET})", trainer.epoch))
}

// ---------------------------------------------------------------- 5

fn generalization() -> Outcome {
    let cfg = PhantomConfig { seed: 50, planes_per_patient: 5, ..PhantomConfig::default() };
    let samples: Vec<Sample> = phantom::generate(&cfg, 200).unwrap().into_iter().map(|p| p.sample).collect();
    let split = dataio::split_by_patient(&samples, 30, 10, 51).unwrap();
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let (train_set, test_set) = (pick(&split.train), pick(&split.test));
    let disjoint = split.train_patients.iter().all(|p| !split.test_patients.contains(p));
    let data: Vec<Example> = train_set.iter().map(|s| Example::from_sample(s, 0.75)).collect();
    let config = TrainConfig { epochs: 300, seed: 52, ..TrainConfig::default() };
    let mut trainer = Trainer::new(&NetConfig::default(), config).unwrap();
    let untrained = trainer.params.clone();
    trainer.run(&data, |_, _| {}).unwrap();
    // Normalized units: the report is in kPa at 100 kPa full scale.
    let scale = Profile::ProstateKpa.scale();
    let (trained, _) = eval::evaluate(&trainer.params, &test_set, 0.75).unwrap();
    let (baseline, _) = eval::evaluate(&untrained, &test_set, 0.75).unwrap();
    let mae = trained.mae.mean / scale;
    let mae0 = baseline.mae.mean / scale;
    let pass = disjoint && train_set.len() == 150 && test_set.len() == 50 && mae < 0.08 && mae < 0.5 * mae0;
    outcome(
        pass,
        format!(
            "{} train / {} test images, {} / {} patients; per-patient MAE {mae:.4} (untrained {mae0:.4}, ratio {:.3}); RMSE {:.2} +/- {:.2} kPa",
            train_set.len(),
            test_set.len(),
            split.train_patients.len(),
            split.test_patients.len(),
            mae / mae0,
            trained.rmse.mean,
            trained.rmse.std
        ),
    )
}

// ---------------------------------------------------------------- 6

fn indicator_example(h: usize, w: usize, seed: u64) -> Example {
    let mut rng = Rng::new(seed);
    let ind = Tensor::from_fn(&[1, h, w], |_| if rng.bernoulli(0.7) { 1.0f32 } else { 0.0 });
    Example { bmode: ind.clone(), label: ind.clone(), mask: ind }
}

fn augmentation() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let mut rng = Rng::new(2);
    let graded = Example {
        bmode: Tensor::uniform(&mut rng, &[1, 16, 24], 0.0f32, 1.0).unwrap(),
        label: Tensor::uniform(&mut rng, &[1, 16, 24], 0.0f32, 1.0).unwrap(),
        mask: Tensor::ones(&[1, 16, 24]),
    };
    let mirror = AugmentParams { mirror: true, ..AugmentParams::identity() };
    let twice = augment(&augment(&graded, &mirror).unwrap(), &mirror).unwrap();
    let once = augment(&graded, &mirror).unwrap();
    let flipped = once.bmode.data().chunks(24).zip(graded.bmode.data().chunks(24)).all(|(a, b)| {
        a.iter().rev().zip(b).all(|(x, y)| x == y)
    });
    let involution = twice == graded && flipped;
    let identity = augment(&graded, &AugmentParams::identity()).unwrap() == graded;
    ok &= involution && identity;
    notes.push(format!("mirror involution {involution}, identity exact {identity}"));

    let mut joint = 0;
    let mut draws = 0;
    for seed in 0..200u64 {
        let mut r = Rng::new(1000 + seed);
        let p = AugmentParams { contrast: 1.0, ..AugmentParams::sample(&mut r, 0.5) };
        let ex = indicator_example(16, 24, seed);
        let out = augment(&ex, &p).unwrap();
        draws += 1;
        let same_map = out.bmode == out.label;
        // An indicator interpolates to 1 only where every contributing
        // source pixel is 1, which is the mask rule. Snapped coordinates keep
        // every nonzero weight at least 1e-6, so a partial stencil stays
        // visibly below 1.
        let mask_agrees = out
            .mask
            .data()
            .iter()
            .zip(out.bmode.data())
            .all(|(&m, &v)| if m == 1.0 { (v - 1.0).abs() <= 1e-6 } else { v < 1.0 });
        if same_map && mask_agrees {
            joint += 1;
        }
    }
    ok &= joint == draws;
    notes.push(format!("joint map {joint}/{draws}"));

    let mut rng = Rng::new(77);
    let n = 10_000;
    let mut lo = [f64::INFINITY; 5];
    let mut hi = [f64::NEG_INFINITY; 5];
    let mut mirrored = 0;
    let mut inside = 0;
    for _ in 0..n {
        let p = AugmentParams::sample(&mut rng, 0.5);
        let v = [
            p.crop.iter().copied().fold(f64::INFINITY, f64::min),
            p.contrast,
            p.rotation_deg,
            p.shift_lateral,
            p.shift_axial,
        ];
        let crop_max = p.crop.iter().copied().fold(0.0, f64::max);
        for k in 0..5 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(if k == 0 { crop_max } else { v[k] });
        }
        mirrored += p.mirror as usize;
        let within = p.crop.iter().all(|&c| (0.0..=0.05).contains(&c))
            && (0.5..=1.5).contains(&p.contrast)
            && p.rotation_deg.abs() <= 10.0
            && p.shift_lateral.abs() <= 0.5
            && p.shift_axial.abs() <= 0.1;
        inside += within as usize;
    }
    let constants = MAX_CROP == 0.05
        && CONTRAST_RANGE == (0.5, 1.5)
        && MAX_ROTATION_DEG == 10.0
        && MAX_SHIFT_LATERAL == 0.5
        && MAX_SHIFT_AXIAL == 0.1;
    let frac = mirrored as f64 / n as f64;
    ok &= inside == n && constants && (frac - 0.5).abs() < 0.03;
    notes.push(format!(
        "{inside}/{n} draws in range (crop {:.3}..{:.3}, contrast {:.3}..{:.3}, rotation {:.2}..{:.2}, shifts {:.3}..{:.3} / {:.3}..{:.3}, mirrored {frac:.3})",
        lo[0], hi[0], lo[1], hi[1], lo[2], hi[2], lo[3], hi[3], lo[4], hi[4]
    ));
    outcome(ok, notes.join("; "))
}

// ---------------------------------------------------------------- 7

fn optimizer() -> Outcome {
    let hp = TrainConfig::default().adam();
    let lr = 1e-3;
    let mut worst = 0.0f64;
    for (i, &g) in [3.0, -10.0, 250.0, -0.7].iter().enumerate() {
        let mut p = Tensor::<f64>::full(&[1], 0.25 * i as f64);
        let before = p.data()[0];
        let grad = [Tensor::full(&[1], g)];
        let mut state = AdamState::new([&p], lr);
        adam_step(&mut [&mut p], &grad, &mut state, &hp).unwrap();
        let step = before - p.data()[0];
        worst = worst.max(((step.abs() - lr) / lr).abs());
        if step.signum() != g.signum() {
            worst = f64::INFINITY;
        }
    }
    let adam_ok = worst < 1e-6;

    let mut sched = TrainConfig::default().scheduler();
    let mut lrs = Vec::new();
    lrs.push(sched.observe(1.0));
    for _ in 0..25 {
        lrs.push(sched.observe(1.0));
    }
    // Best at epoch 1, then flat: the 10th stale epoch (index 10) halves.
    let plateau_ok = lrs[..10].iter().all(|&l| l == 1e-3) && lrs[10] == 5e-4 && lrs[11..20].iter().all(|&l| l == 5e-4) && lrs[20] == 2.5e-4;
    let improving_ok = {
        let mut s = TrainConfig::default().scheduler();
        (0..40).map(|i| s.observe(1.0 - 0.01 * i as f64)).all(|l| l == 1e-3)
    };
    let mut floor = TrainConfig::default().scheduler();
    let mut last = 0.0;
    let mut min_seen = f64::INFINITY;
    for _ in 0..500 {
        last = floor.observe(2.0);
        min_seen = min_seen.min(last);
    }
    let floor_ok = last == 1e-6 && min_seen >= 1e-6;
    outcome(
        adam_ok && plateau_ok && improving_ok && floor_ok,
        format!(
            "first Adam step within {worst:.1e} of lr; plateau halving at stale epoch 10: {plateau_ok}; no decay while improving: {improving_ok}; floor {last:e} held: {floor_ok}"
        ),
    )
}

// ---------------------------------------------------------------- 8

/// Gamma function for integer and half-integer arguments.
fn gamma_half(x2: u32) -> f64 {
    // x = x2 / 2
    let mut g = if x2 % 2 == 0 { 1.0 } else { std::f64::consts::PI.sqrt() };
    let mut k = if x2 % 2 == 0 { 2 } else { 1 };
    while k < x2 {
        g *= k as f64 / 2.0;
        k += 2;
    }
    g
}

/// Two-sided Student t tail probability by composite Simpson quadrature of
/// the density over `[0, |t|]`.
fn t_pvalue_quadrature(t: f64, df: u32) -> f64 {
    let nu = df as f64;
    let c = gamma_half(df + 1) / ((nu * std::f64::consts::PI).sqrt() * gamma_half(df));
    let f = |x: f64| c * (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0);
    let b = t.abs();
    let n = 200_000;
    let h = b / n as f64;
    let mut s = f(0.0) + f(b);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - 2.0 * s * h / 3.0
}

fn metrics() -> Outcome {
    let mut rng = Rng::new(21);
    let mut ordered = 0;
    let n = 1000;
    for _ in 0..n {
        let len = rng.int_inclusive(1, 40);
        let pred = random_tensor(&mut rng, &[len], 0.0, 1.0);
        let label = random_tensor(&mut rng, &[len], 0.0, 1.0);
        let mut mask = Tensor::from_fn(&[len], |_| if rng.bernoulli(0.7) { 1.0 } else { 0.0 });
        mask.data_mut()[0] = 1.0;
        let m = eval::metrics(&pred, &label, &mask, Profile::ProstateKpa).unwrap();
        let slack = 1e-12;
        if m.rmse + slack >= m.mae && m.mae + slack >= m.me.abs() {
            ordered += 1;
        }
    }

    // Worked by hand: valid differences (label - prediction) of 0.1, 0.0
    // and -0.2 normalized, i.e. 10, 0 and -20 kPa.
    let pred = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let label = Tensor::new(vec![4], vec![0.2, 0.2, 0.1, 0.9]).unwrap();
    let mask = Tensor::new(vec![4], vec![1.0, 1.0, 1.0, 0.0]).unwrap();
    let m = eval::metrics(&pred, &label, &mask, Profile::ProstateKpa).unwrap();
    let expect = [(500.0f64 / 3.0).sqrt(), 10.0, -10.0 / 3.0];
    let hand1 = [m.rmse, m.mae, m.me].iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-9) && m.valid == 3;
    // Same pattern in m/s with a 10 m/s full scale: 1, 0, -2 m/s.
    let m2 = eval::metrics(&pred, &label, &mask, Profile::ThyroidMps).unwrap();
    let expect2 = [(5.0f64 / 3.0).sqrt(), 1.0, -1.0 / 3.0];
    let hand2 = [m2.rmse, m2.mae, m2.me].iter().zip(expect2).all(|(a, b)| (a - b).abs() < 1e-9);

    // Paired t-tests against the quadrature oracle.
    let mut worst_p = 0.0f64;
    let mut worst_t = 0.0f64;
    for k in 0..30u64 {
        let mut r = Rng::new(300 + k);
        let len = r.int_inclusive(3, 15);
        let a: Vec<f64> = (0..len).map(|_| r.range(0.0, 10.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| v + r.range(-2.0, 2.5)).collect();
        let res = eval::paired_ttest(&a, &b).unwrap();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let nf = len as f64;
        let mean = d.iter().sum::<f64>() / nf;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
        let t = mean / (sd / nf.sqrt());
        worst_t = worst_t.max((t - res.t).abs());
        worst_p = worst_p.max((t_pvalue_quadrature(t, (len - 1) as u32) - res.p).abs());
    }
    let pass = ordered == n && hand1 && hand2 && worst_p < 1e-6 && worst_t < 1e-9;
    outcome(
        pass,
        format!(
            "RMSE >= MAE >= |ME| on {ordered}/{n}; hand examples kPa {hand1} m/s {hand2}; t-test |dt| {worst_t:.1e}, |dp| {worst_p:.1e} vs quadrature"
        ),
    )
}

// ---------------------------------------------------------------- 9

fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    let d = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = BTreeMap::<usize, (f64, usize)>::new();
        for (j, q) in points.iter().enumerate() {
            if i != j {
                let e = sums.entry(labels[j]).or_insert((0.0, 0));
                e.0 += d(p, q);
                e.1 += 1;
            }
        }
        let own = sums.get(&labels[i]).map_or(0.0, |&(s, c)| s / c as f64);
        let other = sums
            .iter()
            .filter(|(&l, _)| l != labels[i])
            .map(|(_, &(s, c))| s / c as f64)
            .fold(f64::INFINITY, f64::min);
        total += (other - own) / own.max(other);
    }
    total / points.len() as f64
}

fn tsne_benchmark() -> Outcome {
    let mut rng = Rng::new(31);
    let per = 40;
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for c in 0..2 {
        let centre: Vec<f64> = (0..10).map(|k| if c == 0 { 0.0 } else if k < 5 { 3.0 } else { -3.0 }).collect();
        for _ in 0..per {
            x.push(centre.iter().map(|m| m + rng.normal()).collect::<Vec<f64>>());
            labels.push(c);
        }
    }
    let n = x.len();
    let cfg = EmbeddingConfig { perplexity: 15.0, seed: 32, ..EmbeddingConfig::default() };
    let emb = tsne::embed(&x, &cfg).unwrap();
    let s = silhouette(&emb.coords, &labels);

    let d2 = tsne::squared_distances(&x).unwrap();
    let aff = tsne::conditional_affinities(&d2, n, cfg.perplexity);
    let target = cfg.perplexity.log2();
    let mut worst_row = 0.0f64;
    let mut worst_h = 0.0f64;
    for i in 0..n {
        let row = &aff.conditional[i * n..(i + 1) * n];
        worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        // Entropy recomputed from the row itself.
        let h: f64 = -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.log2()).sum::<f64>();
        worst_h = worst_h.max((h - target).abs());
    }
    let pass = s > 0.5 && worst_row < 1e-12 && worst_h < ENTROPY_TOL;
    outcome(
        pass,
        format!("silhouette {s:.3} on {n} points; max |row sum - 1| {worst_row:.1e}; max |H - log2 perplexity| {worst_h:.1e} bits (tol {ENTROPY_TOL:e})"),
    )
}

// ---------------------------------------------------------------- 10

fn sswe(dir: &Path, args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_sswe")).current_dir(dir).args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("sswe {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().unwrap_or(-1)
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

const TINY_CONFIG: &str = r#"{
  "net": {"channels": 8, "input_height": 16, "input_width": 24},
  "phantom": {"height": 16, "width": 24, "inclusion_radius_px": [2, 5]},
  "train": {"batch_size": 4}
}"#;

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("tiny.json"), TINY_CONFIG).unwrap();
    let mut codes = Vec::new();
    for run in ["a", "b"] {
        let d = |s: &str| format!("{run}-{s}");
        codes.push(sswe(dir, &["phantom", "--config", "tiny.json", "--seed", "9", "--count", "12", "--out", &d("train")]));
        codes.push(sswe(
            dir,
            &["phantom", "--config", "tiny.json", "--seed", "9", "--count", "6", "--start-index", "12", "--out", &d("test")],
        ));
        codes.push(sswe(
            dir,
            &["train", "--config", "tiny.json", "--seed", "9", "--epochs", "4", "--data", &d("train"), "--out", &d("run")],
        ));
        codes.push(sswe(dir, &["eval", "--data", &d("test"), "--model", &format!("{run}-run/model"), "--out", &d("eval")]));
    }
    if codes.iter().any(|&c| c != 0) {
        return outcome(false, format!("pipeline exit codes {codes:?}"));
    }
    let mut compared = 0;
    let mut differing = Vec::new();
    for (sub, skip) in [("train", None), ("test", None), ("run", Some("train.log")), ("eval", None)] {
        let a = files(&dir.join(format!("a-{sub}")));
        let b = files(&dir.join(format!("b-{sub}")));
        if a.keys().ne(b.keys()) {
            differing.push(format!("{sub}: file lists differ"));
        }
        for (name, bytes) in &a {
            if Some(name.as_str()) == skip {
                continue;
            }
            compared += 1;
            if b.get(name) != Some(bytes) {
                differing.push(format!("{sub}/{name}"));
            }
        }
    }
    let has_model = dir.join("a-run/model").join(dataio::CHECKPOINT).exists();
    let has_report = dir.join("a-eval/report.json").exists();
    outcome(
        differing.is_empty() && has_model && has_report && compared > 10,
        if differing.is_empty() {
            format!("{compared} files bitwise identical across two seeded runs (datasets, checkpoint, reports)")
        } else {
            format!("differences: {differing:?}")
        },
    )
}

// ---------------------------------------------------------------- 11

fn grid() -> Outcome {
    let cfg = PhantomConfig { seed: 60, ..PhantomConfig::default() };
    let all: Vec<Sample> = phantom::generate(&cfg, 60).unwrap().into_iter().map(|p| p.sample).collect();
    let split = dataio::split_by_patient(&all, 16, 4, 61).unwrap();
    let train_set: Vec<Sample> = split.train.iter().map(|&i| all[i].clone()).collect();
    let val_set: Vec<Sample> = split.test.iter().map(|&i| all[i].clone()).collect();
    let spec = GridSpec::default().scaled(0.01);
    let config = TrainConfig { seed: 62, ..TrainConfig::default() };
    let mut rows = 0;
    let report = train::grid_search(&train_set, &val_set, &NetConfig::default(), &config, &spec, |_| rows += 1).unwrap();
    let table = report.table();
    let min = report.rows.iter().map(|r| r.validation_rmse).fold(f64::INFINITY, f64::min);
    let grid_ok = spec.batch_sizes == [16, 32, 64] && spec.encoder_blocks == [2, 3, 4] && spec.epochs == [21, 25, 28];
    let full = report.rows.len() == 27 && rows == 27 && table.lines().count() == 28;
    let mut cells: Vec<_> = report.rows.iter().map(|r| (r.batch_size, r.encoder_blocks, r.epochs)).collect();
    cells.sort();
    cells.dedup();
    let best = report.best_row();
    let pass = grid_ok && full && cells.len() == 27 && best.validation_rmse == min;
    for line in table.lines() {
        println!("    {line}");
    }
    outcome(
        pass,
        format!(
            "{} cells on {} train / {} validation images; best batch {} blocks {} epochs {} (validation RMSE {:.4}, grid minimum {min:.4})",
            report.rows.len(),
            train_set.len(),
            val_set.len(),
            best.batch_size,
            best.encoder_blocks,
            best.epochs,
            best.validation_rmse
        ),
    )
}
