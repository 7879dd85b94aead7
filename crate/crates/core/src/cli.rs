//! Command-line front end.
//!
//! Every command writes into a fresh run directory: work happens in a hidden
//! sibling that is renamed into place on success, and an existing directory
//! is never reused. Without `--out`, runs go under `$SSWE_OUTPUT_ROOT`
//! (default `runs`) as `<command>-seed<seed>`.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataio::{self, Channel, Checkpoint, DataError, ExportKind, Profile, Sample};
use crate::eval::{self, EvalError};
use crate::phantom::{self, PhantomConfig, PhantomError};
use crate::train::{self, Example, GridSpec, TrainConfig, TrainError, Trainer};
use crate::tsne::{self, EmbeddingConfig, TsneError};
use crate::unet::{NetConfig, NetError, UNetParams};

pub const OUTPUT_ROOT_ENV: &str = "SSWE_OUTPUT_ROOT";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

type Result<T> = std::result::Result<T, CliError>;

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Config(_) | NetError::Indivisible { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient(_) => CliError::Numeric(e.to_string()),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Net(n) => n.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TsneError> for CliError {
    fn from(e: TsneError) -> Self {
        match e {
            TsneError::Config(_) | TsneError::PerplexityTooLarge { .. } | TsneError::TooFewPoints(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "sswe", version, about = "Synthetic shear-wave elastography from B-mode images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    Phantom(PhantomArgs),
    /// Train a network on a dataset.
    Train(TrainArgs),
    /// Score a model on a dataset, per image and per patient.
    Eval(EvalArgs),
    /// Predict an elasticity map for one gray image of any size.
    Infer(InferArgs),
    /// Grid search over batch size, encoder depth and epoch count.
    Gridsearch(GridArgs),
    /// t-SNE of latent features from one or more datasets.
    Embed(EmbedArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory to create; must not exist.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub count: usize,
    /// Index of the first sample; use a multiple of the planes per patient
    /// to get a patient-disjoint set from the same seed.
    #[arg(long, default_value_t = 0)]
    pub start_index: usize,
    #[arg(long, value_enum)]
    pub profile: Option<ProfileArg>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ProfileArg {
    ProstateKpa,
    ThyroidMps,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::ProstateKpa => Profile::ProstateKpa,
            ProfileArg::ThyroidMps => Profile::ThyroidMps,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Disable augmentation (augment_fraction = 0).
    #[arg(long)]
    pub no_augment: bool,
    /// Write a resumable checkpoint every N epochs (0: final model only).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Continue from a checkpoint directory written by a previous run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Second model for a paired per-patient comparison.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Also export prediction and signed-difference images.
    #[arg(long)]
    pub maps: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.75)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "prostate-kpa")]
    pub profile: ProfileArg,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub val_data: PathBuf,
    /// Multiplier on the grid's epoch counts.
    #[arg(long, default_value_t = 1.0)]
    pub epoch_scale: f64,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directories; each is one domain, labelled by its directory name.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub perplexity: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

/// Every tunable, as read from a config file and echoed into each run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub phantom: PhantomConfig,
    pub embedding: EmbeddingConfig,
    pub grid: GridSpec,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(io(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.train.seed = s;
            self.phantom.seed = s;
            self.embedding.seed = s;
        }
        self
    }
}

/// A run directory being filled; [`RunDir::commit`] moves it into place.
struct RunDir {
    staging: PathBuf,
    target: PathBuf,
}

impl RunDir {
    fn create(out: Option<&Path>, command: &str, seed: u64) -> Result<Self> {
        let target = match out {
            Some(p) => p.to_path_buf(),
            None => {
                let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
                root.join(format!("{command}-seed{seed}"))
            }
        };
        if target.exists() {
            return Err(CliError::Usage(format!("{} already exists; refusing to overwrite", target.display())));
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(io(&parent))?;
        let name = target.file_name().ok_or_else(|| CliError::Usage("output path has no name".into()))?;
        let staging = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(io(&staging))?;
        }
        fs::create_dir(&staging).map_err(io(&staging))?;
        Ok(Self { staging, target })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    fn write_json<S: Serialize>(&self, name: &str, value: &S) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
        let p = self.path(name);
        fs::write(&p, text + "\n").map_err(io(&p))
    }

    fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(io(&p))
    }

    fn commit(self) -> Result<PathBuf> {
        if self.target.exists() {
            return Err(CliError::Usage(format!("{} appeared during the run; results left in {}", self.target.display(), self.staging.display())));
        }
        fs::rename(&self.staging, &self.target).map_err(io(&self.target))?;
        Ok(self.target.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if self.staging.exists() && !self.target.exists() {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            Ok(())
        }
        Err(e) => Err(CliError::Usage(e.to_string().trim_start_matches("error: ").trim_end().to_string())),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Gridsearch(a) => cmd_grid(a),
        Command::Embed(a) => cmd_embed(a),
    }
}

fn load_data(path: &Path) -> Result<Vec<Sample>> {
    let samples = dataio::load_dataset(path)?;
    if samples.is_empty() {
        return Err(CliError::Data(format!("{}: dataset has no samples", path.display())));
    }
    Ok(samples)
}

fn check_shapes(samples: &[Sample], net: &NetConfig) -> Result<()> {
    let want = net.input_shape();
    match samples.iter().find(|s| s.bmode.shape() != want) {
        Some(s) => Err(CliError::Data(format!(
            "sample {} has shape {:?}, network expects {want:?}",
            s.plane_id,
            s.bmode.shape()
        ))),
        None => Ok(()),
    }
}

fn cmd_phantom(a: PhantomArgs) -> Result<()> {
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let mut cfg = RunConfig::load(a.common.config.as_deref())?.with_seed(a.common.seed);
    if let Some(p) = a.profile {
        cfg.phantom.profile = p.into();
    }
    let run = RunDir::create(a.common.out.as_deref(), "phantom", cfg.phantom.seed)?;
    let samples: Vec<Sample> =
        phantom::generate_range(&cfg.phantom, a.start_index, a.count)?.into_iter().map(|p| p.sample).collect();
    dataio::save_dataset(&run.staging, &samples)?;
    run.write_json("config.json", &cfg)?;
    let dir = run.commit()?;
    println!("wrote {} samples to {}", a.count, dir.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainSummary<'a> {
    config: &'a RunConfig,
    samples: usize,
    epochs: usize,
    final_loss: Option<f64>,
    losses: &'a [f64],
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?.with_seed(a.common.seed);
    let mut trainer = match &a.resume {
        Some(dir) => {
            let t = Trainer::resume(Checkpoint::load(dir)?)?;
            cfg.net = t.params.config.clone();
            cfg.train = t.config.clone();
            t
        }
        None => {
            if let Some(b) = a.batch_size {
                cfg.train.batch_size = b;
            }
            if a.no_augment {
                cfg.train.augment_fraction = 0.0;
            }
            cfg.net.validate()?;
            Trainer::new(&cfg.net, cfg.train.clone())?
        }
    };
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
        trainer.config.epochs = e;
    }
    let samples = load_data(&a.data)?;
    check_shapes(&samples, &cfg.net)?;
    let data: Vec<Example> =
        samples.iter().map(|s| Example::from_sample(s, cfg.train.confidence_threshold)).collect();

    let run = RunDir::create(a.common.out.as_deref(), "train", cfg.train.seed)?;
    run.write_json("config.json", &cfg)?;
    let log_path = run.path("train.log");
    let mut log = fs::File::create(&log_path).map_err(io(&log_path))?;
    let mut failure = None;
    let mut clock = Instant::now();
    let result = trainer.run(&data, |t, s| {
        let line = format!("epoch {} loss {:.6} lr {:e} seconds {:.3}", s.epoch, s.loss, s.lr, clock.elapsed().as_secs_f64());
        clock = Instant::now();
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            failure.get_or_insert(CliError::Data(format!("{}: {e}", log_path.display())));
        }
        if a.checkpoint_every > 0 && s.epoch % a.checkpoint_every == 0 {
            let dir = run.path(&format!("checkpoints/epoch-{:06}", s.epoch));
            if let Err(e) = t.checkpoint().save(&dir) {
                failure.get_or_insert(e.into());
            }
        }
    });
    if let Err(e) = result {
        let _ = writeln!(log, "error: {e}");
        return Err(e.into());
    }
    if let Some(e) = failure {
        return Err(e);
    }
    trainer.checkpoint().save(&run.path("model"))?;
    run.write_json(
        "summary.json",
        &TrainSummary {
            config: &cfg,
            samples: data.len(),
            epochs: trainer.epoch,
            final_loss: trainer.losses.last().copied(),
            losses: &trainer.losses,
        },
    )?;
    let dir = run.commit()?;
    println!("model written to {}", dir.join("model").display());
    Ok(())
}

fn load_model(path: &Path) -> Result<UNetParams<f32>> {
    if !path.join(dataio::CHECKPOINT).exists() {
        return Err(CliError::Data(format!("{}: no model checkpoint found", path.display())));
    }
    Ok(Checkpoint::load(path)?.params)
}

#[derive(Debug, Serialize)]
struct Comparison {
    model: String,
    baseline: String,
    rmse: eval::PairedTest,
    mae: eval::PairedTest,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let params = load_model(&a.model)?;
    let samples = load_data(&a.data)?;
    check_shapes(&samples, &params.config)?;
    let run = RunDir::create(a.out.as_deref(), "eval", 0)?;
    let (report, preds) = eval::evaluate(&params, &samples, a.threshold)?;
    run.write_text("report.txt", &report.to_text())?;
    run.write_json("report.json", &report)?;
    if let Some(base) = &a.baseline {
        let bparams = load_model(base)?;
        check_shapes(&samples, &bparams.config)?;
        let (breport, _) = eval::evaluate(&bparams, &samples, a.threshold)?;
        run.write_json("baseline_report.json", &breport)?;
        let (r1, r0) = eval::paired_patient_values(&report, &breport, |p| p.rmse)?;
        let (m1, m0) = eval::paired_patient_values(&report, &breport, |p| p.mae)?;
        let cmp = Comparison {
            model: a.model.display().to_string(),
            baseline: base.display().to_string(),
            rmse: eval::paired_ttest(&r1, &r0)?,
            mae: eval::paired_ttest(&m1, &m0)?,
        };
        run.write_json("comparison.json", &cmp)?;
        println!(
            "mean RMSE {:.4} vs baseline {:.4} {} (paired t {:.3}, p {:.3e})",
            report.rmse.mean, breport.rmse.mean, report.unit, cmp.rmse.t, cmp.rmse.p
        );
    }
    if a.maps {
        let dir = run.path("maps");
        fs::create_dir(&dir).map_err(io(&dir))?;
        for (s, p) in samples.iter().zip(&preds) {
            let mask = s.mask(a.threshold);
            let diff = eval::difference_map(p, &s.elasticity, &mask)?;
            dataio::export_image(p, ExportKind::Elasticity, &dir.join(format!("{}_pred.ppm", s.plane_id)))?;
            dataio::export_image(&s.elasticity, ExportKind::Elasticity, &dir.join(format!("{}_label.ppm", s.plane_id)))?;
            dataio::export_image(&diff, ExportKind::SignedDifference, &dir.join(format!("{}_diff.ppm", s.plane_id)))?;
        }
    }
    print!("{}", report.to_text());
    run.commit()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct InferSummary {
    source_height: usize,
    source_width: usize,
    unit: &'static str,
    min: f64,
    mean: f64,
    max: f64,
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let params = load_model(&a.model)?;
    let image = dataio::read_gray_image(&a.image)?;
    let (sh, sw) = (image.shape()[1], image.shape()[2]);
    let [_, h, w] = params.config.input_shape();
    let x = dataio::regrid_bilinear(&image, (h, w))?;
    let run = RunDir::create(a.out.as_deref(), "infer", 0)?;
    let pred = eval::predict(&params, &[&x])?.remove(0);
    let profile: Profile = a.profile.into();
    let physical = dataio::denormalize(&pred, Channel::Elasticity(profile));
    dataio::write_raster(&run.path("prediction.f32"), &pred)?;
    dataio::export_image(&x, ExportKind::Gray, &run.path("input.pgm"))?;
    dataio::export_image(&pred, ExportKind::Elasticity, &run.path("prediction.ppm"))?;
    let stat = |r: std::result::Result<f32, crate::tensor::TensorError>| r.map(f64::from).map_err(|e| CliError::Data(e.to_string()));
    let summary = InferSummary {
        source_height: sh,
        source_width: sw,
        unit: profile.unit(),
        min: stat(physical.min())?,
        mean: stat(physical.mean())?,
        max: stat(physical.max())?,
    };
    run.write_json("summary.json", &summary)?;
    let dir = run.commit()?;
    println!(
        "{}x{} -> {h}x{w}; elasticity {:.2}..{:.2} {} written to {}",
        sh,
        sw,
        summary.min,
        summary.max,
        summary.unit,
        dir.display()
    );
    Ok(())
}

fn cmd_grid(a: GridArgs) -> Result<()> {
    let cfg = RunConfig::load(a.common.config.as_deref())?.with_seed(a.common.seed);
    if !(a.epoch_scale > 0.0) {
        return Err(CliError::Usage("--epoch-scale must be positive".into()));
    }
    let train_set = load_data(&a.data)?;
    let val_set = load_data(&a.val_data)?;
    check_shapes(&train_set, &cfg.net)?;
    check_shapes(&val_set, &cfg.net)?;
    let grid = cfg.grid.scaled(a.epoch_scale);
    let run = RunDir::create(a.common.out.as_deref(), "gridsearch", cfg.train.seed)?;
    run.write_json("config.json", &cfg)?;
    let report = train::grid_search(&train_set, &val_set, &cfg.net, &cfg.train, &grid, |r| {
        println!(
            "batch {} blocks {} epochs {} train_loss {:.6} val_rmse {:.6}",
            r.batch_size, r.encoder_blocks, r.epochs, r.final_train_loss, r.validation_rmse
        );
    })?;
    run.write_text("grid.txt", &report.table())?;
    run.write_json("grid.json", &report)?;
    let best = report.best_row();
    println!(
        "best: batch {} blocks {} epochs {} (validation RMSE {:.6})",
        best.batch_size, best.encoder_blocks, best.epochs, best.validation_rmse
    );
    run.commit()?;
    Ok(())
}

fn cmd_embed(a: EmbedArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?.with_seed(a.common.seed);
    if let Some(p) = a.perplexity {
        cfg.embedding.perplexity = p;
    }
    if let Some(i) = a.iterations {
        cfg.embedding.iterations = i;
    }
    let params = load_model(&a.model)?;
    let mut ids = Vec::new();
    let mut features = Vec::new();
    for dir in &a.data {
        let samples = load_data(dir)?;
        check_shapes(&samples, &params.config)?;
        let domain = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
        features.extend(tsne::latent_features(&params, &samples.iter().map(|s| &s.bmode).collect::<Vec<_>>())?);
        ids.extend(samples.into_iter().map(|s| (s.plane_id, domain.clone())));
    }
    let run = RunDir::create(a.common.out.as_deref(), "embed", cfg.embedding.seed)?;
    run.write_json("config.json", &cfg)?;
    let emb = tsne::embed(&features, &cfg.embedding)?;
    let mut csv = String::from("id,domain,x,y\n");
    for ((id, domain), [x, y]) in ids.iter().zip(&emb.coords) {
        csv += &format!("{id},{domain},{x},{y}\n");
    }
    run.write_text("embedding.csv", &csv)?;
    run.write_json("summary.json", &serde_json::json!({
        "points": emb.coords.len(),
        "feature_dimension": features.first().map_or(0, Vec::len),
        "final_kl": emb.kl.last(),
    }))?;
    let dir = run.commit()?;
    println!("embedded {} images into {}", emb.coords.len(), dir.join("embedding.csv").display());
    Ok(())
}
