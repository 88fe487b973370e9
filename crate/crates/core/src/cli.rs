//! Command-line driver.
//!
//! Every setting can come from a flag, from a `key = value` config file given
//! with `--config`, or from the built-in default, in that order of precedence.
//! Each command first writes the fully resolved settings to
//! `<outdir>/config.resolved`, which is itself a valid config file.

use std::fmt::{self, Display, Write as _};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::data::{self, Dataset, Examples, ImageShape, PnmImage, SynthSpec};
use crate::error::{Error, Result};
use crate::infer::{self, InferenceConfig, Sampler, YMode};
use crate::learn::{self, BatchSize, ClusteredGenerator, MetricsLog, Optimizer, TrainConfig, TrainState};
use crate::metrics;
use crate::model::{self, LatentState, ModelConfig};
use crate::netcore::{Activation, Architecture, GeneratorNet};
use crate::pixelwise::{self, LabelMap, PixelLatent, PixelScene, SceneSpec};
use crate::rng::{stream, Purpose};

#[derive(Parser, Debug)]
#[command(name = "clustergen", version, about = "Clustered generator: train, evaluate and sample")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Learn a generator and per-example latents.
    Train(CommandArgs),
    /// Assign clusters to a dataset with a trained generator.
    Eval(CommandArgs),
    /// Render a grid of generated samples, one column per cluster.
    Generate(CommandArgs),
    /// Learn a per-pixel scene model.
    PixelTrain(CommandArgs),
    /// Infer label maps with a trained scene model.
    PixelEval(CommandArgs),
    /// Train once per Langevin step count and report the final accuracy of each.
    LangevinSweep(CommandArgs),
}

#[derive(Args, Debug, Clone)]
pub struct CommandArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: Settings,
}

/// Comma-separated list of positive integers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntList(pub Vec<usize>);

impl FromStr for IntList {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let items = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::config(format!("expected a comma-separated list of integers, got {s:?}")))?;
        Ok(IntList(items))
    }
}

impl Display for IntList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// Activation name as accepted on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActivationArg(pub Activation);

impl FromStr for ActivationArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activation::parse(s)
            .map(ActivationArg)
            .ok_or_else(|| Error::config(format!("unknown activation {s:?}")))
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("bad value for {key}: {value:?} ({e})")))
}

macro_rules! settings {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty => $key:literal ),* $(,)?) => {
        /// Every tunable setting; unset fields fall through to the next source.
        #[derive(Args, Clone, Debug, Default)]
        pub struct Settings {
            $( $(#[$doc])* #[arg(long = $key)] pub $field: Option<$ty>, )*
        }

        impl Settings {
            /// Applies one config-file entry; `_` and `-` are interchangeable in keys.
            /// An empty value leaves the setting unset.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let key = key.replace('_', "-");
                let value = value.trim();
                match key.as_str() {
                    $( $key => {
                        self.$field = if value.is_empty() { None } else { Some(parse_value($key, value)?) };
                    } )*
                    other => return Err(Error::config(format!("unknown config key {other:?}"))),
                }
                Ok(())
            }

            /// Field-wise `self` where set, otherwise `fallback`.
            pub fn or(self, fallback: Settings) -> Settings {
                Settings { $( $field: self.$field.or(fallback.$field), )* }
            }
        }
    };
}

settings! {
    /// Output directory.
    outdir: PathBuf => "outdir",
    seed: u64 => "seed",
    /// Number of clusters K.
    k: usize => "k",
    latent_dim: usize => "latent-dim",
    sigma: f64 => "sigma",
    /// Langevin step size; defaults to 0.3 sigma^2 (divided by the pixel count for scenes).
    delta: f64 => "delta",
    langevin_steps: usize => "langevin-steps",
    iters: usize => "iters",
    lr: f64 => "lr",
    momentum: f64 => "momentum",
    /// Minibatch size or `all`.
    batch: BatchSize => "batch",
    /// Training-time y update: `sample` or `map`.
    y_mode: YMode => "y-mode",
    /// Worker threads (default: all cores).
    threads: usize => "threads",
    /// Synthetic mixture, e.g. `k=3,d=2,D=16,sep=10,n=3000`.
    synthetic: SynthSpec => "synthetic",
    idx_images: PathBuf => "idx-images",
    idx_labels: PathBuf => "idx-labels",
    /// Use only the first N examples.
    limit: usize => "limit",
    /// `sgd` (momentum) or `adam`.
    optimizer: Optimizer => "optimizer",
    log_every: usize => "log-every",
    /// Hidden layer widths, e.g. `64,64`.
    hidden: IntList => "hidden",
    hidden_activation: ActivationArg => "hidden-activation",
    output_activation: ActivationArg => "output-activation",
    /// Generator or scene checkpoint to read.
    checkpoint: PathBuf => "checkpoint",
    /// Gibbs sweeps per example at evaluation.
    eval_sweeps: usize => "eval-sweeps",
    rows: usize => "rows",
    cols: usize => "cols",
    /// Image shape `HxW` or `HxWxC` for rendering.
    shape: ImageShape => "shape",
    /// Langevin step counts for `langevin-sweep`.
    steps_list: IntList => "steps-list",
    /// Synthetic scenes, e.g. `k=3,shape=16x16x3,sep=10,n=50`.
    scenes: SceneSpec => "scenes",
    /// Directory of PGM/PPM scene images.
    image_dir: PathBuf => "image-dir",
    /// Directory of ground-truth label-map PGMs named like the images.
    map_dir: PathBuf => "map-dir",
    /// Potts smoothing weight for scenes.
    beta: f64 => "beta",
    /// Gibbs sweeps per scene at evaluation.
    sweeps: usize => "sweeps",
}

/// Reads a `key = value` file; blank lines and `#` comments are ignored.
pub fn parse_config_file(text: &str) -> Result<Settings> {
    let mut settings = Settings::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("config line {}: expected key = value", n + 1)))?;
        settings.set(key.trim(), value)?;
    }
    Ok(settings)
}

/// Flags over file over defaults.
pub fn resolve_settings(args: &CommandArgs) -> Result<Settings> {
    let file = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
            parse_config_file(&text)?
        }
        None => Settings::default(),
    };
    Ok(args.settings.clone().or(file))
}

/// Settings with every default filled in.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub outdir: PathBuf,
    pub seed: u64,
    pub k: Option<usize>,
    pub latent_dim: Option<usize>,
    pub sigma: f64,
    pub delta: Option<f64>,
    pub langevin_steps: usize,
    pub iters: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: BatchSize,
    pub y_mode: YMode,
    pub threads: Option<usize>,
    pub synthetic: Option<SynthSpec>,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub limit: Option<usize>,
    pub optimizer: Optimizer,
    pub log_every: usize,
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub checkpoint: Option<PathBuf>,
    pub eval_sweeps: usize,
    pub rows: Option<usize>,
    pub cols: Option<usize>,
    pub shape: Option<ImageShape>,
    pub steps_list: Vec<usize>,
    pub scenes: Option<SceneSpec>,
    pub image_dir: Option<PathBuf>,
    pub map_dir: Option<PathBuf>,
    pub beta: f64,
    pub sweeps: usize,
}

impl RunConfig {
    pub fn from_settings(s: Settings) -> Result<Self> {
        let train = TrainConfig::default();
        let arch = Architecture::default();
        let cfg = RunConfig {
            outdir: s.outdir.unwrap_or_else(|| PathBuf::from("out")),
            seed: s.seed.unwrap_or(0),
            k: s.k,
            latent_dim: s.latent_dim,
            sigma: s.sigma.unwrap_or(model::DEFAULT_SIGMA),
            delta: s.delta,
            langevin_steps: s.langevin_steps.unwrap_or(infer::DEFAULT_LANGEVIN_STEPS),
            iters: s.iters.unwrap_or(train.iterations),
            lr: s.lr.unwrap_or(train.learning_rate),
            momentum: s.momentum.unwrap_or(train.momentum),
            batch: s.batch.unwrap_or(train.batch),
            y_mode: s.y_mode.unwrap_or(YMode::Sample),
            threads: s.threads,
            synthetic: s.synthetic,
            idx_images: s.idx_images,
            idx_labels: s.idx_labels,
            limit: s.limit,
            optimizer: s.optimizer.unwrap_or(train.optimizer),
            log_every: s.log_every.unwrap_or(train.log_every),
            hidden: s.hidden.map_or(arch.hidden, |h| h.0),
            hidden_activation: s.hidden_activation.map_or(arch.hidden_activation, |a| a.0),
            output_activation: s.output_activation.map_or(arch.output_activation, |a| a.0),
            checkpoint: s.checkpoint,
            eval_sweeps: s.eval_sweeps.unwrap_or(5),
            rows: s.rows,
            cols: s.cols,
            shape: s.shape,
            steps_list: s.steps_list.map_or_else(|| vec![1, 5, 15, 30], |l| l.0),
            scenes: s.scenes,
            image_dir: s.image_dir,
            map_dir: s.map_dir,
            beta: s.beta.unwrap_or(0.0),
            sweeps: s.sweeps.unwrap_or(20),
        };
        if cfg.threads == Some(0) {
            return Err(Error::config("threads must be positive"));
        }
        if cfg.steps_list.is_empty() {
            return Err(Error::config("steps-list must not be empty"));
        }
        if cfg.synthetic.is_some() && cfg.idx_images.is_some() {
            return Err(Error::config("choose either --synthetic or --idx-images, not both"));
        }
        Ok(cfg)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            hidden: self.hidden.clone(),
            hidden_activation: self.hidden_activation,
            output_activation: self.output_activation,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iters,
            learning_rate: self.lr,
            momentum: self.momentum,
            batch: self.batch,
            seed: self.seed,
            log_every: self.log_every,
            optimizer: self.optimizer,
        }
    }

    pub fn inference(&self, default_delta: f64) -> InferenceConfig {
        InferenceConfig {
            step_size: self.delta.unwrap_or(default_delta),
            steps: self.langevin_steps,
            y_mode: self.y_mode,
            rng_seed: self.seed,
        }
    }

    /// `key = value` lines for every setting; unset optional ones have an empty value.
    pub fn render(&self) -> String {
        fn opt<T: Display>(v: &Option<T>) -> String {
            v.as_ref().map(ToString::to_string).unwrap_or_default()
        }
        fn path(v: &Option<PathBuf>) -> String {
            v.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        }
        let delta = self
            .delta
            .map(|d| d.to_string())
            .unwrap_or_else(|| infer::default_step_size(self.sigma).to_string());
        let rows: Vec<(&str, String)> = vec![
            ("outdir", self.outdir.display().to_string()),
            ("seed", self.seed.to_string()),
            ("k", opt(&self.k)),
            ("latent-dim", opt(&self.latent_dim)),
            ("sigma", self.sigma.to_string()),
            ("delta", delta),
            ("langevin-steps", self.langevin_steps.to_string()),
            ("iters", self.iters.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("batch", self.batch.to_string()),
            ("y-mode", self.y_mode.name().to_string()),
            ("threads", opt(&self.threads)),
            ("synthetic", opt(&self.synthetic)),
            ("idx-images", path(&self.idx_images)),
            ("idx-labels", path(&self.idx_labels)),
            ("limit", opt(&self.limit)),
            ("optimizer", self.optimizer.name().to_string()),
            ("log-every", self.log_every.to_string()),
            ("hidden", IntList(self.hidden.clone()).to_string()),
            ("hidden-activation", self.hidden_activation.name().to_string()),
            ("output-activation", self.output_activation.name().to_string()),
            ("checkpoint", path(&self.checkpoint)),
            ("eval-sweeps", self.eval_sweeps.to_string()),
            ("rows", opt(&self.rows)),
            ("cols", opt(&self.cols)),
            ("shape", opt(&self.shape)),
            ("steps-list", IntList(self.steps_list.clone()).to_string()),
            ("scenes", opt(&self.scenes)),
            ("image-dir", path(&self.image_dir)),
            ("map-dir", path(&self.map_dir)),
            ("beta", self.beta.to_string()),
            ("sweeps", self.sweeps.to_string()),
        ];
        let mut out = String::new();
        for (key, value) in rows {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }
}

/// Parses the process arguments and runs; maps errors onto exit codes
/// (1 for usage and configuration, 2 for numerical failures).
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

/// Parses `args` (program name first) and runs the command in-process.
pub fn run_from_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::config(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<()> {
    let (args, command): (&CommandArgs, fn(&RunConfig) -> Result<()>) = match &cli.command {
        Command::Train(a) => (a, cmd_train),
        Command::Eval(a) => (a, cmd_eval),
        Command::Generate(a) => (a, cmd_generate),
        Command::PixelTrain(a) => (a, cmd_pixel_train),
        Command::PixelEval(a) => (a, cmd_pixel_eval),
        Command::LangevinSweep(a) => (a, cmd_langevin_sweep),
    };
    let cfg = RunConfig::from_settings(resolve_settings(args)?)?;
    fs::create_dir_all(&cfg.outdir)?;
    fs::write(cfg.outdir.join("config.resolved"), cfg.render())?;
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config(format!("cannot start thread pool: {e}")))?
            .install(|| command(&cfg)),
        None => command(&cfg),
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dataset = if let Some(spec) = &cfg.synthetic {
        data::synth_mixture(spec)?
    } else if let Some(images) = &cfg.idx_images {
        data::load_idx(images, cfg.idx_labels.as_deref())?
    } else {
        return Err(Error::config("no dataset: pass --synthetic SPEC or --idx-images PATH"));
    };
    let dataset = match cfg.limit {
        Some(n) => dataset.head(n),
        None => dataset,
    };
    if dataset.is_empty() {
        return Err(Error::input("dataset is empty"));
    }
    Ok(dataset)
}

fn clusters_for(cfg: &RunConfig, dataset: Option<&Dataset>) -> Result<usize> {
    if let Some(k) = cfg.k {
        return Ok(k);
    }
    if let Some(spec) = &cfg.synthetic {
        return Ok(spec.clusters);
    }
    dataset
        .and_then(Dataset::label_count)
        .ok_or_else(|| Error::config("number of clusters unknown: pass --k"))
}

fn latent_dim_for(cfg: &RunConfig) -> usize {
    cfg.latent_dim
        .or_else(|| cfg.synthetic.as_ref().map(|s| s.latent_dim))
        .unwrap_or(10)
}

fn model_config(cfg: &RunConfig, dataset: &Dataset) -> Result<ModelConfig> {
    let k = clusters_for(cfg, Some(dataset))?;
    let model = ModelConfig::new(k, latent_dim_for(cfg), dataset.examples.dim()).with_sigma(cfg.sigma);
    model.validate()?;
    model.check_density()?;
    Ok(model)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn write_metrics(log: &MetricsLog, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    log.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Trains a generator on `dataset`; the monitor reports ACC when labels exist.
fn train_generator(
    cfg: &RunConfig,
    dataset: &Dataset,
    inf: &InferenceConfig,
) -> Result<(TrainState<ClusteredGenerator>, MetricsLog)> {
    let model = model_config(cfg, dataset)?;
    let train = cfg.train_config();
    match &dataset.labels {
        Some(labels) => {
            let monitor = learn::accuracy_monitor(labels);
            learn::fit(&dataset.examples, &model, &cfg.architecture(), inf, &train, Some(&monitor))
        }
        None => learn::fit(&dataset.examples, &model, &cfg.architecture(), inf, &train, None),
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let dataset = load_dataset(cfg)?;
    let inf = cfg.inference(infer::default_step_size(cfg.sigma));
    let (state, log) = train_generator(cfg, &dataset, &inf)?;
    fs::write(cfg.outdir.join("generator.clg"), state.model.net.to_checkpoint())?;
    fs::write(cfg.outdir.join("latents.cll"), learn::encode_latents(&state.latents))?;
    write_metrics(&log, &cfg.outdir.join("metrics.csv"))?;
    match log.last() {
        Some(row) => println!(
            "trained {} iterations: recon_mse {:.6} mean_log_joint {:.6}{}",
            row.iter,
            row.recon_mse,
            row.mean_log_joint,
            row.acc.map(|a| format!(" acc {a:.4}")).unwrap_or_default()
        ),
        None => println!("wrote initial model (0 iterations)"),
    }
    Ok(())
}

fn read_generator(cfg: &RunConfig, clusters: usize) -> Result<GeneratorNet> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("--checkpoint is required"))?;
    let bytes = fs::read(path).map_err(|e| Error::config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    GeneratorNet::from_checkpoint(&bytes, clusters)
}

/// Fresh inference per example: `z ~ N(0, I)`, `y` at the posterior mode under
/// that `z`, then `sweeps` Gibbs sweeps with MAP `y`.
pub fn assign_clusters(
    model: &ModelConfig,
    net: &GeneratorNet,
    examples: &Examples,
    inf: &InferenceConfig,
    sweeps: usize,
) -> Result<Vec<LatentState>> {
    use rayon::prelude::*;
    let mut inf = inf.clone();
    inf.y_mode = YMode::Map;
    (0..examples.len())
        .into_par_iter()
        .map(|i| {
            let x = examples.row(i);
            let mut rng = stream(inf.rng_seed, i as u64, 0, Purpose::Eval);
            let mut sampler = Sampler::new(model, net)?;
            let z = model::standard_normal_vec(model.latent_dim, &mut rng);
            let y = sampler.choose_y(x, &z, YMode::Map, &mut rng)?;
            let mut state = LatentState { z, y };
            for _ in 0..sweeps {
                sampler.sweep(x, &mut state, &inf, &mut rng).map_err(|e| match e {
                    Error::NonFinite { norm, .. } => Error::NonFinite { example: i, norm },
                    other => other,
                })?;
            }
            Ok(state)
        })
        .collect()
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let dataset = load_dataset(cfg)?;
    let model = model_config(cfg, &dataset)?;
    let net = read_generator(cfg, model.clusters)?;
    model.check_net(&net)?;
    let inf = cfg.inference(infer::default_step_size(cfg.sigma));
    let states = assign_clusters(&model, &net, &dataset.examples, &inf, cfg.eval_sweeps)?;
    let predicted: Vec<usize> = states.iter().map(|s| s.y).collect();

    let mut w = create(&cfg.outdir.join("assignments.csv"))?;
    writeln!(w, "index,cluster")?;
    for (i, y) in predicted.iter().enumerate() {
        writeln!(w, "{i},{y}")?;
    }
    w.flush()?;

    let mut report = create(&cfg.outdir.join("eval.csv"))?;
    match &dataset.labels {
        Some(labels) => {
            let n_labels = dataset.label_count().unwrap_or(1);
            let eval = metrics::clustering_accuracy(labels, &predicted, n_labels, model.clusters)?;
            eval.write_report(&mut report)?;
            let mut table = create(&cfg.outdir.join("contingency.csv"))?;
            eval.write_contingency(&mut table)?;
            table.flush()?;
            println!("acc {:.4} over {} examples", eval.acc, eval.n);
        }
        None => {
            writeln!(report, "n,k")?;
            writeln!(report, "{},{}", predicted.len(), model.clusters)?;
            println!("assigned {} examples", predicted.len());
        }
    }
    report.flush()?;
    Ok(())
}

fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let k = cfg
        .k
        .or_else(|| cfg.synthetic.as_ref().map(|s| s.clusters))
        .ok_or_else(|| Error::config("number of clusters unknown: pass --k"))?;
    let net = read_generator(cfg, k)?;
    let rows = cfg.rows.unwrap_or(1);
    let cols = cfg.cols.unwrap_or(k);
    if cols != k {
        return Err(Error::config(format!("--cols must equal K ({k}), got {cols}")));
    }
    if rows == 0 {
        return Err(Error::config("--rows must be positive"));
    }
    let shape = cfg.shape.unwrap_or_else(|| ImageShape::guess(net.data_dim()));
    if shape.len() != net.data_dim() {
        return Err(Error::config(format!(
            "shape {shape} has {} values, generator outputs {}",
            shape.len(),
            net.data_dim()
        )));
    }
    let mut ws = net.workspace();
    let mut samples = Vec::with_capacity(rows * cols);
    let mut zs = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut rng = stream(cfg.seed, r as u64, 0, Purpose::Generate);
        let z = model::standard_normal_vec(net.latent_dim(), &mut rng);
        for y in 0..cols {
            samples.push(net.eval(&z, y, &mut ws)?.to_vec());
        }
        zs.push(z);
    }
    let ext = if shape.channels == 3 { "ppm" } else { "pgm" };
    data::write_image_grid(&samples, rows, cols, shape, &cfg.outdir.join(format!("samples.{ext}")))?;
    let mut w = create(&cfg.outdir.join("samples_z.csv"))?;
    let header: Vec<String> = (0..net.latent_dim()).map(|j| format!("z{j}")).collect();
    writeln!(w, "row{}{}", if header.is_empty() { "" } else { "," }, header.join(","))?;
    for (r, z) in zs.iter().enumerate() {
        let vals: Vec<String> = z.iter().map(f64::to_string).collect();
        writeln!(w, "{r}{}{}", if vals.is_empty() { "" } else { "," }, vals.join(","))?;
    }
    w.flush()?;
    println!("wrote {rows}x{cols} grid");
    Ok(())
}

/// Scene images, their shape, and ground-truth maps when available.
struct SceneData {
    images: Examples,
    shape: ImageShape,
    names: Vec<String>,
    maps: Option<Vec<LabelMap>>,
    clusters_hint: Option<usize>,
}

fn load_scenes(cfg: &RunConfig) -> Result<SceneData> {
    if let Some(spec) = &cfg.scenes {
        let set = pixelwise::synth_scenes(spec)?;
        let names = (0..spec.images).map(|i| format!("scene_{i:04}")).collect();
        return Ok(SceneData {
            images: set.dataset.examples,
            shape: spec.shape,
            names,
            maps: Some(set.maps),
            clusters_hint: Some(spec.clusters),
        });
    }
    let dir = cfg
        .image_dir
        .as_ref()
        .ok_or_else(|| Error::config("no scenes: pass --scenes SPEC or --image-dir DIR"))?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::input(format!("no .pgm or .ppm images in {}", dir.display())));
    }
    let mut data = Vec::new();
    let mut names = Vec::new();
    let mut shape = None;
    for p in &paths {
        let img = PnmImage::read(p)?;
        let this = ImageShape::new(img.height, img.width, img.channels);
        if *shape.get_or_insert(this) != this {
            return Err(Error::input(format!("{} has shape {this}, expected {}", p.display(), shape.unwrap())));
        }
        data.extend(img.pixels.iter().map(|&v| f64::from(v) / 255.0));
        names.push(p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string());
    }
    let shape = shape.expect("at least one image");
    let maps = match &cfg.map_dir {
        Some(md) => {
            let k = cfg.k.ok_or_else(|| Error::config("reading label maps needs --k"))?;
            Some(
                names
                    .iter()
                    .map(|n| LabelMap::read_pgm(&md.join(format!("{n}.pgm")), k))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        None => None,
    };
    Ok(SceneData {
        images: Examples::new(data, shape.len())?,
        shape,
        names,
        maps,
        clusters_hint: None,
    })
}

fn scene_config(cfg: &RunConfig, scenes: &SceneData) -> Result<pixelwise::PixelSceneConfig> {
    let k = cfg
        .k
        .or(scenes.clusters_hint)
        .ok_or_else(|| Error::config("number of labels unknown: pass --k"))?;
    let mut sc = pixelwise::PixelSceneConfig::new(k, cfg.latent_dim.unwrap_or(2), scenes.shape);
    sc.sigma = cfg.sigma;
    sc.beta = cfg.beta;
    sc.validate()?;
    Ok(sc)
}

fn mean_pixel_accuracy(maps: &[LabelMap], latents: &[PixelLatent], clusters: usize) -> Result<Vec<f64>> {
    maps.iter()
        .zip(latents)
        .map(|(gt, l)| pixelwise::pixel_accuracy(gt, &l.map, clusters))
        .collect()
}

fn write_maps(dir: &Path, names: &[String], latents: &[PixelLatent], clusters: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, l) in names.iter().zip(latents) {
        l.map.write_pgm(clusters, &dir.join(format!("{name}.pgm")))?;
    }
    Ok(())
}

fn cmd_pixel_train(cfg: &RunConfig) -> Result<()> {
    let scenes = load_scenes(cfg)?;
    let sc = scene_config(cfg, &scenes)?;
    let mut rng = stream(cfg.seed, 0, 0, Purpose::Init);
    let scene = PixelScene::init(sc.clone(), &mut rng)?;
    let mut state = TrainState::with_model(scene, scenes.images.len(), &mut rng)?;
    let inf = cfg.inference(sc.default_step_size());
    let train = cfg.train_config();
    let k = sc.clusters;
    let log = match &scenes.maps {
        Some(maps) => {
            let monitor = |_: &PixelScene, latents: &[PixelLatent]| -> Result<f64> {
                let accs = mean_pixel_accuracy(maps, latents, k)?;
                Ok(accs.iter().sum::<f64>() / accs.len() as f64)
            };
            learn::run(&mut state, &scenes.images, &inf, &train, Some(&monitor))?
        }
        None => learn::run(&mut state, &scenes.images, &inf, &train, None)?,
    };
    fs::write(cfg.outdir.join("scene.clp"), state.model.to_checkpoint())?;
    write_metrics(&log, &cfg.outdir.join("metrics.csv"))?;
    write_maps(&cfg.outdir.join("maps"), &scenes.names, &state.latents, k)?;
    println!("trained scene model on {} images", scenes.images.len());
    Ok(())
}

fn cmd_pixel_eval(cfg: &RunConfig) -> Result<()> {
    let scenes = load_scenes(cfg)?;
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("--checkpoint is required"))?;
    let bytes = fs::read(path).map_err(|e| Error::config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let mut scene = PixelScene::from_checkpoint(&bytes)?;
    if scene.cfg().shape() != scenes.shape {
        return Err(Error::input(format!(
            "images are {}, model was trained on {}",
            scenes.shape,
            scene.cfg().shape()
        )));
    }
    if cfg.beta != scene.cfg().beta {
        let mut sc = scene.cfg().clone();
        sc.beta = cfg.beta;
        scene = PixelScene::new(sc, scene.modulation().clone(), scene.theta().to_vec())?;
    }
    let k = scene.cfg().clusters;
    let mut inf = cfg.inference(scene.cfg().default_step_size());
    inf.y_mode = YMode::Map;
    let latents = pixelwise::infer_scenes(&scene, &scenes.images, &inf, cfg.sweeps)?;
    write_maps(&cfg.outdir.join("maps"), &scenes.names, &latents, k)?;
    if let Some(maps) = &scenes.maps {
        let accs = mean_pixel_accuracy(maps, &latents, k)?;
        let mut w = create(&cfg.outdir.join("pixel_eval.csv"))?;
        writeln!(w, "image,acc")?;
        for (name, a) in scenes.names.iter().zip(&accs) {
            writeln!(w, "{name},{a}")?;
        }
        w.flush()?;
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let mut report = create(&cfg.outdir.join("eval.csv"))?;
        writeln!(report, "acc,n,k,l")?;
        writeln!(report, "{mean},{},{k},{k}", accs.len())?;
        report.flush()?;
        println!("mean per-pixel acc {mean:.4} over {} images", accs.len());
    } else {
        println!("labelled {} images", latents.len());
    }
    Ok(())
}

fn cmd_langevin_sweep(cfg: &RunConfig) -> Result<()> {
    let dataset = load_dataset(cfg)?;
    if dataset.labels.is_none() {
        return Err(Error::config("langevin-sweep needs ground-truth labels"));
    }
    let mut w = create(&cfg.outdir.join("langevin_sweep.csv"))?;
    writeln!(w, "l,acc")?;
    for &steps in &cfg.steps_list {
        let mut run = cfg.clone();
        run.langevin_steps = steps;
        let inf = run.inference(infer::default_step_size(run.sigma));
        let (_, log) = train_generator(&run, &dataset, &inf)?;
        write_metrics(&log, &cfg.outdir.join(format!("metrics_l{steps}.csv")))?;
        let acc = log
            .last()
            .and_then(|r| r.acc)
            .ok_or_else(|| Error::config("langevin-sweep needs at least one training iteration"))?;
        writeln!(w, "{steps},{acc}")?;
        println!("l={steps} acc {acc:.4}");
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_parsing() {
        let s = parse_config_file("# comment\nk = 4\nlatent_dim=3\n\nbatch = all # trailing\nidx-images =\n").unwrap();
        assert_eq!(s.k, Some(4));
        assert_eq!(s.latent_dim, Some(3));
        assert_eq!(s.batch, Some(BatchSize::All));
        assert_eq!(s.idx_images, None);
        assert!(parse_config_file("bogus = 1").is_err());
        assert!(parse_config_file("k = x").is_err());
        assert!(parse_config_file("just words").is_err());
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let file = parse_config_file("k = 4\nsigma = 0.5\n").unwrap();
        let flags = Settings {
            k: Some(7),
            ..Settings::default()
        };
        let cfg = RunConfig::from_settings(flags.or(file)).unwrap();
        assert_eq!(cfg.k, Some(7));
        assert_eq!(cfg.sigma, 0.5);
        assert_eq!(cfg.iters, 1000);
        assert_eq!(cfg.lr, 0.0002);
    }

    #[test]
    fn resolved_config_reparses_to_itself() {
        let cfg = RunConfig::from_settings(parse_config_file("synthetic = k=2,d=1,D=4,sep=10,n=10\nhidden = 8\n").unwrap()).unwrap();
        let text = cfg.render();
        let again = RunConfig::from_settings(parse_config_file(&text).unwrap()).unwrap();
        assert_eq!(again.render(), text);
        assert!(text.contains("delta = 0.027"));
    }
}
