//! The alternating learning loop.
//!
//! Every iteration picks a minibatch, runs one Gibbs sweep per example starting
//! from that example's persistent latents, then takes one ascent step on the
//! minibatch mean of `d/dtheta log p(x_i, y_i, z_i)`. No gradient flows through
//! the inference itself.
//!
//! Work is split into fixed-size chunks whose partial sums are reduced in
//! order, and every example draws from its own seeded stream, so results are
//! bit-identical for any thread count.

use std::fmt;
use std::io::{self, Write};

use rayon::prelude::*;

use crate::data::Examples;
use crate::error::{Error, Result};
use crate::infer::{InferenceConfig, Sampler};
use crate::model::{self, Density, JointTerms, LatentState, ModelConfig};
use crate::netcore::{Architecture, ByteCursor, GeneratorNet};
use crate::rng::{stream, Purpose, StreamRng};

const CHUNK: usize = 8;

/// A model trainable by the alternating loop: parameters, per-example
/// latents, a posterior sweep over them, and the parameter gradient.
pub trait LatentModel: Sync {
    type Latent: Clone + Send + Sync + fmt::Debug + PartialEq;

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn data_dim(&self) -> usize;

    /// Draw from the latent prior.
    fn sample_latent(&self, rng: &mut StreamRng) -> Result<Self::Latent>;

    /// One Gibbs sweep in place; returns the number of clipped Langevin steps.
    fn sweep(
        &self,
        x: &[f64],
        latent: &mut Self::Latent,
        inf: &InferenceConfig,
        rng: &mut StreamRng,
    ) -> Result<u64>;

    /// Adds `d/dtheta log p(x, latent)` into `grad`.
    fn accumulate_grad(&self, x: &[f64], latent: &Self::Latent, grad: &mut [f64]) -> Result<JointTerms>;

    fn evaluate(&self, x: &[f64], latent: &Self::Latent) -> Result<JointTerms>;
}

/// Generator plus model configuration: the clustered generator itself.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusteredGenerator {
    pub cfg: ModelConfig,
    pub net: GeneratorNet,
}

impl ClusteredGenerator {
    pub fn new(cfg: ModelConfig, net: GeneratorNet) -> Result<Self> {
        cfg.check_density()?;
        cfg.check_net(&net)?;
        Ok(ClusteredGenerator { cfg, net })
    }
}

impl LatentModel for ClusteredGenerator {
    type Latent = LatentState;

    fn params(&self) -> &[f64] {
        self.net.theta()
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.net.theta_mut()
    }

    fn data_dim(&self) -> usize {
        self.cfg.data_dim
    }

    fn sample_latent(&self, rng: &mut StreamRng) -> Result<LatentState> {
        let z = model::standard_normal_vec(self.cfg.latent_dim, rng);
        let y = model::sample_categorical(&self.cfg.prior, rng);
        Ok(LatentState { z, y })
    }

    fn sweep(
        &self,
        x: &[f64],
        latent: &mut LatentState,
        inf: &InferenceConfig,
        rng: &mut StreamRng,
    ) -> Result<u64> {
        Sampler::new(&self.cfg, &self.net)?.sweep(x, latent, inf, rng)
    }

    fn accumulate_grad(&self, x: &[f64], latent: &LatentState, grad: &mut [f64]) -> Result<JointTerms> {
        Density::new(&self.cfg, &self.net)?.accumulate_grad_theta(x, &latent.z, latent.y, grad)
    }

    fn evaluate(&self, x: &[f64], latent: &LatentState) -> Result<JointTerms> {
        Density::new(&self.cfg, &self.net)?.log_joint(x, &latent.z, latent.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchSize {
    All,
    Fixed(usize),
}

impl fmt::Display for BatchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchSize::All => f.write_str("all"),
            BatchSize::Fixed(n) => write!(f, "{n}"),
        }
    }
}

impl std::str::FromStr for BatchSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(BatchSize::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(BatchSize::Fixed(n)),
            _ => Err(Error::config(format!("batch size must be a positive integer or 'all', got {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    /// `v <- mu v + g; theta <- theta + lr v`
    MomentumSgd,
    /// Adaptive moments with `beta1 = momentum`, `beta2 = 0.999`.
    Adam,
}

impl Optimizer {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" | "momentum" => Some(Optimizer::MomentumSgd),
            "adam" => Some(Optimizer::Adam),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Optimizer::MomentumSgd => "sgd",
            Optimizer::Adam => "adam",
        }
    }
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Optimizer::parse(s).ok_or_else(|| Error::config(format!("optimizer must be 'sgd' or 'adam', got {s:?}")))
    }
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch: BatchSize,
    pub seed: u64,
    /// Metrics are recorded every `log_every` iterations and after the last one.
    pub log_every: usize,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            learning_rate: 0.0002,
            momentum: 0.5,
            batch: BatchSize::Fixed(128),
            seed: 0,
            log_every: 10,
            optimizer: Optimizer::MomentumSgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.batch == BatchSize::Fixed(0) {
            return Err(Error::config("batch size must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<M: LatentModel> {
    pub model: M,
    pub latents: Vec<M::Latent>,
    pub velocity: Vec<f64>,
    /// Second-moment estimate; empty unless the adaptive optimizer is used.
    pub second_moment: Vec<f64>,
    pub iteration: usize,
}

impl<M: LatentModel> TrainState<M> {
    /// Latents drawn from the prior for `n` examples, zero optimizer state.
    pub fn with_model(model: M, n: usize, rng: &mut StreamRng) -> Result<Self> {
        let latents = (0..n)
            .map(|_| model.sample_latent(rng))
            .collect::<Result<Vec<_>>>()?;
        let velocity = vec![0.0; model.params().len()];
        Ok(TrainState {
            model,
            latents,
            velocity,
            second_moment: Vec::new(),
            iteration: 0,
        })
    }
}

/// Fresh generator and latents for `data`.
pub fn init(
    data: &Examples,
    cfg: &ModelConfig,
    arch: &Architecture,
    seed: u64,
) -> Result<TrainState<ClusteredGenerator>> {
    if data.is_empty() {
        return Err(Error::input("cannot train on an empty dataset"));
    }
    if data.dim() != cfg.data_dim {
        return Err(Error::input(format!(
            "examples have dimension {}, model expects {}",
            data.dim(),
            cfg.data_dim
        )));
    }
    let mut rng = stream(seed, 0, 0, Purpose::Init);
    let net = GeneratorNet::init(arch, cfg.latent_dim, cfg.clusters, cfg.data_dim, &mut rng)?;
    let model = ClusteredGenerator::new(cfg.clone(), net)?;
    TrainState::with_model(model, data.len(), &mut rng)
}

/// Sorted minibatch indices for the given iteration.
pub fn minibatch(n: usize, batch: BatchSize, seed: u64, iteration: usize) -> Vec<usize> {
    match batch {
        BatchSize::Fixed(b) if b < n => {
            let mut rng = stream(seed, 0, iteration as u64, Purpose::Batch);
            let mut idx = rand::seq::index::sample(&mut rng, n, b).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IterationStats {
    pub batch_len: usize,
    pub clipped: u64,
    /// Mean `|x - G|^2` over the minibatch after its sweeps.
    pub batch_sq_residual: f64,
    pub grad_norm: f64,
}

struct ChunkOutput<L> {
    grad: Vec<f64>,
    updated: Vec<(usize, L)>,
    clipped: u64,
    sq: f64,
}

fn check_consistent<M: LatentModel>(state: &TrainState<M>, data: &Examples) -> Result<()> {
    if state.latents.len() != data.len() {
        return Err(Error::input(format!(
            "state has {} latents but dataset has {} examples",
            state.latents.len(),
            data.len()
        )));
    }
    if data.dim() != state.model.data_dim() {
        return Err(Error::input(format!(
            "examples have dimension {}, model expects {}",
            data.dim(),
            state.model.data_dim()
        )));
    }
    Ok(())
}

/// One pass of Algorithm-style alternation: sweeps over a minibatch, then a
/// parameter step.
pub fn train_iteration<M: LatentModel>(
    state: &mut TrainState<M>,
    data: &Examples,
    inf: &InferenceConfig,
    train: &TrainConfig,
) -> Result<IterationStats> {
    check_consistent(state, data)?;
    inf.validate()?;
    train.validate()?;
    let batch = minibatch(data.len(), train.batch, train.seed, state.iteration);
    let n_params = state.model.params().len();
    let iteration = state.iteration as u64;
    let model = &state.model;
    let latents = &state.latents;

    let outputs: Vec<ChunkOutput<M::Latent>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<ChunkOutput<M::Latent>> {
            let mut out = ChunkOutput {
                grad: vec![0.0; n_params],
                updated: Vec::with_capacity(chunk.len()),
                clipped: 0,
                sq: 0.0,
            };
            let mut example_grad = vec![0.0; n_params];
            for &i in chunk {
                let x = data.row(i);
                let mut latent = latents[i].clone();
                let mut rng = stream(inf.rng_seed, i as u64, iteration, Purpose::Sweep);
                out.clipped += model
                    .sweep(x, &mut latent, inf, &mut rng)
                    .map_err(|e| tag_example(e, i))?;
                example_grad.fill(0.0);
                let terms = model.accumulate_grad(x, &latent, &mut example_grad)?;
                let norm = example_grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if !norm.is_finite() {
                    return Err(Error::NonFinite { example: i, norm });
                }
                for (g, e) in out.grad.iter_mut().zip(&example_grad) {
                    *g += e;
                }
                out.sq += terms.sq_residual;
                out.updated.push((i, latent));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut grad = vec![0.0; n_params];
    let mut stats = IterationStats {
        batch_len: batch.len(),
        ..Default::default()
    };
    for out in outputs {
        for (g, c) in grad.iter_mut().zip(&out.grad) {
            *g += c;
        }
        stats.clipped += out.clipped;
        stats.batch_sq_residual += out.sq;
        for (i, latent) in out.updated {
            state.latents[i] = latent;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    stats.batch_sq_residual *= scale;
    stats.grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();

    apply_update(state, &grad, train);
    state.iteration += 1;
    Ok(stats)
}

fn tag_example(err: Error, example: usize) -> Error {
    match err {
        Error::NonFinite { norm, .. } => Error::NonFinite { example, norm },
        other => other,
    }
}

fn apply_update<M: LatentModel>(state: &mut TrainState<M>, grad: &[f64], train: &TrainConfig) {
    let lr = train.learning_rate;
    match train.optimizer {
        Optimizer::MomentumSgd => {
            let theta = state.model.params_mut();
            for ((t, v), g) in theta.iter_mut().zip(state.velocity.iter_mut()).zip(grad) {
                *v = train.momentum * *v + g;
                *t += lr * *v;
            }
        }
        Optimizer::Adam => {
            if state.second_moment.len() != grad.len() {
                state.second_moment = vec![0.0; grad.len()];
            }
            let step = (state.iteration + 1) as i32;
            let beta1 = train.momentum;
            let c1 = 1.0 - beta1.powi(step);
            let c2 = 1.0 - ADAM_BETA2.powi(step);
            let theta = state.model.params_mut();
            for (((t, m), s), g) in theta
                .iter_mut()
                .zip(state.velocity.iter_mut())
                .zip(state.second_moment.iter_mut())
                .zip(grad)
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *s = ADAM_BETA2 * *s + (1.0 - ADAM_BETA2) * g * g;
                *t += lr * (*m / c1) / ((*s / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Dataset-wide fit statistics at the current latents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitSummary {
    /// `(1/n) sum |x_i - G(z_i, y_i)|^2`
    pub recon_mse: f64,
    pub mean_log_joint: f64,
}

pub fn summarize<M: LatentModel>(state: &TrainState<M>, data: &Examples) -> Result<FitSummary> {
    check_consistent(state, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let partial: Vec<(f64, f64)> = idx
        .par_chunks(CHUNK * 8)
        .map(|chunk| -> Result<(f64, f64)> {
            let mut acc = (0.0, 0.0);
            for &i in chunk {
                let t = state.model.evaluate(data.row(i), &state.latents[i])?;
                acc.0 += t.sq_residual;
                acc.1 += t.log_joint;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let (sq, lj) = partial
        .iter()
        .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = data.len() as f64;
    Ok(FitSummary {
        recon_mse: sq / n,
        mean_log_joint: lj / n,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub recon_mse: f64,
    pub mean_log_joint: f64,
    pub acc: Option<f64>,
    /// Clipped Langevin steps since the previous row.
    pub clip_count: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "iter,recon_mse,mean_log_joint,acc,clip_count")?;
        for r in &self.rows {
            let acc = r.acc.map(|a| a.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{}",
                r.iter, r.recon_mse, r.mean_log_joint, acc, r.clip_count
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }
}

/// Scores the current latents against held-out ground truth.
pub type Monitor<'a, M> = &'a (dyn Fn(&M, &[<M as LatentModel>::Latent]) -> Result<f64> + Sync);

/// Runs `train.iterations` iterations on an existing state.
pub fn run<M: LatentModel>(
    state: &mut TrainState<M>,
    data: &Examples,
    inf: &InferenceConfig,
    train: &TrainConfig,
    monitor: Option<Monitor<'_, M>>,
) -> Result<MetricsLog> {
    let mut log = MetricsLog::default();
    let mut clipped = 0;
    for t in 0..train.iterations {
        clipped += train_iteration(state, data, inf, train)?.clipped;
        let done = t + 1;
        if done % train.log_every == 0 || done == train.iterations {
            let summary = summarize(state, data)?;
            let acc = match monitor {
                Some(m) => Some(m(&state.model, &state.latents)?),
                None => None,
            };
            log.rows.push(MetricsRow {
                iter: state.iteration,
                recon_mse: summary.recon_mse,
                mean_log_joint: summary.mean_log_joint,
                acc,
                clip_count: clipped,
            });
            clipped = 0;
        }
    }
    Ok(log)
}

/// Initializes and trains a clustered generator.
pub fn fit(
    data: &Examples,
    cfg: &ModelConfig,
    arch: &Architecture,
    inf: &InferenceConfig,
    train: &TrainConfig,
    monitor: Option<Monitor<'_, ClusteredGenerator>>,
) -> Result<(TrainState<ClusteredGenerator>, MetricsLog)> {
    train.validate()?;
    let mut state = init(data, cfg, arch, train.seed)?;
    let log = run(&mut state, data, inf, train, monitor)?;
    Ok((state, log))
}

/// Monitor reporting clustering accuracy of the current `y_i`.
pub fn accuracy_monitor(
    labels: &[usize],
) -> impl Fn(&ClusteredGenerator, &[LatentState]) -> Result<f64> + Sync + '_ {
    move |model: &ClusteredGenerator, latents: &[LatentState]| {
        let predicted: Vec<usize> = latents.iter().map(|s| s.y).collect();
        let n_labels = labels.iter().copied().max().map_or(1, |m| m + 1);
        Ok(crate::metrics::clustering_accuracy(labels, &predicted, n_labels, model.cfg.clusters)?.acc)
    }
}

pub const LATENTS_MAGIC: &[u8; 4] = b"CLL1";

/// `CLL1`, u64 count, then per example its `z` as f64 and `y` as u32, little-endian.
pub fn encode_latents(latents: &[LatentState]) -> Vec<u8> {
    let d = latents.first().map_or(0, |s| s.z.len());
    let mut out = Vec::with_capacity(12 + latents.len() * (8 * d + 4));
    out.extend_from_slice(LATENTS_MAGIC);
    out.extend_from_slice(&(latents.len() as u64).to_le_bytes());
    for s in latents {
        for v in &s.z {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(s.y as u32).to_le_bytes());
    }
    out
}

pub fn decode_latents(bytes: &[u8], latent_dim: usize) -> Result<Vec<LatentState>> {
    let mut cur = ByteCursor::new(bytes);
    if cur.take(4)? != LATENTS_MAGIC {
        return Err(Error::parse(0, "bad latents magic, expected CLL1"));
    }
    let n = cur.u64_le()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let z = (0..latent_dim)
            .map(|_| cur.f64_le())
            .collect::<Result<Vec<_>>>()?;
        let y = cur.u32_le()? as usize;
        out.push(LatentState { z, y });
    }
    cur.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_mixture, SynthSpec};
    use crate::netcore::{LayerSpec, Mlp};

    fn small_data() -> (Examples, ModelConfig) {
        let ds = synth_mixture(&"k=2,d=1,D=4,sep=10,n=40,seed=3".parse::<SynthSpec>().unwrap()).unwrap();
        (ds.examples, ModelConfig::new(2, 1, 4))
    }

    fn small_arch() -> Architecture {
        Architecture {
            hidden: vec![8],
            ..Architecture::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let (data, cfg) = small_data();
        let a = init(&data, &cfg, &small_arch(), 7).unwrap();
        let b = init(&data, &cfg, &small_arch(), 7).unwrap();
        assert_eq!(a, b);
        assert!(a.velocity.iter().all(|&v| v == 0.0));
        assert_ne!(a, init(&data, &cfg, &small_arch(), 8).unwrap());
    }

    #[test]
    fn init_single_cluster_and_empty() {
        let (data, _) = small_data();
        let cfg = ModelConfig::new(1, 1, 4);
        let st = init(&data, &cfg, &small_arch(), 0).unwrap();
        assert!(st.latents.iter().all(|s| s.y == 0));
        let empty = Examples::new(vec![], 4).unwrap();
        assert!(matches!(init(&empty, &cfg, &small_arch(), 0), Err(Error::Input(_))));
    }

    #[test]
    fn zero_learning_rate_freezes_theta() {
        let (data, cfg) = small_data();
        let mut st = init(&data, &cfg, &small_arch(), 1).unwrap();
        let theta0 = st.model.net.theta().to_vec();
        let latents0 = st.latents.clone();
        let train = TrainConfig {
            learning_rate: 0.0,
            batch: BatchSize::All,
            ..TrainConfig::default()
        };
        let mut inf = InferenceConfig::for_sigma(0.3);
        inf.steps = 5;
        train_iteration(&mut st, &data, &inf, &train).unwrap();
        assert_eq!(st.model.net.theta(), theta0.as_slice());
        assert_ne!(st.latents, latents0);
        assert_eq!(st.iteration, 1);
    }

    #[test]
    fn fixed_point_at_exact_fit() {
        // G(z, y) = 0 with x = 0: zero residual, z = 0 at the prior mode, l = 0.
        let mlp = Mlp::new(vec![LayerSpec::affine(3, 2)]).unwrap();
        let net = GeneratorNet::new(mlp, vec![0.0; 8], 2).unwrap();
        let cfg = ModelConfig::new(2, 1, 2).with_prior(vec![1.0, 0.0]);
        let model = ClusteredGenerator::new(cfg, net).unwrap();
        let data = Examples::new(vec![0.0, 0.0], 2).unwrap();
        let mut st = TrainState {
            velocity: vec![0.0; 8],
            model,
            latents: vec![LatentState::new(vec![0.0], 0)],
            second_moment: vec![],
            iteration: 0,
        };
        let before = st.clone();
        let mut inf = InferenceConfig::for_sigma(0.3);
        inf.steps = 0;
        train_iteration(&mut st, &data, &inf, &TrainConfig::default()).unwrap();
        assert_eq!(st.model, before.model);
        assert_eq!(st.latents, before.latents);
        assert_eq!(st.velocity, before.velocity);
    }

    #[test]
    fn full_batch_update_is_mean_gradient() {
        let (data, cfg) = small_data();
        let mut st = init(&data, &cfg, &small_arch(), 2).unwrap();
        let mut inf = InferenceConfig::for_sigma(0.3);
        inf.steps = 3;
        let train = TrainConfig {
            batch: BatchSize::All,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let theta0 = st.model.net.theta().to_vec();
        train_iteration(&mut st, &data, &inf, &train).unwrap();

        // recompute from the updated latents with the original parameters
        let mut reference = st.model.clone();
        reference.net.theta_mut().copy_from_slice(&theta0);
        let mut mean = vec![0.0; theta0.len()];
        for (i, latent) in st.latents.iter().enumerate() {
            let g = model::grad_theta_log_joint(&reference.cfg, &reference.net, data.row(i), latent).unwrap();
            for (m, v) in mean.iter_mut().zip(g) {
                *m += v / data.len() as f64;
            }
        }
        for ((t1, t0), g) in st.model.net.theta().iter().zip(&theta0).zip(&mean) {
            assert!((t1 - (t0 + 1e-3 * g)).abs() < 1e-12);
        }
    }

    #[test]
    fn minibatch_touches_only_batch_latents() {
        let (data, cfg) = small_data();
        let mut st = init(&data, &cfg, &small_arch(), 4).unwrap();
        let before = st.latents.clone();
        let train = TrainConfig {
            batch: BatchSize::Fixed(5),
            ..TrainConfig::default()
        };
        let mut inf = InferenceConfig::for_sigma(0.3);
        inf.steps = 2;
        let batch = minibatch(data.len(), train.batch, train.seed, 0);
        assert_eq!(batch.len(), 5);
        train_iteration(&mut st, &data, &inf, &train).unwrap();
        for i in 0..data.len() {
            if batch.contains(&i) {
                assert_ne!(st.latents[i], before[i]);
            } else {
                assert_eq!(st.latents[i], before[i]);
            }
        }
    }

    #[test]
    fn zero_iterations_returns_init() {
        let (data, cfg) = small_data();
        let train = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let (st, log) = fit(&data, &cfg, &small_arch(), &InferenceConfig::for_sigma(0.3), &train, None).unwrap();
        assert!(log.is_empty());
        assert_eq!(st, init(&data, &cfg, &small_arch(), 0).unwrap());
    }

    #[test]
    fn fit_is_reproducible_and_logs() {
        let (data, cfg) = small_data();
        let train = TrainConfig {
            iterations: 7,
            log_every: 3,
            batch: BatchSize::Fixed(16),
            ..TrainConfig::default()
        };
        let mut inf = InferenceConfig::for_sigma(0.3);
        inf.steps = 5;
        let labels = vec![0; data.len()];
        let monitor = accuracy_monitor(&labels);
        let (a, la) = fit(&data, &cfg, &small_arch(), &inf, &train, Some(&monitor)).unwrap();
        let (b, lb) = fit(&data, &cfg, &small_arch(), &inf, &train, Some(&monitor)).unwrap();
        assert_eq!(a, b);
        assert_eq!(la.to_csv(), lb.to_csv());
        let iters: Vec<usize> = la.rows.iter().map(|r| r.iter).collect();
        assert_eq!(iters, vec![3, 6, 7]);
        assert!(la.to_csv().starts_with("iter,recon_mse,mean_log_joint,acc,clip_count\n"));
    }

    #[test]
    fn adam_variant_runs() {
        let (data, cfg) = small_data();
        let train = TrainConfig {
            iterations: 3,
            optimizer: Optimizer::Adam,
            ..TrainConfig::default()
        };
        let mut inf = InferenceConfig::for_sigma(0.3);
        inf.steps = 2;
        let (st, _) = fit(&data, &cfg, &small_arch(), &inf, &train, None).unwrap();
        assert_eq!(st.second_moment.len(), st.velocity.len());
    }

    #[test]
    fn config_validation() {
        let mut t = TrainConfig::default();
        t.momentum = 1.0;
        assert!(t.validate().is_err());
        assert_eq!("all".parse::<BatchSize>().unwrap(), BatchSize::All);
        assert_eq!("64".parse::<BatchSize>().unwrap(), BatchSize::Fixed(64));
        assert!("0".parse::<BatchSize>().is_err());
    }

    #[test]
    fn latents_sidecar_round_trip_and_errors() {
        let latents = vec![
            LatentState::new(vec![0.5, -1.25], 2),
            LatentState::new(vec![3.0, 1e-300], 0),
        ];
        let bytes = encode_latents(&latents);
        assert_eq!(&bytes[..4], b"CLL1");
        assert_eq!(bytes.len(), 4 + 8 + 2 * (16 + 4));
        let back = decode_latents(&bytes, 2).unwrap();
        assert_eq!(back, latents);
        assert_eq!(encode_latents(&back), bytes);
        assert!(decode_latents(&bytes[..bytes.len() - 1], 2).is_err());
        assert!(decode_latents(&bytes, 3).is_err());
        let mut bad = bytes.clone();
        bad[3] = b'2';
        assert!(decode_latents(&bad, 2).is_err());
    }
}
