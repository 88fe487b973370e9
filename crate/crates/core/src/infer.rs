//! Posterior inference over the latents.
//!
//! `z` is moved by unadjusted Langevin dynamics with `y` held fixed;
//! `y` is then drawn (or maximized) from its exact categorical conditional.
//! One z-chain followed by one y-update forms a Gibbs sweep.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{self, Density, LatentState, ModelConfig};
use crate::netcore::GeneratorNet;
use crate::rng::{seeded, StreamRng};

pub const DEFAULT_LANGEVIN_STEPS: usize = 100;

/// Gradient norms above this are rescaled before a Langevin update.
pub const GRAD_CLIP_NORM: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum YMode {
    Sample,
    Map,
}

impl YMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sample" => Some(YMode::Sample),
            "map" => Some(YMode::Map),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            YMode::Sample => "sample",
            YMode::Map => "map",
        }
    }
}

impl std::str::FromStr for YMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        YMode::parse(s).ok_or_else(|| Error::config(format!("y mode must be 'sample' or 'map', got {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub step_size: f64,
    pub steps: usize,
    pub y_mode: YMode,
    pub rng_seed: u64,
}

impl InferenceConfig {
    /// Defaults for a given noise level: `delta = 0.3 sigma^2`, 100 steps, sampled `y`.
    pub fn for_sigma(sigma: f64) -> Self {
        InferenceConfig {
            step_size: default_step_size(sigma),
            steps: DEFAULT_LANGEVIN_STEPS,
            y_mode: YMode::Sample,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_step(self.step_size)
    }
}

pub fn default_step_size(sigma: f64) -> f64 {
    0.3 * sigma * sigma
}

fn check_step(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::config(format!("Langevin step size must be > 0, got {delta}")));
    }
    Ok(())
}

/// Final `z` of a Langevin chain and how many of its steps were clipped.
#[derive(Clone, Debug, PartialEq)]
pub struct LangevinOutcome {
    pub z: Vec<f64>,
    pub clipped: u64,
}

/// Scales `grad` down to [`GRAD_CLIP_NORM`] if needed; returns whether it did.
pub(crate) fn clip(grad: &mut [f64]) -> bool {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > GRAD_CLIP_NORM {
        let s = GRAD_CLIP_NORM / norm;
        grad.iter_mut().for_each(|g| *g *= s);
        true
    } else {
        false
    }
}

/// Per-thread Langevin/Gibbs machinery over a borrowed model.
pub struct Sampler<'a> {
    density: Density<'a>,
    grad: Vec<f64>,
    scores: Vec<f64>,
    probs: Vec<f64>,
}

impl<'a> Sampler<'a> {
    pub fn new(cfg: &'a ModelConfig, net: &'a GeneratorNet) -> Result<Self> {
        let density = Density::new(cfg, net)?;
        Ok(Sampler {
            density,
            grad: vec![0.0; cfg.latent_dim],
            scores: vec![0.0; cfg.clusters],
            probs: vec![0.0; cfg.clusters],
        })
    }

    /// `z <- z + delta * grad + sqrt(2 delta) * noise`; returns whether the gradient was clipped.
    pub fn step(
        &mut self,
        x: &[f64],
        z: &mut [f64],
        y: usize,
        delta: f64,
        noise: &[f64],
    ) -> Result<bool> {
        if noise.len() != z.len() {
            return Err(Error::input(format!(
                "noise has {} entries, latent has {}",
                noise.len(),
                z.len()
            )));
        }
        self.density.grad_z(x, z, y, &mut self.grad)?;
        let clipped = clip(&mut self.grad);
        let scale = (2.0 * delta).sqrt();
        for ((zi, g), n) in z.iter_mut().zip(&self.grad).zip(noise) {
            *zi += delta * g + scale * n;
        }
        Ok(clipped)
    }

    /// Runs `steps` Langevin updates in place, drawing noise from `rng`.
    pub fn run_chain(
        &mut self,
        x: &[f64],
        z: &mut [f64],
        y: usize,
        delta: f64,
        steps: usize,
        rng: &mut StreamRng,
    ) -> Result<u64> {
        check_step(delta)?;
        let mut noise = vec![0.0; z.len()];
        let mut clipped = 0;
        for _ in 0..steps {
            for n in noise.iter_mut() {
                *n = rng.sample(rand_distr::StandardNormal);
            }
            if self.step(x, z, y, delta, &noise)? {
                clipped += 1;
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                example: usize::MAX,
                norm: f64::NAN,
            });
        }
        Ok(clipped)
    }

    /// Normalized `p(y | x, z)`, left in the sampler and returned as a slice.
    pub fn posterior(&mut self, x: &[f64], z: &[f64]) -> Result<&[f64]> {
        self.density.cluster_scores(x, z, &mut self.scores)?;
        normalize_log_scores(&self.scores, &mut self.probs)?;
        Ok(&self.probs)
    }

    pub fn choose_y(
        &mut self,
        x: &[f64],
        z: &[f64],
        mode: YMode,
        rng: &mut StreamRng,
    ) -> Result<usize> {
        self.posterior(x, z)?;
        Ok(match mode {
            // argmax over log-scores avoids ties manufactured by exp underflow
            YMode::Map => argmax(&self.scores),
            YMode::Sample => model::sample_categorical(&self.probs, rng),
        })
    }

    /// Langevin chain on `z` under the current `y`, then a `y` update under the new `z`.
    pub fn sweep(
        &mut self,
        x: &[f64],
        state: &mut LatentState,
        inf: &InferenceConfig,
        rng: &mut StreamRng,
    ) -> Result<u64> {
        let clipped = self.run_chain(x, &mut state.z, state.y, inf.step_size, inf.steps, rng)?;
        state.y = self.choose_y(x, &state.z, inf.y_mode, rng)?;
        Ok(clipped)
    }
}

/// Log-sum-exp normalization of `scores` into `probs`.
pub fn normalize_log_scores(scores: &[f64], probs: &mut [f64]) -> Result<()> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(Error::config("every cluster has zero prior probability"));
    }
    let mut total = 0.0;
    for (p, &s) in probs.iter_mut().zip(scores) {
        *p = (s - max).exp();
        total += *p;
    }
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(())
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Picks a cluster from a posterior vector according to `mode`.
pub fn select_y<R: Rng + ?Sized>(posterior: &[f64], mode: YMode, rng: &mut R) -> usize {
    match mode {
        YMode::Map => argmax(posterior),
        YMode::Sample => model::sample_categorical(posterior, rng),
    }
}

/// One Langevin update of `state.z` with caller-supplied noise.
pub fn langevin_step(
    cfg: &ModelConfig,
    net: &GeneratorNet,
    x: &[f64],
    state: &LatentState,
    delta: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    check_step(delta)?;
    let mut z = state.z.clone();
    Sampler::new(cfg, net)?.step(x, &mut z, state.y, delta, noise)?;
    Ok(z)
}

/// `inf.steps` Langevin updates from `state.z`, noise seeded from `inf.rng_seed`.
pub fn langevin_infer_z(
    cfg: &ModelConfig,
    net: &GeneratorNet,
    x: &[f64],
    state: &LatentState,
    inf: &InferenceConfig,
) -> Result<LangevinOutcome> {
    inf.validate()?;
    let mut z = state.z.clone();
    let mut rng = seeded(inf.rng_seed);
    let clipped =
        Sampler::new(cfg, net)?.run_chain(x, &mut z, state.y, inf.step_size, inf.steps, &mut rng)?;
    Ok(LangevinOutcome { z, clipped })
}

pub fn posterior_y(
    cfg: &ModelConfig,
    net: &GeneratorNet,
    x: &[f64],
    z: &[f64],
) -> Result<Vec<f64>> {
    Ok(Sampler::new(cfg, net)?.posterior(x, z)?.to_vec())
}

pub fn infer_y<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    net: &GeneratorNet,
    x: &[f64],
    z: &[f64],
    mode: YMode,
    rng: &mut R,
) -> Result<usize> {
    let mut sampler = Sampler::new(cfg, net)?;
    sampler.posterior(x, z)?;
    Ok(match mode {
        YMode::Map => argmax(&sampler.scores),
        YMode::Sample => model::sample_categorical(&sampler.probs, rng),
    })
}

/// Gibbs sweep using a stream seeded from `inf.rng_seed`.
pub fn gibbs_sweep(
    cfg: &ModelConfig,
    net: &GeneratorNet,
    x: &[f64],
    state: &LatentState,
    inf: &InferenceConfig,
) -> Result<LatentState> {
    inf.validate()?;
    let mut next = state.clone();
    let mut rng = seeded(inf.rng_seed);
    Sampler::new(cfg, net)?.sweep(x, &mut next, inf, &mut rng)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{Architecture, LayerSpec, Mlp};

    fn linear_scalar(a: f64, b: f64) -> GeneratorNet {
        let mlp = Mlp::new(vec![LayerSpec::affine(2, 1)]).unwrap();
        GeneratorNet::new(mlp, vec![a, 0.0, b], 1).unwrap()
    }

    /// K clusters, d latent dims, D = 1; G(z, i) = offsets[i], ignoring z.
    fn constant_clusters(d: usize, offsets: &[f64]) -> GeneratorNet {
        let k = offsets.len();
        let mlp = Mlp::new(vec![LayerSpec::affine(d + k, 1)]).unwrap();
        let mut theta = vec![0.0; d + k + 1];
        theta[d..d + k].copy_from_slice(offsets);
        GeneratorNet::new(mlp, theta, k).unwrap()
    }

    #[test]
    fn fixed_point_without_noise() {
        let net = linear_scalar(2.0, 0.5);
        let cfg = ModelConfig::new(1, 1, 1);
        let z = langevin_step(&cfg, &net, &[0.5], &LatentState::new(vec![0.0], 0), 0.01, &[0.0]).unwrap();
        assert_eq!(z, vec![0.0]);
    }

    #[test]
    fn pure_prior_contracts() {
        let net = linear_scalar(1.0, 0.0);
        let cfg = ModelConfig::new(1, 1, 1).with_sigma(1e12);
        let z = langevin_step(&cfg, &net, &[0.0], &LatentState::new(vec![0.0], 0), 0.01, &[0.0]).unwrap();
        assert_eq!(z, vec![0.0]);
        let z = langevin_step(&cfg, &net, &[0.0], &LatentState::new(vec![1.0], 0), 0.01, &[0.0]).unwrap();
        assert!((z[0] - 0.99).abs() < 1e-12);
    }

    #[test]
    fn step_size_must_be_positive() {
        let net = linear_scalar(1.0, 0.0);
        let cfg = ModelConfig::new(1, 1, 1);
        let st = LatentState::new(vec![0.0], 0);
        assert!(matches!(langevin_step(&cfg, &net, &[0.0], &st, 0.0, &[0.0]), Err(Error::Config(_))));
        let mut inf = InferenceConfig::for_sigma(0.3);
        inf.step_size = -1.0;
        assert!(langevin_infer_z(&cfg, &net, &[0.0], &st, &inf).is_err());
    }

    #[test]
    fn empty_chain_and_determinism() {
        let net = GeneratorNet::init(&Architecture::default(), 2, 2, 3, &mut seeded(1)).unwrap();
        let cfg = ModelConfig::new(2, 2, 3);
        let st = LatentState::new(vec![0.3, -0.7], 1);
        let x = [0.1, 0.2, 0.3];
        let mut inf = InferenceConfig::for_sigma(0.3);
        inf.steps = 0;
        assert_eq!(langevin_infer_z(&cfg, &net, &x, &st, &inf).unwrap().z, st.z);
        inf.steps = 25;
        inf.rng_seed = 77;
        let a = langevin_infer_z(&cfg, &net, &x, &st, &inf).unwrap();
        let b = langevin_infer_z(&cfg, &net, &x, &st, &inf).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.z, st.z);
    }

    #[test]
    fn posterior_symmetry_and_degenerate_prior() {
        let net = constant_clusters(1, &[1.0, -1.0]);
        let cfg = ModelConfig::new(2, 1, 1);
        let p = posterior_y(&cfg, &net, &[0.0], &[0.4]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);

        let net = constant_clusters(1, &[5.0, 0.0, -2.0]);
        let cfg = ModelConfig::new(3, 1, 1).with_prior(vec![1.0, 0.0, 0.0]);
        let p = posterior_y(&cfg, &net, &[0.0], &[0.0]).unwrap();
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn posterior_three_cluster_example() {
        // residual norms^2 (0, 0.18, 0.18) at sigma = 0.3
        let r = 0.18f64.sqrt();
        let net = constant_clusters(1, &[0.0, r, -r]);
        let cfg = ModelConfig::new(3, 1, 1);
        let p = posterior_y(&cfg, &net, &[0.0], &[0.0]).unwrap();
        let e = (-1.0f64).exp();
        let expect = [1.0 / (1.0 + 2.0 * e), e / (1.0 + 2.0 * e), e / (1.0 + 2.0 * e)];
        for i in 0..3 {
            assert!((p[i] - expect[i]).abs() < 1e-12);
        }
        assert!((p[0] - 0.5761).abs() < 1e-4 && (p[1] - 0.2119).abs() < 1e-4);
    }

    #[test]
    fn all_zero_prior_rejected() {
        let scores = [f64::NEG_INFINITY; 3];
        let mut probs = [0.0; 3];
        assert!(matches!(normalize_log_scores(&scores, &mut probs), Err(Error::Config(_))));
    }

    #[test]
    fn log_sum_exp_shift_invariance() {
        let scores = [-1000.0, -1001.5, -999.2];
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        normalize_log_scores(&scores, &mut a).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + 1234.5).collect();
        normalize_log_scores(&shifted, &mut b).unwrap();
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn y_selection_rules() {
        let mut rng = seeded(0);
        for mode in [YMode::Map, YMode::Sample] {
            assert_eq!(select_y(&[0.0, 1.0, 0.0], mode, &mut rng), 1);
        }
        assert_eq!(select_y(&[0.4, 0.4, 0.2], YMode::Map, &mut rng), 0);
    }

    #[test]
    fn sampled_y_frequencies() {
        let post = [0.15, 0.6, 0.25];
        let mut rng = seeded(3);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[select_y(&post, YMode::Sample, &mut rng)] += 1;
        }
        for i in 0..3 {
            let tol = 3.0 * (post[i] * (1.0 - post[i]) / n as f64).sqrt();
            assert!((counts[i] as f64 / n as f64 - post[i]).abs() < tol);
        }
    }

    #[test]
    fn noop_sweep_and_determinism() {
        let net = constant_clusters(2, &[0.0, 3.0]);
        let cfg = ModelConfig::new(2, 2, 1).with_prior(vec![0.0, 1.0]);
        let st = LatentState::new(vec![0.5, -0.5], 1);
        let mut inf = InferenceConfig::for_sigma(0.3);
        inf.steps = 0;
        assert_eq!(gibbs_sweep(&cfg, &net, &[3.0], &st, &inf).unwrap(), st);

        let net = GeneratorNet::init(&Architecture::default(), 2, 3, 4, &mut seeded(2)).unwrap();
        let cfg = ModelConfig::new(3, 2, 4);
        inf.steps = 10;
        inf.rng_seed = 5;
        let x = [0.2, 0.1, -0.3, 0.5];
        let st = LatentState::new(vec![0.0, 0.0], 0);
        assert_eq!(
            gibbs_sweep(&cfg, &net, &x, &st, &inf).unwrap(),
            gibbs_sweep(&cfg, &net, &x, &st, &inf).unwrap()
        );
    }

    #[test]
    fn map_y_maximizes_log_joint() {
        let net = GeneratorNet::init(&Architecture::default(), 2, 4, 3, &mut seeded(12)).unwrap();
        let cfg = ModelConfig::new(4, 2, 3).with_prior(vec![0.1, 0.2, 0.3, 0.4]);
        let mut rng = seeded(0);
        for t in 0..50 {
            let z = model::standard_normal_vec(2, &mut rng);
            let x = model::standard_normal_vec(3, &mut rng);
            let y = infer_y(&cfg, &net, &x, &z, YMode::Map, &mut rng).unwrap();
            let best = (0..4)
                .map(|i| model::log_joint(&cfg, &net, &x, &LatentState::new(z.clone(), i)).unwrap())
                .collect::<Vec<_>>();
            assert_eq!(y, argmax(&best), "trial {t}");
        }
    }

    #[test]
    fn small_step_gradient_flow_ascends() {
        let mut rng = seeded(31);
        for _ in 0..10 {
            let net = GeneratorNet::init(&Architecture::default(), 3, 2, 5, &mut rng).unwrap();
            let cfg = ModelConfig::new(2, 3, 5);
            let x = model::standard_normal_vec(5, &mut rng);
            let mut st = LatentState::new(model::standard_normal_vec(3, &mut rng), 1);
            let mut prev = model::log_joint(&cfg, &net, &x, &st).unwrap();
            for _ in 0..200 {
                st.z = langevin_step(&cfg, &net, &x, &st, 1e-4, &[0.0; 3]).unwrap();
                let cur = model::log_joint(&cfg, &net, &x, &st).unwrap();
                assert!(cur >= prev - 1e-12, "{cur} < {prev}");
                prev = cur;
            }
        }
    }

    #[test]
    fn clipping_bounds_the_update() {
        // slope 1e4 makes the residual gradient huge
        let net = linear_scalar(1e4, 0.0);
        let cfg = ModelConfig::new(1, 1, 1);
        let mut sampler = Sampler::new(&cfg, &net).unwrap();
        let mut z = vec![0.0];
        let clipped = sampler.step(&[1.0], &mut z, 0, 1e-3, &[0.0]).unwrap();
        assert!(clipped);
        assert!((z[0] - 1.0).abs() < 1e-12);
    }
}
