//! Priors, the unnormalized log-joint and its gradients.
//!
//! `log p(x, y, z) = -|z|^2/2 - |x - G(z, y)|^2 / (2 sigma^2) + log pi_y`, with
//! every Gaussian normalizing constant dropped. The `log pi_y` term is constant
//! in `z` and only matters when comparing clusters.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::netcore::{GeneratorNet, Workspace};

pub const DEFAULT_SIGMA: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub clusters: usize,
    pub latent_dim: usize,
    pub data_dim: usize,
    /// Observation noise standard deviation.
    pub sigma: f64,
    /// Cluster prior, length `clusters`.
    pub prior: Vec<f64>,
}

impl ModelConfig {
    /// Uniform prior and the default noise level.
    pub fn new(clusters: usize, latent_dim: usize, data_dim: usize) -> Self {
        ModelConfig {
            clusters,
            latent_dim,
            data_dim,
            sigma: DEFAULT_SIGMA,
            prior: vec![1.0 / clusters.max(1) as f64; clusters],
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_prior(mut self, prior: Vec<f64>) -> Self {
        self.prior = prior;
        self
    }

    /// Structural checks. `sigma == 0` passes here (noiseless synthesis) but is
    /// rejected by every density evaluation.
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::config("cluster count must be at least 1"));
        }
        if self.data_dim == 0 {
            return Err(Error::config("data dimension must be at least 1"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!("sigma must be finite and >= 0, got {}", self.sigma)));
        }
        if self.prior.len() != self.clusters {
            return Err(Error::config(format!(
                "prior has {} entries for {} clusters",
                self.prior.len(),
                self.clusters
            )));
        }
        if self.prior.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::config("prior entries must be finite and non-negative"));
        }
        let total: f64 = self.prior.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("prior sums to {total}, not 1")));
        }
        Ok(())
    }

    pub(crate) fn check_density(&self) -> Result<()> {
        self.validate()?;
        if self.sigma <= 0.0 {
            return Err(Error::config("sigma must be > 0 to evaluate the density"));
        }
        Ok(())
    }

    pub(crate) fn check_net(&self, net: &GeneratorNet) -> Result<()> {
        if net.latent_dim() != self.latent_dim
            || net.clusters() != self.clusters
            || net.data_dim() != self.data_dim
        {
            return Err(Error::config(format!(
                "generator is (d={}, K={}, D={}) but model config is (d={}, K={}, D={})",
                net.latent_dim(),
                net.clusters(),
                net.data_dim(),
                self.latent_dim,
                self.clusters,
                self.data_dim
            )));
        }
        Ok(())
    }

    pub fn log_prior(&self) -> Vec<f64> {
        self.prior.iter().map(|p| p.ln()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub z: Vec<f64>,
    pub y: usize,
}

impl LatentState {
    pub fn new(z: Vec<f64>, y: usize) -> Self {
        LatentState { z, y }
    }
}

/// Value of the log-joint split into its parts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JointTerms {
    /// `|x - G(z, y)|^2`
    pub sq_residual: f64,
    pub log_joint: f64,
}

/// Borrowed model plus scratch buffers for repeated evaluations on one thread.
pub struct Density<'a> {
    cfg: &'a ModelConfig,
    net: &'a GeneratorNet,
    log_prior: Vec<f64>,
    inv_var: f64,
    ws: Workspace,
    upstream: Vec<f64>,
}

impl<'a> Density<'a> {
    pub fn new(cfg: &'a ModelConfig, net: &'a GeneratorNet) -> Result<Self> {
        cfg.check_density()?;
        cfg.check_net(net)?;
        Ok(Density {
            cfg,
            net,
            log_prior: cfg.log_prior(),
            inv_var: 1.0 / (cfg.sigma * cfg.sigma),
            ws: net.workspace(),
            upstream: vec![0.0; cfg.data_dim],
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        self.cfg
    }

    pub fn net(&self) -> &GeneratorNet {
        self.net
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.cfg.data_dim {
            return Err(Error::input(format!(
                "example has {} values, model expects {}",
                x.len(),
                self.cfg.data_dim
            )));
        }
        Ok(())
    }

    /// Runs the generator and fills `upstream` with `(x - G) / sigma^2`.
    fn residual(&mut self, x: &[f64], z: &[f64], y: usize) -> Result<JointTerms> {
        self.check_x(x)?;
        let g = self.net.eval(z, y, &mut self.ws)?;
        let mut sq = 0.0;
        for ((u, &xi), &gi) in self.upstream.iter_mut().zip(x).zip(g) {
            let r = xi - gi;
            sq += r * r;
            *u = r * self.inv_var;
        }
        let zz: f64 = z.iter().map(|v| v * v).sum();
        Ok(JointTerms {
            sq_residual: sq,
            log_joint: -0.5 * zz - 0.5 * sq * self.inv_var + self.log_prior[y],
        })
    }

    pub fn log_joint(&mut self, x: &[f64], z: &[f64], y: usize) -> Result<JointTerms> {
        self.residual(x, z, y)
    }

    /// Writes `d/dz log p` into `grad`.
    pub fn grad_z(&mut self, x: &[f64], z: &[f64], y: usize, grad: &mut [f64]) -> Result<JointTerms> {
        let terms = self.residual(x, z, y)?;
        self.net.backprop(&mut self.ws, &self.upstream, None, grad)?;
        for (g, zi) in grad.iter_mut().zip(z) {
            *g -= zi;
        }
        Ok(terms)
    }

    /// Adds `d/dtheta log p` into `grad`.
    pub fn accumulate_grad_theta(
        &mut self,
        x: &[f64],
        z: &[f64],
        y: usize,
        grad: &mut [f64],
    ) -> Result<JointTerms> {
        let terms = self.residual(x, z, y)?;
        let mut gz = vec![0.0; z.len()];
        self.net.backprop(&mut self.ws, &self.upstream, Some(grad), &mut gz)?;
        Ok(terms)
    }

    /// Log-scores `log pi_i - |x - G(z, i)|^2 / (2 sigma^2)` for every cluster.
    /// Clusters with zero prior get `-inf` without running the generator.
    pub fn cluster_scores(&mut self, x: &[f64], z: &[f64], scores: &mut [f64]) -> Result<()> {
        self.check_x(x)?;
        for (i, s) in scores.iter_mut().enumerate() {
            if self.log_prior[i] == f64::NEG_INFINITY {
                *s = f64::NEG_INFINITY;
                continue;
            }
            let g = self.net.eval(z, i, &mut self.ws)?;
            let sq: f64 = x.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum();
            *s = self.log_prior[i] - 0.5 * sq * self.inv_var;
        }
        Ok(())
    }
}

fn check_state(cfg: &ModelConfig, state: &LatentState) -> Result<()> {
    if state.z.len() != cfg.latent_dim {
        return Err(Error::Shape {
            layer: 0,
            expected: cfg.latent_dim,
            got: state.z.len(),
        });
    }
    if state.y >= cfg.clusters {
        return Err(Error::input(format!(
            "cluster {} out of range for K={}",
            state.y, cfg.clusters
        )));
    }
    Ok(())
}

pub fn log_joint(
    cfg: &ModelConfig,
    net: &GeneratorNet,
    x: &[f64],
    state: &LatentState,
) -> Result<f64> {
    check_state(cfg, state)?;
    Ok(Density::new(cfg, net)?.log_joint(x, &state.z, state.y)?.log_joint)
}

pub fn grad_z_log_joint(
    cfg: &ModelConfig,
    net: &GeneratorNet,
    x: &[f64],
    state: &LatentState,
) -> Result<Vec<f64>> {
    check_state(cfg, state)?;
    let mut grad = vec![0.0; cfg.latent_dim];
    Density::new(cfg, net)?.grad_z(x, &state.z, state.y, &mut grad)?;
    Ok(grad)
}

pub fn grad_theta_log_joint(
    cfg: &ModelConfig,
    net: &GeneratorNet,
    x: &[f64],
    state: &LatentState,
) -> Result<Vec<f64>> {
    check_state(cfg, state)?;
    let mut grad = vec![0.0; net.theta().len()];
    Density::new(cfg, net)?.accumulate_grad_theta(x, &state.z, state.y, &mut grad)?;
    Ok(grad)
}

/// Index drawn from a discrete distribution whose weights sum to one.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last_positive = i;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    last_positive
}

pub(crate) fn standard_normal_vec<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// One draw from the generative process: `y ~ Cat(pi)`, `z ~ N(0, I)`,
/// `x = G(z, y) + sigma * eps`.
pub fn synthesize<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    net: &GeneratorNet,
    rng: &mut R,
) -> Result<(Vec<f64>, LatentState)> {
    cfg.validate()?;
    cfg.check_net(net)?;
    let y = sample_categorical(&cfg.prior, rng);
    let z = standard_normal_vec(cfg.latent_dim, rng);
    let mut ws = net.workspace();
    let mean = net.eval(&z, y, &mut ws)?;
    let x = if cfg.sigma == 0.0 {
        mean.to_vec()
    } else {
        mean.iter()
            .map(|&m| {
                let e: f64 = StandardNormal.sample(rng);
                m + cfg.sigma * e
            })
            .collect()
    };
    Ok((x, LatentState { z, y }))
}
