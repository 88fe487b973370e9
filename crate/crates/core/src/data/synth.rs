//! Synthetic clustered data drawn from a planted generator.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Examples};
use crate::error::{Error, Result};
use crate::model::{synthesize, ModelConfig, DEFAULT_SIGMA};
use crate::netcore::{Activation, GeneratorNet, LayerSpec, Mlp};
use crate::rng::{stream, Purpose};

const PLACEMENT_ATTEMPTS: usize = 1000;

/// Offset that closes the ReLU gates of inactive clusters. The planted map is
/// exact while every `|z_j| < GATE`.
const GATE: f64 = 1e3;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub clusters: usize,
    pub latent_dim: usize,
    pub data_dim: usize,
    /// Minimum distance between cluster centres, in units of `sigma`.
    pub separation: f64,
    pub n: usize,
    pub seed: u64,
    pub sigma: f64,
}

impl SynthSpec {
    pub fn new(clusters: usize, latent_dim: usize, data_dim: usize, separation: f64, n: usize) -> Self {
        SynthSpec {
            clusters,
            latent_dim,
            data_dim,
            separation,
            n,
            seed: 0,
            sigma: DEFAULT_SIGMA,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.clusters, self.latent_dim, self.data_dim).with_sigma(self.sigma)
    }

    fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.data_dim == 0 {
            return Err(Error::config("synthetic data needs k >= 1 and D >= 1"));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::config("separation must be > 0"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma must be >= 0"));
        }
        Ok(())
    }
}

impl fmt::Display for SynthSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "k={},d={},D={},sep={},n={},seed={},sigma={}",
            self.clusters, self.latent_dim, self.data_dim, self.separation, self.n, self.seed, self.sigma
        )
    }
}

impl FromStr for SynthSpec {
    type Err = Error;

    /// Comma-separated `key=value` list: `k`, `d`, `D`, `sep`, `n`, and optionally
    /// `seed` and `sigma`. Keys are case-sensitive (`d` vs `D`).
    fn from_str(s: &str) -> Result<Self> {
        let mut spec = SynthSpec::new(3, 2, 16, 10.0, 3000);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::config(format!("synthetic spec entry {part:?} is not key=value")))?;
            let bad = || Error::config(format!("bad value for {key:?} in synthetic spec: {value:?}"));
            let value = value.trim();
            match key.trim() {
                "k" => spec.clusters = value.parse().map_err(|_| bad())?,
                "d" => spec.latent_dim = value.parse().map_err(|_| bad())?,
                "D" => spec.data_dim = value.parse().map_err(|_| bad())?,
                "sep" => spec.separation = value.parse().map_err(|_| bad())?,
                "n" => spec.n = value.parse().map_err(|_| bad())?,
                "seed" => spec.seed = value.parse().map_err(|_| bad())?,
                "sigma" => spec.sigma = value.parse().map_err(|_| bad())?,
                other => return Err(Error::config(format!("unknown synthetic spec key {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Length scale of the planted geometry; never zero even for noiseless specs.
fn base_scale(spec: &SynthSpec) -> f64 {
    (spec.separation * spec.sigma).max(1.0)
}

/// Cluster centres pairwise at least `separation * sigma` apart.
pub fn place_centres<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let min_dist = spec.separation * spec.sigma;
    let spread = 1.5 * base_scale(spec) / (2.0 * spec.data_dim as f64).sqrt();
    for _ in 0..PLACEMENT_ATTEMPTS {
        let centres: Vec<Vec<f64>> = (0..spec.clusters)
            .map(|_| {
                (0..spec.data_dim)
                    .map(|_| spread * { let v: f64 = StandardNormal.sample(rng); v })
                    .collect()
            })
            .collect();
        let ok = centres.iter().enumerate().all(|(i, a)| {
            centres[..i].iter().all(|b| {
                let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
                d2.sqrt() >= min_dist
            })
        });
        if ok {
            return Ok(centres);
        }
    }
    Err(Error::Generation(format!(
        "could not place {} centres {min_dist} apart in {} dimensions after {PLACEMENT_ATTEMPTS} attempts",
        spec.clusters, spec.data_dim
    )))
}

/// Generator computing `A_y z + b_y` with a random linear map per cluster.
///
/// Hidden layer: for every cluster `k` and latent coordinate `j` the pair
/// `relu(+-z_j + GATE * y_k - GATE)` (nonzero only when `y_k = 1`), plus one unit
/// passing `y_k` itself; the output layer recombines them as `A_k z + b_k`.
pub fn planted_generator<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<GeneratorNet> {
    spec.validate()?;
    let (k, d, dim) = (spec.clusters, spec.latent_dim, spec.data_dim);
    let centres = place_centres(spec, rng)?;
    let slope = 0.4 * base_scale(spec) / ((dim * d.max(1)) as f64).sqrt();
    let maps: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            (0..dim * d)
                .map(|_| slope * { let v: f64 = StandardNormal.sample(rng); v })
                .collect()
        })
        .collect();

    let n_in = d + k;
    let hidden = 2 * k * d + k;
    let mlp = Mlp::new(vec![
        LayerSpec::affine(n_in, hidden),
        LayerSpec::nonlinearity(hidden, Activation::Relu),
        LayerSpec::affine(hidden, dim),
    ])?;
    let mut theta = vec![0.0; mlp.param_len()];
    let (w1, rest) = theta.split_at_mut(n_in * hidden);
    let (b1, w2) = rest.split_at_mut(hidden);
    let gated = |c: usize, j: usize, sign: usize| (c * d + j) * 2 + sign;
    for c in 0..k {
        for j in 0..d {
            for (sign, coeff) in [(0, 1.0), (1, -1.0)] {
                let h = gated(c, j, sign);
                w1[h * n_in + j] = coeff;
                w1[h * n_in + d + c] = GATE;
                b1[h] = -GATE;
            }
        }
        let pass = 2 * k * d + c;
        w1[pass * n_in + d + c] = 1.0;
    }
    // w2 is dim x hidden followed by a zero bias
    for o in 0..dim {
        let row = &mut w2[o * hidden..(o + 1) * hidden];
        for c in 0..k {
            for j in 0..d {
                let a = maps[c][o * d + j];
                row[gated(c, j, 0)] = a;
                row[gated(c, j, 1)] = -a;
            }
            row[2 * k * d + c] = centres[c][o];
        }
    }
    GeneratorNet::new(mlp, theta, k)
}

/// Draws `spec.n` labelled examples from a freshly planted generator.
pub fn synth_mixture(spec: &SynthSpec) -> Result<Dataset> {
    let (dataset, _) = synth_mixture_with_truth(spec)?;
    Ok(dataset)
}

/// Same as [`synth_mixture`], also returning the planted generator.
pub fn synth_mixture_with_truth(spec: &SynthSpec) -> Result<(Dataset, GeneratorNet)> {
    spec.validate()?;
    let mut rng = stream(spec.seed, 0, 0, Purpose::Synth);
    let net = planted_generator(spec, &mut rng)?;
    let cfg = spec.model_config();
    let mut data = Vec::with_capacity(spec.n * spec.data_dim);
    let mut labels = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let (x, state) = synthesize(&cfg, &net, &mut rng)?;
        data.extend_from_slice(&x);
        labels.push(state.y);
    }
    let dataset = Dataset::new(Examples::new(data, spec.data_dim)?, Some(labels))?;
    Ok((dataset, net))
}
