//! Per-pixel clustering: the discrete latent becomes a label map.
//!
//! Pixel `(r, c)` has mean `palette[label(r, c)] + m(z)` where `m` is a small
//! dense network of a global style vector `z`. Given `z` the pixels are
//! independent, so each label's conditional is exact; an optional Potts term
//! `beta * #{4-neighbours sharing the label}` couples neighbours.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::pnm::PnmImage;
use crate::data::synth::{place_centres, SynthSpec};
use crate::data::{Dataset, Examples, ImageShape};
use crate::error::{Error, Result};
use crate::infer::{self, normalize_log_scores, select_y, InferenceConfig, YMode};
use crate::learn::LatentModel;
use crate::metrics;
use crate::model::{self, JointTerms};
use crate::netcore::{Activation, ByteCursor, Mlp, Tensor};
use crate::rng::{stream, Purpose, StreamRng};

/// Hidden width of the style network.
pub const MODULATION_HIDDEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<usize>, clusters: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::input("label map needs positive height and width"));
        }
        if labels.len() != height * width {
            return Err(Error::input(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= clusters) {
            return Err(Error::input(format!("label {bad} out of range for K={clusters}")));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn uniform(height: usize, width: usize, label: usize) -> Self {
        LabelMap {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, r: usize, c: usize) -> usize {
        self.labels[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, label: usize) {
        self.labels[r * self.width + c] = label;
    }

    /// Labels of the up/down/left/right neighbours that exist.
    fn neighbours(&self, r: usize, c: usize) -> impl Iterator<Item = usize> + '_ {
        let up = (r > 0).then(|| self.get(r - 1, c));
        let down = (r + 1 < self.height).then(|| self.get(r + 1, c));
        let left = (c > 0).then(|| self.get(r, c - 1));
        let right = (c + 1 < self.width).then(|| self.get(r, c + 1));
        [up, down, left, right].into_iter().flatten()
    }

    /// Number of horizontally or vertically adjacent pairs sharing a label.
    pub fn agreeing_pairs(&self) -> usize {
        let mut n = 0;
        for r in 0..self.height {
            for c in 0..self.width {
                let l = self.get(r, c);
                n += usize::from(c + 1 < self.width && self.get(r, c + 1) == l);
                n += usize::from(r + 1 < self.height && self.get(r + 1, c) == l);
            }
        }
        n
    }

    /// Grey levels `round(255 i / (K - 1))`; all zero when `K = 1`.
    pub fn to_pgm(&self, clusters: usize) -> PnmImage {
        let pixels = self
            .labels
            .iter()
            .map(|&l| label_grey(l, clusters))
            .collect();
        PnmImage {
            width: self.width,
            height: self.height,
            channels: 1,
            pixels,
        }
    }

    pub fn from_pgm(img: &PnmImage, clusters: usize) -> Result<Self> {
        if img.channels != 1 {
            return Err(Error::input("label maps are single-channel PGM images"));
        }
        if clusters == 0 {
            return Err(Error::config("K must be positive"));
        }
        let labels = img
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let l = if clusters == 1 {
                    0
                } else {
                    (f64::from(v) * (clusters - 1) as f64 / 255.0).round() as usize
                };
                if label_grey(l, clusters) != v {
                    return Err(Error::input(format!(
                        "pixel {i} has grey level {v}, which encodes no label for K={clusters}"
                    )));
                }
                Ok(l)
            })
            .collect::<Result<Vec<_>>>()?;
        LabelMap::new(img.height, img.width, labels, clusters)
    }

    pub fn write_pgm(&self, clusters: usize, path: &Path) -> Result<()> {
        self.to_pgm(clusters).write(path)
    }

    pub fn read_pgm(path: &Path, clusters: usize) -> Result<Self> {
        LabelMap::from_pgm(&PnmImage::read(path)?, clusters)
    }
}

fn label_grey(label: usize, clusters: usize) -> u8 {
    if clusters <= 1 {
        0
    } else {
        (255.0 * label as f64 / (clusters - 1) as f64).round() as u8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelSceneConfig {
    pub clusters: usize,
    pub latent_dim: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub sigma: f64,
    /// Potts weight; zero gives the exact factorized posterior.
    pub beta: f64,
    pub prior: Vec<f64>,
}

impl PixelSceneConfig {
    pub fn new(clusters: usize, latent_dim: usize, shape: ImageShape) -> Self {
        PixelSceneConfig {
            clusters,
            latent_dim,
            height: shape.height,
            width: shape.width,
            channels: shape.channels,
            sigma: model::DEFAULT_SIGMA,
            beta: 0.0,
            prior: vec![1.0 / clusters.max(1) as f64; clusters],
        }
    }

    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("per-pixel model needs a style latent (d >= 1)"));
        }
        if self.pixels() == 0 || self.channels == 0 {
            return Err(Error::config("image shape must be nonempty"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if self.prior.len() != self.clusters
            || self.prior.iter().any(|p| p.is_nan() || *p < 0.0)
            || (self.prior.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(Error::config("prior must have K nonnegative entries summing to 1"));
        }
        Ok(())
    }

    /// Langevin step that keeps the summed-over-pixels gradient on the same
    /// scale as a single example's: `0.3 sigma^2 / (H W)`.
    pub fn default_step_size(&self) -> f64 {
        infer::default_step_size(self.sigma) / self.pixels() as f64
    }

    pub fn inference(&self) -> InferenceConfig {
        let mut inf = InferenceConfig::for_sigma(self.sigma);
        inf.step_size = self.default_step_size();
        inf
    }
}

/// Palette plus style network; `theta = [palette (K x C) ; style params]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelScene {
    cfg: PixelSceneConfig,
    modulation: Mlp,
    theta: Vec<f64>,
    log_prior: Vec<f64>,
}

impl PixelScene {
    pub fn new(cfg: PixelSceneConfig, modulation: Mlp, theta: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        if modulation.input_dim() != cfg.latent_dim || modulation.output_dim() != cfg.channels {
            return Err(Error::config(format!(
                "style network maps {} -> {}, expected {} -> {}",
                modulation.input_dim(),
                modulation.output_dim(),
                cfg.latent_dim,
                cfg.channels
            )));
        }
        let palette_len = cfg.clusters * cfg.channels;
        if theta.len() != palette_len + modulation.param_len() {
            return Err(Error::Shape {
                layer: 0,
                expected: palette_len + modulation.param_len(),
                got: theta.len(),
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("scene parameters must be finite"));
        }
        let log_prior = cfg.prior.iter().map(|p| p.ln()).collect();
        Ok(PixelScene {
            cfg,
            modulation,
            theta,
            log_prior,
        })
    }

    /// Palette rows drawn like an affine layer from the one-hot label
    /// (uniform on `+-sqrt(6 / (K + C))`); style network per the dense policy.
    pub fn init<R: Rng + ?Sized>(cfg: PixelSceneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let modulation = style_network(&cfg)?;
        let s = (6.0 / (cfg.clusters + cfg.channels) as f64).sqrt();
        let mut theta: Vec<f64> = (0..cfg.clusters * cfg.channels)
            .map(|_| rng.random_range(-s..=s))
            .collect();
        theta.extend(modulation.init_params(rng));
        PixelScene::new(cfg, modulation, theta)
    }

    pub fn cfg(&self) -> &PixelSceneConfig {
        &self.cfg
    }

    pub fn modulation(&self) -> &Mlp {
        &self.modulation
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    fn palette_len(&self) -> usize {
        self.cfg.clusters * self.cfg.channels
    }

    pub fn palette(&self) -> &[f64] {
        &self.theta[..self.palette_len()]
    }

    pub fn palette_mut(&mut self) -> &mut [f64] {
        let n = self.palette_len();
        &mut self.theta[..n]
    }

    pub fn colour(&self, label: usize) -> &[f64] {
        let c = self.cfg.channels;
        &self.theta[label * c..(label + 1) * c]
    }

    pub fn modulation_params(&self) -> &[f64] {
        &self.theta[self.palette_len()..]
    }

    pub fn modulation_params_mut(&mut self) -> &mut [f64] {
        let n = self.palette_len();
        &mut self.theta[n..]
    }

    /// `m(z)`, the colour offset shared by every pixel.
    pub fn style_offset(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut ws = self.modulation.workspace();
        Ok(self
            .modulation
            .forward(self.modulation_params(), z, &mut ws)?
            .to_vec())
    }

    fn check_image(&self, x: &[f64]) -> Result<()> {
        let want = self.cfg.shape().len();
        if x.len() != want {
            return Err(Error::input(format!(
                "image has {} values, scene expects {want} ({})",
                x.len(),
                self.cfg.shape()
            )));
        }
        Ok(())
    }

    fn check_latent(&self, latent: &PixelLatent) -> Result<()> {
        if latent.z.len() != self.cfg.latent_dim {
            return Err(Error::Shape {
                layer: 0,
                expected: self.cfg.latent_dim,
                got: latent.z.len(),
            });
        }
        let map = &latent.map;
        if map.height != self.cfg.height || map.width != self.cfg.width {
            return Err(Error::input(format!(
                "label map is {}x{}, scene is {}x{}",
                map.height, map.width, self.cfg.height, self.cfg.width
            )));
        }
        if map.labels.iter().any(|&l| l >= self.cfg.clusters) {
            return Err(Error::input("label map has labels outside [0, K)"));
        }
        Ok(())
    }

    /// Log-scores of every label at pixel `p` given the style offset.
    fn pixel_scores(&self, x: &[f64], offset: &[f64], map: &LabelMap, p: usize, scores: &mut [f64]) {
        let ch = self.cfg.channels;
        let inv_var = 1.0 / (self.cfg.sigma * self.cfg.sigma);
        let px = &x[p * ch..(p + 1) * ch];
        for (i, s) in scores.iter_mut().enumerate() {
            if self.log_prior[i] == f64::NEG_INFINITY {
                *s = f64::NEG_INFINITY;
                continue;
            }
            let sq: f64 = px
                .iter()
                .zip(self.colour(i))
                .zip(offset)
                .map(|((&v, &col), &o)| (v - col - o) * (v - col - o))
                .sum();
            *s = self.log_prior[i] - 0.5 * sq * inv_var;
        }
        if self.cfg.beta > 0.0 {
            let (r, c) = (p / map.width, p % map.width);
            for n in map.neighbours(r, c) {
                scores[n] += self.cfg.beta;
            }
        }
    }

    /// `sum_p (x_p - palette[label_p])`: the per-channel residual before the style offset.
    fn palette_residual_sum(&self, x: &[f64], map: &LabelMap) -> Vec<f64> {
        let ch = self.cfg.channels;
        let mut acc = vec![0.0; ch];
        for (p, &l) in map.labels.iter().enumerate() {
            for ((a, &v), &col) in acc.iter_mut().zip(&x[p * ch..(p + 1) * ch]).zip(self.colour(l)) {
                *a += v - col;
            }
        }
        acc
    }

    fn terms(&self, x: &[f64], latent: &PixelLatent, offset: &[f64]) -> JointTerms {
        let ch = self.cfg.channels;
        let inv_var = 1.0 / (self.cfg.sigma * self.cfg.sigma);
        let mut sq = 0.0;
        let mut log_prior = 0.0;
        for (p, &l) in latent.map.labels.iter().enumerate() {
            log_prior += self.log_prior[l];
            for ((&v, &col), &o) in x[p * ch..(p + 1) * ch].iter().zip(self.colour(l)).zip(offset) {
                sq += (v - col - o) * (v - col - o);
            }
        }
        let zz: f64 = latent.z.iter().map(|v| v * v).sum();
        let potts = self.cfg.beta * latent.map.agreeing_pairs() as f64;
        JointTerms {
            sq_residual: sq,
            log_joint: -0.5 * zz - 0.5 * sq * inv_var + log_prior + potts,
        }
    }

    /// Langevin chain on `z` with the labels held fixed.
    fn langevin_z(
        &self,
        x: &[f64],
        latent: &mut PixelLatent,
        inf: &InferenceConfig,
        rng: &mut StreamRng,
    ) -> Result<u64> {
        let inv_var = 1.0 / (self.cfg.sigma * self.cfg.sigma);
        let n = self.cfg.pixels() as f64;
        let base = self.palette_residual_sum(x, &latent.map);
        let theta = self.modulation_params();
        let mut ws = self.modulation.workspace();
        let mut upstream = vec![0.0; self.cfg.channels];
        let mut grad = vec![0.0; self.cfg.latent_dim];
        let scale = (2.0 * inf.step_size).sqrt();
        let mut clipped = 0;
        for _ in 0..inf.steps {
            let offset = self.modulation.forward(theta, &latent.z, &mut ws)?;
            for ((u, &b), &o) in upstream.iter_mut().zip(&base).zip(offset) {
                *u = (b - n * o) * inv_var;
            }
            self.modulation.backward(theta, &mut ws, &upstream, None)?;
            for ((g, &gi), &zi) in grad.iter_mut().zip(ws.input_grad()).zip(&latent.z) {
                *g = gi - zi;
            }
            clipped += u64::from(infer::clip(&mut grad));
            for (zi, g) in latent.z.iter_mut().zip(&grad) {
                let noise: f64 = rng.sample(StandardNormal);
                *zi += inf.step_size * g + scale * noise;
            }
        }
        if latent.z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                example: usize::MAX,
                norm: f64::NAN,
            });
        }
        Ok(clipped)
    }

    /// Raster-order label updates under the current `z`.
    fn update_labels(
        &self,
        x: &[f64],
        latent: &mut PixelLatent,
        mode: YMode,
        rng: &mut StreamRng,
    ) -> Result<()> {
        let offset = self.style_offset(&latent.z)?;
        let mut scores = vec![0.0; self.cfg.clusters];
        let mut probs = vec![0.0; self.cfg.clusters];
        for p in 0..self.cfg.pixels() {
            self.pixel_scores(x, &offset, &latent.map, p, &mut scores);
            normalize_log_scores(&scores, &mut probs)?;
            latent.map.labels[p] = select_y(&probs, mode, rng);
        }
        Ok(())
    }

    /// Labels set to the per-pixel mode under `z`, ignoring neighbours.
    pub fn map_labels(&self, x: &[f64], z: &[f64]) -> Result<LabelMap> {
        self.check_image(x)?;
        let offset = self.style_offset(z)?;
        let mut scores = vec![0.0; self.cfg.clusters];
        let blank = LabelMap::uniform(self.cfg.height, self.cfg.width, 0);
        let labels = (0..self.cfg.pixels())
            .map(|p| {
                self.pixel_scores(x, &offset, &blank, p, &mut scores);
                infer::argmax(&scores)
            })
            .collect();
        LabelMap::new(self.cfg.height, self.cfg.width, labels, self.cfg.clusters)
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        encode_scene(self)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        decode_scene(bytes)
    }
}

fn style_network(cfg: &PixelSceneConfig) -> Result<Mlp> {
    Mlp::dense(
        cfg.latent_dim,
        &[MODULATION_HIDDEN],
        cfg.channels,
        Activation::Tanh,
        Activation::Identity,
    )
}

/// Style vector and label map of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelLatent {
    pub z: Vec<f64>,
    pub map: LabelMap,
}

impl LatentModel for PixelScene {
    type Latent = PixelLatent;

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn data_dim(&self) -> usize {
        self.cfg.shape().len()
    }

    fn sample_latent(&self, rng: &mut StreamRng) -> Result<PixelLatent> {
        let z = model::standard_normal_vec(self.cfg.latent_dim, rng);
        let labels = (0..self.cfg.pixels())
            .map(|_| model::sample_categorical(&self.cfg.prior, rng))
            .collect();
        Ok(PixelLatent {
            z,
            map: LabelMap {
                height: self.cfg.height,
                width: self.cfg.width,
                labels,
            },
        })
    }

    fn sweep(
        &self,
        x: &[f64],
        latent: &mut PixelLatent,
        inf: &InferenceConfig,
        rng: &mut StreamRng,
    ) -> Result<u64> {
        self.check_image(x)?;
        self.check_latent(latent)?;
        inf.validate()?;
        self.update_labels(x, latent, inf.y_mode, rng)?;
        self.langevin_z(x, latent, inf, rng)
    }

    fn accumulate_grad(&self, x: &[f64], latent: &PixelLatent, grad: &mut [f64]) -> Result<JointTerms> {
        self.check_image(x)?;
        self.check_latent(latent)?;
        let ch = self.cfg.channels;
        let inv_var = 1.0 / (self.cfg.sigma * self.cfg.sigma);
        let mut ws = self.modulation.workspace();
        let offset = self
            .modulation
            .forward(self.modulation_params(), &latent.z, &mut ws)?
            .to_vec();
        let (palette_grad, style_grad) = grad.split_at_mut(self.palette_len());
        let mut total = vec![0.0; ch];
        for (p, &l) in latent.map.labels.iter().enumerate() {
            let px = &x[p * ch..(p + 1) * ch];
            for j in 0..ch {
                let r = (px[j] - self.colour(l)[j] - offset[j]) * inv_var;
                palette_grad[l * ch + j] += r;
                total[j] += r;
            }
        }
        self.modulation
            .backward(self.modulation_params(), &mut ws, &total, Some(style_grad))?;
        Ok(self.terms(x, latent, &offset))
    }

    fn evaluate(&self, x: &[f64], latent: &PixelLatent) -> Result<JointTerms> {
        self.check_image(x)?;
        self.check_latent(latent)?;
        let offset = self.style_offset(&latent.z)?;
        Ok(self.terms(x, latent, &offset))
    }
}

/// Mean image `palette[label] + m(z)`, shape `[H, W, C]`.
pub fn pixel_forward(scene: &PixelScene, z: &[f64], map: &LabelMap) -> Result<Tensor> {
    let latent = PixelLatent {
        z: z.to_vec(),
        map: map.clone(),
    };
    scene.check_latent(&latent)?;
    let offset = scene.style_offset(z)?;
    let cfg = scene.cfg();
    let mut data = Vec::with_capacity(cfg.shape().len());
    for &l in map.labels() {
        data.extend(scene.colour(l).iter().zip(&offset).map(|(c, o)| c + o));
    }
    Tensor::new(vec![cfg.height, cfg.width, cfg.channels], data)
}

/// Conditional over the label at `(r, c)` with every other label fixed.
pub fn pixel_posterior(
    scene: &PixelScene,
    x: &[f64],
    z: &[f64],
    map: &LabelMap,
    r: usize,
    c: usize,
) -> Result<Vec<f64>> {
    scene.check_image(x)?;
    let latent = PixelLatent {
        z: z.to_vec(),
        map: map.clone(),
    };
    scene.check_latent(&latent)?;
    if r >= map.height || c >= map.width {
        return Err(Error::input(format!(
            "pixel ({r}, {c}) outside a {}x{} map",
            map.height, map.width
        )));
    }
    let offset = scene.style_offset(z)?;
    let k = scene.cfg().clusters;
    let mut scores = vec![0.0; k];
    let mut probs = vec![0.0; k];
    scene.pixel_scores(x, &offset, map, r * map.width + c, &mut scores);
    normalize_log_scores(&scores, &mut probs)?;
    Ok(probs)
}

/// Raster label updates, then one Langevin pass on `z`. Returns the new map;
/// `z` is updated in place.
pub fn pixel_gibbs_sweep(
    scene: &PixelScene,
    x: &[f64],
    z: &mut Vec<f64>,
    map: &LabelMap,
    inf: &InferenceConfig,
) -> Result<LabelMap> {
    let mut latent = PixelLatent {
        z: std::mem::take(z),
        map: map.clone(),
    };
    let mut rng = stream(inf.rng_seed, 0, 0, Purpose::Sweep);
    let result = scene.sweep(x, &mut latent, inf, &mut rng);
    *z = latent.z;
    result?;
    Ok(latent.map)
}

/// Clustering accuracy over all pixels of one map.
pub fn pixel_accuracy(gt: &LabelMap, pred: &LabelMap, clusters: usize) -> Result<f64> {
    if gt.height != pred.height || gt.width != pred.width {
        return Err(Error::input(format!(
            "maps differ in size: {}x{} vs {}x{}",
            gt.height, gt.width, pred.height, pred.width
        )));
    }
    let labels = gt.labels.iter().copied().max().map_or(1, |m| m + 1);
    Ok(metrics::clustering_accuracy(&gt.labels, &pred.labels, labels, clusters)?.acc)
}

/// Fresh latents per image followed by `sweeps` Gibbs sweeps; the starting map
/// is the per-pixel mode under the initial `z`.
pub fn infer_scenes(
    scene: &PixelScene,
    images: &Examples,
    inf: &InferenceConfig,
    sweeps: usize,
) -> Result<Vec<PixelLatent>> {
    (0..images.len())
        .into_par_iter()
        .map(|i| {
            let x = images.row(i);
            let mut rng = stream(inf.rng_seed, i as u64, 0, Purpose::Eval);
            let z = model::standard_normal_vec(scene.cfg().latent_dim, &mut rng);
            let map = scene.map_labels(x, &z)?;
            let mut latent = PixelLatent { z, map };
            for _ in 0..sweeps {
                scene
                    .sweep(x, &mut latent, inf, &mut rng)
                    .map_err(|e| match e {
                        Error::NonFinite { norm, .. } => Error::NonFinite { example: i, norm },
                        other => other,
                    })?;
            }
            Ok(latent)
        })
        .collect()
}

/// Synthetic per-pixel benchmark: Voronoi label maps coloured by a palette
/// whose entries are pairwise `separation * sigma` apart, plus a global style offset.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub clusters: usize,
    pub latent_dim: usize,
    pub shape: ImageShape,
    pub separation: f64,
    pub images: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(clusters: usize, shape: ImageShape, separation: f64, images: usize) -> Self {
        SceneSpec {
            clusters,
            latent_dim: 2,
            shape,
            separation,
            images,
            sigma: model::DEFAULT_SIGMA,
            seed: 0,
        }
    }

    pub fn scene_config(&self) -> PixelSceneConfig {
        let mut cfg = PixelSceneConfig::new(self.clusters, self.latent_dim, self.shape);
        cfg.sigma = self.sigma;
        cfg
    }
}

impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "k={},d={},shape={},sep={},n={},sigma={},seed={}",
            self.clusters, self.latent_dim, self.shape, self.separation, self.images, self.sigma, self.seed
        )
    }
}

impl std::str::FromStr for SceneSpec {
    type Err = Error;

    /// `k=3,shape=16x16x3,sep=10,n=50[,d=2,sigma=0.3,seed=0]`
    fn from_str(s: &str) -> Result<Self> {
        let mut spec = SceneSpec::new(0, ImageShape::new(16, 16, 3), 0.0, 0);
        let mut seen = (false, false, false);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::config(format!("scene spec entry {part:?} is not key=value")))?;
            let bad = || Error::config(format!("bad value for {key} in scene spec: {value:?}"));
            match key.trim() {
                "k" => {
                    spec.clusters = value.parse().map_err(|_| bad())?;
                    seen.0 = true;
                }
                "d" => spec.latent_dim = value.parse().map_err(|_| bad())?,
                "shape" => spec.shape = value.parse()?,
                "sep" => {
                    spec.separation = value.parse().map_err(|_| bad())?;
                    seen.1 = true;
                }
                "n" => {
                    spec.images = value.parse().map_err(|_| bad())?;
                    seen.2 = true;
                }
                "sigma" => spec.sigma = value.parse().map_err(|_| bad())?,
                "seed" => spec.seed = value.parse().map_err(|_| bad())?,
                other => return Err(Error::config(format!("unknown scene spec key {other:?}"))),
            }
        }
        if !(seen.0 && seen.1 && seen.2) {
            return Err(Error::config("scene spec needs k, sep and n"));
        }
        Ok(spec)
    }
}

/// Synthetic scenes with their ground-truth maps and the planted scene model.
pub struct SceneSet {
    pub dataset: Dataset,
    pub maps: Vec<LabelMap>,
    pub truth: PixelScene,
}

/// Each map is the Voronoi partition of `2K` random sites whose labels cycle
/// through `0..K`, so every label appears in every image.
pub fn synth_scenes(spec: &SceneSpec) -> Result<SceneSet> {
    let cfg = spec.scene_config();
    cfg.validate()?;
    if spec.separation.is_nan() || spec.separation <= 0.0 {
        return Err(Error::config("separation must be > 0"));
    }
    let mut rng = stream(spec.seed, 0, 0, Purpose::Synth);
    let geometry = SynthSpec {
        sigma: spec.sigma,
        ..SynthSpec::new(spec.clusters, 0, spec.shape.channels, spec.separation, 0)
    };
    let palette = place_centres(&geometry, &mut rng)?;
    let modulation = style_network(&cfg)?;
    let mut theta: Vec<f64> = palette.concat();
    theta.extend(modulation.init_params(&mut rng));
    let truth = PixelScene::new(cfg.clone(), modulation, theta)?;

    let (h, w) = (spec.shape.height, spec.shape.width);
    let sites = 2 * spec.clusters;
    let mut data = Vec::with_capacity(spec.images * spec.shape.len());
    let mut maps = Vec::with_capacity(spec.images);
    for _ in 0..spec.images {
        let pts: Vec<(f64, f64)> = (0..sites)
            .map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)))
            .collect();
        let labels = (0..h * w)
            .map(|p| {
                let (r, c) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
                let nearest = pts
                    .iter()
                    .enumerate()
                    .map(|(i, &(pr, pc))| (i, (pr - r).powi(2) + (pc - c).powi(2)))
                    .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
                    .0;
                nearest % spec.clusters
            })
            .collect();
        let map = LabelMap::new(h, w, labels, spec.clusters)?;
        let z = model::standard_normal_vec(spec.latent_dim, &mut rng);
        let mean = pixel_forward(&truth, &z, &map)?;
        data.extend(mean.data().iter().map(|&m| {
            let e: f64 = rng.sample(StandardNormal);
            m + spec.sigma * e
        }));
        maps.push(map);
    }
    let examples = Examples::new(data, spec.shape.len())?;
    let dataset = Dataset::new(examples, None)?.with_shape(spec.shape);
    Ok(SceneSet {
        dataset,
        maps,
        truth,
    })
}

pub const SCENE_MAGIC: &[u8; 4] = b"CLP1";

/// `CLP1`, then u32 K, d, H, W, C, then f64 sigma, beta and the K prior
/// entries, then u32 parameter count and the parameters, all little-endian.
pub fn encode_scene(scene: &PixelScene) -> Vec<u8> {
    let cfg = scene.cfg();
    let mut out = Vec::new();
    out.extend_from_slice(SCENE_MAGIC);
    for v in [cfg.clusters, cfg.latent_dim, cfg.height, cfg.width, cfg.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in [cfg.sigma, cfg.beta].iter().chain(&cfg.prior) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(scene.theta.len() as u32).to_le_bytes());
    for v in &scene.theta {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_scene(bytes: &[u8]) -> Result<PixelScene> {
    let mut cur = ByteCursor::new(bytes);
    if cur.take(4)? != SCENE_MAGIC {
        return Err(Error::parse(0, "bad scene magic, expected CLP1"));
    }
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = cur.u32_le()? as usize;
    }
    let [clusters, latent_dim, height, width, channels] = dims;
    let sigma = cur.f64_le()?;
    let beta = cur.f64_le()?;
    let prior = (0..clusters).map(|_| cur.f64_le()).collect::<Result<Vec<_>>>()?;
    let count_at = cur.pos();
    let count = cur.u32_le()? as usize;
    let cfg = PixelSceneConfig {
        clusters,
        latent_dim,
        height,
        width,
        channels,
        sigma,
        beta,
        prior,
    };
    cfg.validate()?;
    let modulation = style_network(&cfg)?;
    if count != clusters * channels + modulation.param_len() {
        return Err(Error::parse(count_at, format!("parameter count {count} does not match the header")));
    }
    let theta = (0..count).map(|_| cur.f64_le()).collect::<Result<Vec<_>>>()?;
    cur.finish()?;
    PixelScene::new(cfg, modulation, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::posterior_y;
    use crate::model::ModelConfig;
    use crate::netcore::{GeneratorNet, LayerSpec};
    use crate::rng::seeded;

    fn scene(k: usize, shape: ImageShape, beta: f64, seed: u64) -> PixelScene {
        let mut cfg = PixelSceneConfig::new(k, 2, shape);
        cfg.beta = beta;
        PixelScene::init(cfg, &mut seeded(seed)).unwrap()
    }

    fn zero_style(mut s: PixelScene) -> PixelScene {
        s.modulation_params_mut().fill(0.0);
        s
    }

    #[test]
    fn zero_style_is_palette_lookup() {
        let s = zero_style(scene(3, ImageShape::new(2, 3, 3), 0.0, 1));
        let map = LabelMap::new(2, 3, vec![0, 1, 2, 2, 1, 0], 3).unwrap();
        let out = pixel_forward(&s, &[0.4, -2.0], &map).unwrap();
        assert_eq!(out.shape(), &[2, 3, 3]);
        for (p, &l) in map.labels().iter().enumerate() {
            assert_eq!(&out.data()[p * 3..p * 3 + 3], s.colour(l));
        }
    }

    #[test]
    fn single_label_gives_constant_image() {
        let s = scene(1, ImageShape::new(3, 3, 1), 0.0, 2);
        let out = pixel_forward(&s, &[0.3, 0.1], &LabelMap::uniform(3, 3, 0)).unwrap();
        assert!(out.data().iter().all(|&v| v == out.data()[0]));
    }

    #[test]
    fn forward_matches_straight_line() {
        let s = scene(2, ImageShape::new(2, 2, 2), 0.0, 3);
        let z = [0.7, -0.2];
        let map = LabelMap::new(2, 2, vec![1, 0, 0, 1], 2).unwrap();
        let out = pixel_forward(&s, &z, &map).unwrap();
        // style net is affine(2 -> 16), tanh, affine(16 -> 2)
        let t = s.modulation_params();
        let (w1, rest) = t.split_at(32);
        let (b1, rest) = rest.split_at(16);
        let (w2, b2) = rest.split_at(32);
        let hidden: Vec<f64> = (0..16)
            .map(|h| (w1[h * 2] * z[0] + w1[h * 2 + 1] * z[1] + b1[h]).tanh())
            .collect();
        let offset: Vec<f64> = (0..2)
            .map(|o| (0..16).map(|h| w2[o * 16 + h] * hidden[h]).sum::<f64>() + b2[o])
            .collect();
        for (p, &l) in map.labels().iter().enumerate() {
            for j in 0..2 {
                let want = s.palette()[l * 2 + j] + offset[j];
                assert!((out.data()[p * 2 + j] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn equidistant_pixel_is_uniform() {
        let mut s = zero_style(scene(2, ImageShape::new(1, 1, 1), 0.0, 4));
        s.palette_mut().copy_from_slice(&[0.0, 1.0]);
        let p = pixel_posterior(&s, &[0.5], &[0.0, 0.0], &LabelMap::uniform(1, 1, 0), 0, 0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn potts_term_pulls_towards_neighbours() {
        let mut s = zero_style(scene(2, ImageShape::new(3, 3, 1), 0.0, 5));
        s.palette_mut().copy_from_slice(&[0.0, 1.0]);
        let mut map = LabelMap::uniform(3, 3, 1);
        map.set(1, 1, 0);
        let x = vec![0.5; 9];
        let mut last = 0.0;
        for beta in [0.0, 0.5, 1.0, 2.0, 5.0, 10.0] {
            s.cfg.beta = beta;
            let p = pixel_posterior(&s, &x, &[0.0, 0.0], &map, 1, 1).unwrap();
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
            if beta > 0.0 {
                assert!(p[1] > last);
            }
            // direct evaluation: p1 = e^{4b} / (1 + e^{4b})
            let want = 1.0 / (1.0 + (-4.0 * beta).exp());
            assert!((p[1] - want).abs() < 1e-12);
            last = p[1];
        }
        assert!(last > 0.999);
    }

    #[test]
    fn factorized_posterior_reduces_to_cluster_posterior() {
        // one-pixel scene vs a generator G(z, i) = palette_i + m(z)
        let s = scene(3, ImageShape::new(1, 1, 2), 0.0, 6);
        let z = vec![0.3, -0.8];
        let x = vec![0.2, -0.4];
        let p = pixel_posterior(&s, &x, &z, &LabelMap::uniform(1, 1, 0), 0, 0).unwrap();

        let offset = s.style_offset(&z).unwrap();
        let mlp = Mlp::new(vec![LayerSpec::affine(2 + 3, 2)]).unwrap();
        let mut theta = vec![0.0; mlp.param_len()];
        for o in 0..2 {
            for k in 0..3 {
                theta[o * 5 + 2 + k] = s.colour(k)[o];
            }
            theta[10 + o] = offset[o];
        }
        let net = GeneratorNet::new(mlp, theta, 3).unwrap();
        let cfg = ModelConfig::new(3, 2, 2);
        let q = posterior_y(&cfg, &net, &x, &z).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn map_sweep_is_independent_argmax_and_idempotent() {
        let set = synth_scenes(&"k=3,shape=6x6x3,sep=10,n=1,seed=2".parse().unwrap()).unwrap();
        let s = set.truth.clone();
        let x = set.dataset.examples.row(0);
        let mut inf = s.cfg().inference();
        inf.y_mode = YMode::Map;
        inf.steps = 0;
        let mut z = vec![0.1, 0.2];
        let start = LabelMap::uniform(6, 6, 0);
        let once = pixel_gibbs_sweep(&s, x, &mut z, &start, &inf).unwrap();
        assert_eq!(once, s.map_labels(x, &z).unwrap());
        let twice = pixel_gibbs_sweep(&s, x, &mut z, &once, &inf).unwrap();
        assert_eq!(once, twice);
        assert_eq!(pixel_accuracy(&set.maps[0], &once, 3).unwrap(), 1.0);
    }

    #[test]
    fn sweep_is_deterministic() {
        let set = synth_scenes(&"k=3,shape=5x5x3,sep=10,n=1".parse().unwrap()).unwrap();
        let s = scene(3, ImageShape::new(5, 5, 3), 0.5, 7);
        let inf = s.cfg().inference();
        let x = set.dataset.examples.row(0);
        let run = || {
            let mut z = vec![0.0, 1.0];
            let m = pixel_gibbs_sweep(&s, x, &mut z, &LabelMap::uniform(5, 5, 2), &inf).unwrap();
            (z, m)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn posterior_rows_are_distributions() {
        let set = synth_scenes(&"k=4,shape=4x4x3,sep=10,n=1,seed=9".parse().unwrap()).unwrap();
        let s = scene(4, ImageShape::new(4, 4, 3), 0.7, 8);
        let x = set.dataset.examples.row(0);
        for r in 0..4 {
            for c in 0..4 {
                let p = pixel_posterior(&s, x, &[0.5, 0.5], &set.maps[0], r, c).unwrap();
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(pixel_posterior(&s, x, &[0.5, 0.5], &set.maps[0], 4, 0).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let gt = LabelMap::new(2, 2, vec![0, 1, 2, 0], 3).unwrap();
        assert_eq!(pixel_accuracy(&gt, &gt, 3).unwrap(), 1.0);
        let perm = LabelMap::new(2, 2, vec![2, 0, 1, 2], 3).unwrap();
        assert_eq!(pixel_accuracy(&gt, &perm, 3).unwrap(), 1.0);
        let a = LabelMap::new(1, 4, vec![0, 0, 1, 1], 2).unwrap();
        let b = LabelMap::new(1, 4, vec![0, 1, 0, 1], 2).unwrap();
        assert_eq!(pixel_accuracy(&a, &b, 2).unwrap(), 0.5);
        assert!(pixel_accuracy(&a, &LabelMap::uniform(2, 2, 0), 2).is_err());
    }

    #[test]
    fn grad_matches_finite_differences() {
        let set = synth_scenes(&"k=2,shape=3x3x3,sep=10,n=1,seed=4".parse().unwrap()).unwrap();
        let s = scene(2, ImageShape::new(3, 3, 3), 0.3, 10);
        let x = set.dataset.examples.row(0).to_vec();
        let latent = PixelLatent {
            z: vec![0.2, -0.5],
            map: set.maps[0].clone(),
        };
        let mut grad = vec![0.0; s.theta().len()];
        s.accumulate_grad(&x, &latent, &mut grad).unwrap();
        let h = 1e-5;
        for i in 0..grad.len() {
            let mut plus = s.clone();
            plus.theta[i] += h;
            let mut minus = s.clone();
            minus.theta[i] -= h;
            let fd = (plus.evaluate(&x, &latent).unwrap().log_joint
                - minus.evaluate(&x, &latent).unwrap().log_joint)
                / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-8);
            assert!((grad[i] - fd).abs() / denom < 1e-4, "param {i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn label_map_pgm_round_trip() {
        let map = LabelMap::new(2, 3, vec![0, 1, 2, 2, 1, 0], 3).unwrap();
        let img = map.to_pgm(3);
        assert_eq!(img.pixels, vec![0, 128, 255, 255, 128, 0]);
        let bytes = img.encode();
        let back = LabelMap::from_pgm(&PnmImage::decode(&bytes).unwrap(), 3).unwrap();
        assert_eq!(back, map);
        assert_eq!(back.to_pgm(3).encode(), bytes);
        let mut bad = img.clone();
        bad.pixels[0] = 7;
        assert!(LabelMap::from_pgm(&bad, 3).is_err());
    }

    #[test]
    fn scene_checkpoint_round_trip() {
        let s = scene(3, ImageShape::new(4, 5, 3), 0.25, 11);
        let bytes = s.to_checkpoint();
        let back = PixelScene::from_checkpoint(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_checkpoint(), bytes);
        assert!(PixelScene::from_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(PixelScene::from_checkpoint(&bad), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn scene_spec_parsing_and_synthesis() {
        let spec: SceneSpec = "k=3,shape=8x8x3,sep=10,n=4,seed=5".parse().unwrap();
        assert_eq!(spec.to_string().parse::<SceneSpec>().unwrap(), spec);
        assert!("k=3,sep=10".parse::<SceneSpec>().is_err());
        let a = synth_scenes(&spec).unwrap();
        let b = synth_scenes(&spec).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.maps, b.maps);
        for m in &a.maps {
            for k in 0..3 {
                assert!(m.labels().contains(&k));
            }
        }
        for i in 0..3 {
            for j in 0..i {
                let d: f64 = a.truth.colour(i).iter().zip(a.truth.colour(j)).map(|(p, q)| (p - q).powi(2)).sum();
                assert!(d.sqrt() >= 3.0 - 1e-12);
            }
        }
    }
}
