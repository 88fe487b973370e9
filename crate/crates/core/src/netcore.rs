//! Dense feedforward engine for the generator.
//!
//! [`Mlp`] describes a chain of affine and elementwise layers and evaluates it
//! against an externally owned parameter slice, so several models can reuse the
//! same engine. [`GeneratorNet`] binds an `Mlp` to its parameters and to the
//! latent layout `[z ; one-hot(y)]`.
//!
//! Parameters of an affine layer are stored row-major (`out_dim x in_dim`
//! weights) followed by `out_dim` biases, layers concatenated in order.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
            Activation::Sigmoid => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Relu),
            3 => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "identity" | "linear" => Some(Activation::Identity),
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        }
    }

    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        }
    }

    /// Derivative expressed through the layer input and output.
    #[inline]
    fn derivative(self, input: f64, output: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - output * output,
            Activation::Relu => {
                if input > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => output * (1.0 - output),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Affine,
    Nonlinearity,
}

impl LayerKind {
    pub fn code(self) -> u32 {
        match self {
            LayerKind::Affine => 0,
            LayerKind::Nonlinearity => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(LayerKind::Affine),
            1 => Some(LayerKind::Nonlinearity),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn affine(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Affine,
            in_dim,
            out_dim,
            activation: Activation::Identity,
        }
    }

    pub fn nonlinearity(dim: usize, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Nonlinearity,
            in_dim: dim,
            out_dim: dim,
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Affine => self.in_dim * self.out_dim + self.out_dim,
            LayerKind::Nonlinearity => 0,
        }
    }
}

/// Minimal dense tensor: a shape plus row-major data.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::input(format!("tensor shape {shape:?} has a zero extent")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::input(format!(
                "tensor shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("tensor contains non-finite values"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Activation buffers for one forward/backward pass.
#[derive(Clone, Debug)]
pub struct Workspace {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl Workspace {
    pub fn input_mut(&mut self) -> &mut [f64] {
        &mut self.acts[0]
    }

    pub fn input(&self) -> &[f64] {
        &self.acts[0]
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("workspace has at least the input buffer")
    }

    /// Input gradient left by the last [`Mlp::backward`].
    pub fn input_grad(&self) -> &[f64] {
        &self.delta[..self.acts[0].len()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    param_len: usize,
}

impl Mlp {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut param_len = 0;
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_dim == 0 || layer.out_dim == 0 {
                return Err(Error::config(format!("layer {i} has a zero dimension")));
            }
            if layer.kind == LayerKind::Nonlinearity && layer.in_dim != layer.out_dim {
                return Err(Error::Shape {
                    layer: i,
                    expected: layer.in_dim,
                    got: layer.out_dim,
                });
            }
            if i > 0 && layers[i - 1].out_dim != layer.in_dim {
                return Err(Error::Shape {
                    layer: i,
                    expected: layers[i - 1].out_dim,
                    got: layer.in_dim,
                });
            }
            offsets.push(param_len);
            param_len += layer.param_count();
        }
        Ok(Mlp {
            layers,
            offsets,
            param_len,
        })
    }

    /// Affine layers of the given widths with `hidden` activations between them
    /// and `output` after the last one (omitted when identity).
    pub fn dense(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &width in hidden {
            layers.push(LayerSpec::affine(prev, width));
            if hidden_activation != Activation::Identity {
                layers.push(LayerSpec::nonlinearity(width, hidden_activation));
            }
            prev = width;
        }
        layers.push(LayerSpec::affine(prev, output_dim));
        if output_activation != Activation::Identity {
            layers.push(LayerSpec::nonlinearity(output_dim, output_activation));
        }
        Mlp::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_len(&self) -> usize {
        self.param_len
    }

    /// Offset of layer `i`'s parameters inside θ.
    pub fn param_offset(&self, layer: usize) -> usize {
        self.offsets[layer]
    }

    /// Weights uniform on `[-s, s]`, `s = sqrt(6 / (in + out))`; biases zero.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut theta = vec![0.0; self.param_len];
        for (layer, &off) in self.layers.iter().zip(&self.offsets) {
            if layer.kind != LayerKind::Affine {
                continue;
            }
            let scale = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            let weights = &mut theta[off..off + layer.in_dim * layer.out_dim];
            for w in weights {
                *w = rng.random_range(-scale..=scale);
            }
        }
        theta
    }

    pub fn workspace(&self) -> Workspace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(vec![0.0; self.input_dim()]);
        for layer in &self.layers {
            acts.push(vec![0.0; layer.out_dim]);
        }
        let widest = self
            .layers
            .iter()
            .map(|l| l.in_dim.max(l.out_dim))
            .max()
            .unwrap_or(0);
        Workspace {
            acts,
            delta: vec![0.0; widest],
            delta_next: vec![0.0; widest],
        }
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_len {
            return Err(Error::config(format!(
                "parameter vector has {} entries, network needs {}",
                theta.len(),
                self.param_len
            )));
        }
        Ok(())
    }

    pub fn forward<'w>(
        &self,
        theta: &[f64],
        input: &[f64],
        ws: &'w mut Workspace,
    ) -> Result<&'w [f64]> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape {
                layer: 0,
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        ws.input_mut().copy_from_slice(input);
        self.forward_ws(theta, ws)?;
        Ok(ws.output())
    }

    /// Runs the chain on whatever is already in `ws.input_mut()`.
    pub fn forward_ws(&self, theta: &[f64], ws: &mut Workspace) -> Result<()> {
        self.check_theta(theta)?;
        for (i, layer) in self.layers.iter().enumerate() {
            let (before, after) = ws.acts.split_at_mut(i + 1);
            let input = &before[i];
            let out = &mut after[0];
            match layer.kind {
                LayerKind::Affine => {
                    let off = self.offsets[i];
                    let n_in = layer.in_dim;
                    let weights = &theta[off..off + n_in * layer.out_dim];
                    let bias = &theta[off + n_in * layer.out_dim..off + layer.param_count()];
                    for ((o, row), b) in out.iter_mut().zip(weights.chunks_exact(n_in)).zip(bias) {
                        *o = b + dot(row, input);
                    }
                }
                LayerKind::Nonlinearity => {
                    let act = layer.activation;
                    for (o, &v) in out.iter_mut().zip(input.iter()) {
                        *o = act.apply(v);
                    }
                }
            }
        }
        Ok(())
    }

    /// Reverse pass for `dot(upstream, output)` after a `forward` on `ws`.
    ///
    /// Parameter gradients are *added* into `grad_theta` when given; the input
    /// gradient is left in [`Workspace::input_grad`].
    pub fn backward(
        &self,
        theta: &[f64],
        ws: &mut Workspace,
        upstream: &[f64],
        mut grad_theta: Option<&mut [f64]>,
    ) -> Result<()> {
        self.check_theta(theta)?;
        let last = self.layers.len() - 1;
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape {
                layer: last,
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        if let Some(g) = grad_theta.as_deref() {
            if g.len() != self.param_len {
                return Err(Error::config(format!(
                    "gradient buffer has {} entries, network needs {}",
                    g.len(),
                    self.param_len
                )));
            }
        }

        let Workspace {
            acts,
            delta,
            delta_next,
        } = ws;
        delta[..upstream.len()].copy_from_slice(upstream);

        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &acts[i];
            let output = &acts[i + 1];
            let d_out = &delta[..layer.out_dim];
            let d_in = &mut delta_next[..layer.in_dim];
            match layer.kind {
                LayerKind::Affine => {
                    let off = self.offsets[i];
                    let n_in = layer.in_dim;
                    let n_w = n_in * layer.out_dim;
                    let weights = &theta[off..off + n_w];
                    if let Some(g) = grad_theta.as_deref_mut() {
                        let (gw, gb) = g[off..off + n_w + layer.out_dim].split_at_mut(n_w);
                        for ((grow, &d), gb) in gw.chunks_exact_mut(n_in).zip(d_out).zip(gb) {
                            *gb += d;
                            if d != 0.0 {
                                axpy(d, input, grow);
                            }
                        }
                    }
                    d_in.fill(0.0);
                    for (row, &d) in weights.chunks_exact(n_in).zip(d_out) {
                        if d != 0.0 {
                            axpy(d, row, d_in);
                        }
                    }
                }
                LayerKind::Nonlinearity => {
                    let act = layer.activation;
                    for (((di, &d), &x), &y) in
                        d_in.iter_mut().zip(d_out).zip(input.iter()).zip(output.iter())
                    {
                        *di = d * act.derivative(x, y);
                    }
                }
            }
            std::mem::swap(delta, delta_next);
        }
        Ok(())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Hidden widths and activations for a dense generator.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            hidden: vec![64, 64],
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Identity,
        }
    }
}

/// The generator `G(z, y)`: an [`Mlp`] fed with `[z ; one-hot(y)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet {
    mlp: Mlp,
    theta: Vec<f64>,
    latent_dim: usize,
    clusters: usize,
}

impl GeneratorNet {
    pub fn new(mlp: Mlp, theta: Vec<f64>, clusters: usize) -> Result<Self> {
        if clusters == 0 {
            return Err(Error::config("generator needs at least one cluster"));
        }
        if mlp.input_dim() < clusters {
            return Err(Error::config(format!(
                "network input width {} is narrower than the {clusters}-way one-hot",
                mlp.input_dim()
            )));
        }
        mlp.check_theta(&theta)?;
        let latent_dim = mlp.input_dim() - clusters;
        Ok(GeneratorNet {
            mlp,
            theta,
            latent_dim,
            clusters,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        arch: &Architecture,
        latent_dim: usize,
        clusters: usize,
        data_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mlp = Mlp::dense(
            latent_dim + clusters,
            &arch.hidden,
            data_dim,
            arch.hidden_activation,
            arch.output_activation,
        )?;
        let theta = mlp.init_params(rng);
        GeneratorNet::new(mlp, theta, clusters)
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn data_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn workspace(&self) -> Workspace {
        self.mlp.workspace()
    }

    /// `G(z, y)` for a one-hot `y`.
    pub fn forward(&self, z: &[f64], y_onehot: &[f64]) -> Result<Tensor> {
        let y = self.onehot_index(y_onehot)?;
        let mut ws = self.workspace();
        let out = self.eval(z, y, &mut ws)?;
        Tensor::vector(out.to_vec())
    }

    /// Reverse-mode gradients of `dot(upstream, G(z, y))` with respect to θ and z.
    pub fn backward(
        &self,
        z: &[f64],
        y_onehot: &[f64],
        upstream: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let y = self.onehot_index(y_onehot)?;
        let mut ws = self.workspace();
        self.eval(z, y, &mut ws)?;
        let mut grad_theta = vec![0.0; self.mlp.param_len()];
        let mut grad_z = vec![0.0; self.latent_dim];
        self.backprop(&mut ws, upstream, Some(&mut grad_theta), &mut grad_z)?;
        Ok((grad_theta, grad_z))
    }

    /// Forward pass with the cluster given as an index.
    pub fn eval<'w>(&self, z: &[f64], y: usize, ws: &'w mut Workspace) -> Result<&'w [f64]> {
        if z.len() != self.latent_dim {
            return Err(Error::Shape {
                layer: 0,
                expected: self.latent_dim,
                got: z.len(),
            });
        }
        if y >= self.clusters {
            return Err(Error::input(format!(
                "cluster index {y} out of range for {} clusters",
                self.clusters
            )));
        }
        let input = ws.input_mut();
        input[..self.latent_dim].copy_from_slice(z);
        let onehot = &mut input[self.latent_dim..];
        onehot.fill(0.0);
        onehot[y] = 1.0;
        self.mlp.forward_ws(&self.theta, ws)?;
        Ok(ws.output())
    }

    /// Backward pass following [`GeneratorNet::eval`] on the same workspace.
    /// `grad_theta` is accumulated into; `grad_z` is overwritten.
    pub fn backprop(
        &self,
        ws: &mut Workspace,
        upstream: &[f64],
        grad_theta: Option<&mut [f64]>,
        grad_z: &mut [f64],
    ) -> Result<()> {
        if grad_z.len() != self.latent_dim {
            return Err(Error::Shape {
                layer: 0,
                expected: self.latent_dim,
                got: grad_z.len(),
            });
        }
        self.mlp.backward(&self.theta, ws, upstream, grad_theta)?;
        grad_z.copy_from_slice(&ws.input_grad()[..self.latent_dim]);
        Ok(())
    }

    fn onehot_index(&self, y_onehot: &[f64]) -> Result<usize> {
        if y_onehot.len() != self.clusters {
            return Err(Error::Shape {
                layer: 0,
                expected: self.clusters,
                got: y_onehot.len(),
            });
        }
        let mut hot = None;
        for (i, &v) in y_onehot.iter().enumerate() {
            if v == 1.0 {
                if hot.is_some() {
                    return Err(Error::input("one-hot vector has more than one 1"));
                }
                hot = Some(i);
            } else if v != 0.0 {
                return Err(Error::input("one-hot vector has entries outside {0, 1}"));
            }
        }
        hot.ok_or_else(|| Error::input("one-hot vector has no 1"))
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        encode_checkpoint(&self.mlp, &self.theta)
    }

    pub fn from_checkpoint(bytes: &[u8], clusters: usize) -> Result<Self> {
        let (mlp, theta) = decode_checkpoint(bytes)?;
        GeneratorNet::new(mlp, theta, clusters)
    }
}

pub fn onehot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CLG1";

/// `CLG1`, u32 layer count, per layer `(kind, in, out, activation)` as u32,
/// then θ as f64, all little-endian.
pub fn encode_checkpoint(mlp: &Mlp, theta: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + mlp.layers.len() * 16 + theta.len() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(mlp.layers.len() as u32).to_le_bytes());
    for layer in &mlp.layers {
        for field in [
            layer.kind.code(),
            layer.in_dim as u32,
            layer.out_dim as u32,
            layer.activation.code(),
        ] {
            out.extend_from_slice(&field.to_le_bytes());
        }
    }
    for v in theta {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Mlp, Vec<f64>)> {
    let mut cur = ByteCursor::new(bytes);
    let magic = cur.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::parse(0, "bad checkpoint magic, expected CLG1"));
    }
    let count = cur.u32_le()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = cur.pos();
        let kind = cur.u32_le()?;
        let in_dim = cur.u32_le()? as usize;
        let out_dim = cur.u32_le()? as usize;
        let act = cur.u32_le()?;
        let kind = LayerKind::from_code(kind)
            .ok_or_else(|| Error::parse(at, format!("unknown layer kind {kind}")))?;
        let activation = Activation::from_code(act)
            .ok_or_else(|| Error::parse(at + 12, format!("unknown activation {act}")))?;
        layers.push(LayerSpec {
            kind,
            in_dim,
            out_dim,
            activation,
        });
    }
    let at = cur.pos();
    let mlp = Mlp::new(layers).map_err(|e| Error::parse(at, e.to_string()))?;
    let mut theta = Vec::with_capacity(mlp.param_len());
    for _ in 0..mlp.param_len() {
        theta.push(cur.f64_le()?);
    }
    cur.finish()?;
    Ok((mlp, theta))
}

/// Little-endian reader that reports the failing offset.
pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteCursor { bytes, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::parse(
                self.pos,
                format!(
                    "truncated: needed {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    pub(crate) fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64_le(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64_le(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::parse(
                self.pos,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}
