//! Encoder/decoder multilayer perceptron with hand-written backpropagation.
//!
//! The encoder maps `d_in -> hidden.. -> embed`, the decoder mirrors it back to
//! `d_in`. Hidden layers use the configured activation; the last layer of
//! each path is linear.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Matrix, RngStream};
use crate::wire::{self, FramedHeader};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Relu,
    Tanh,
}

pub const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if pre > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - pre.tanh().powi(2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_in: usize,
    pub hidden: Vec<usize>,
    pub embed: usize,
    pub activation: Activation,
}

impl ModelShape {
    pub fn new(d_in: usize, hidden: usize, embed: usize) -> Self {
        Self {
            d_in,
            hidden: vec![hidden],
            embed,
            activation: Activation::LeakyRelu,
        }
    }

    pub fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.d_in];
        dims.extend(&self.hidden);
        dims.push(self.embed);
        dims
    }

    pub fn decoder_dims(&self) -> Vec<usize> {
        let mut dims = self.encoder_dims();
        dims.reverse();
        dims
    }

    fn layer_dims(&self) -> impl Iterator<Item = (usize, usize)> {
        let enc = self.encoder_dims();
        let dec = self.decoder_dims();
        let pairs: Vec<(usize, usize)> = enc
            .windows(2)
            .chain(dec.windows(2))
            .map(|w| (w[0], w[1]))
            .collect();
        pairs.into_iter()
    }

    /// Total number of scalars in the flattened parameter vector.
    pub fn param_count(&self) -> usize {
        self.layer_dims().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.embed == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidParameter(format!(
                "all layer widths must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Dense layer `y = x·W + b` with `W` stored `fan_in × fan_out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    fn affine(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.weight)?;
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(out)
    }
}

fn flatten_layers<'a>(layers: impl Iterator<Item = &'a Layer>, out: &mut Vec<f64>) {
    for l in layers {
        out.extend_from_slice(l.weight.data());
        out.extend_from_slice(&l.bias);
    }
}

fn layers_from_flat(shape: &ModelShape, flat: &[f64]) -> Result<(Vec<Layer>, Vec<Layer>)> {
    let expected = shape.param_count();
    if flat.len() != expected {
        return Err(Error::Wire(format!(
            "flat parameter length {} does not match shape ({expected})",
            flat.len()
        )));
    }
    let n_enc = shape.encoder_dims().len() - 1;
    let mut offset = 0;
    let mut layers = Vec::new();
    for (fan_in, fan_out) in shape.layer_dims() {
        let w = flat[offset..offset + fan_in * fan_out].to_vec();
        offset += fan_in * fan_out;
        let b = flat[offset..offset + fan_out].to_vec();
        offset += fan_out;
        layers.push(Layer {
            weight: Matrix::from_vec(fan_in, fan_out, w)?,
            bias: b,
        });
    }
    let decoder = layers.split_off(n_enc);
    Ok((layers, decoder))
}

/// Encoder and decoder weights. `version` increments on every update so stale
/// forward traces can be detected; it is not part of equality or the flat form.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpParams {
    pub shape: ModelShape,
    pub encoder: Vec<Layer>,
    pub decoder: Vec<Layer>,
    #[serde(skip)]
    version: u64,
}

impl PartialEq for MlpParams {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.encoder == other.encoder && self.decoder == other.decoder
    }
}

/// Gradient of a scalar loss with respect to every parameter, laid out like
/// [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<Layer>,
    pub decoder: Vec<Layer>,
}

impl Gradients {
    pub fn zeros(shape: &ModelShape) -> Self {
        let (encoder, decoder) =
            layers_from_flat(shape, &vec![0.0; shape.param_count()]).expect("length matches");
        Self { encoder, decoder }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        flatten_layers(self.encoder.iter().chain(&self.decoder), &mut out);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }
}

/// Glorot-uniform weights, zero biases. Layers are drawn in flatten order.
pub fn init_params(shape: &ModelShape, rng: &mut RngStream) -> Result<MlpParams> {
    shape.validate()?;
    let mut layers = Vec::new();
    for (fan_in, fan_out) in shape.layer_dims() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut layer = Layer::zeros(fan_in, fan_out);
        for w in layer.weight.data_mut() {
            *w = rng.random_range(-limit..limit);
        }
        layers.push(layer);
    }
    let decoder = layers.split_off(shape.encoder_dims().len() - 1);
    Ok(MlpParams {
        shape: shape.clone(),
        encoder: layers,
        decoder,
        version: 0,
    })
}

#[derive(Clone, Debug)]
struct LayerCache {
    input: Matrix,
    pre: Matrix,
}

fn forward_path(
    layers: &[Layer],
    activation: Activation,
    x: &Matrix,
    mut cache: Option<&mut Vec<LayerCache>>,
) -> Result<Matrix> {
    let mut h = x.clone();
    let last = layers.len() - 1;
    for (i, layer) in layers.iter().enumerate() {
        if h.cols() != layer.weight.rows() {
            return Err(Error::Shape {
                op: "mlp forward",
                lhs: h.shape(),
                rhs: layer.weight.shape(),
            });
        }
        let pre = layer.affine(&h)?;
        let out = if i == last {
            pre.clone()
        } else {
            pre.map(|v| activation.apply(v))
        };
        if let Some(c) = cache.as_deref_mut() {
            c.push(LayerCache { input: h, pre });
        }
        h = out;
    }
    Ok(h)
}

fn backward_path(
    layers: &[Layer],
    activation: Activation,
    cache: &[LayerCache],
    upstream: &Matrix,
    grads: &mut [Layer],
) -> Result<Matrix> {
    let last = layers.len() - 1;
    let mut delta = upstream.clone();
    for i in (0..layers.len()).rev() {
        let c = &cache[i];
        if i != last {
            for (d, &p) in delta.data_mut().iter_mut().zip(c.pre.data()) {
                *d *= activation.derivative(p);
            }
        }
        let dw = c.input.matmul_tn(&delta)?;
        grads[i].weight.add_assign(&dw)?;
        for r in 0..delta.rows() {
            for (gb, d) in grads[i].bias.iter_mut().zip(delta.row(r)) {
                *gb += d;
            }
        }
        delta = delta.matmul_nt(&layers[i].weight)?;
    }
    Ok(delta)
}

/// Cached activations for one input view passed through encoder and decoder.
#[derive(Clone, Debug)]
pub struct ViewTrace {
    enc: Vec<LayerCache>,
    dec: Vec<LayerCache>,
    pub embedding: Matrix,
    pub reconstruction: Matrix,
}

/// Forward bookkeeping for one or more views under a fixed parameter version.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    version: u64,
    pub views: Vec<ViewTrace>,
}

/// Upstream gradients for one view: `∂L/∂embedding` and `∂L/∂reconstruction`.
#[derive(Clone, Debug)]
pub struct ViewGrads {
    pub embedding: Matrix,
    pub reconstruction: Matrix,
}

impl MlpParams {
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn param_count(&self) -> usize {
        self.shape.param_count()
    }

    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        forward_path(&self.encoder, self.shape.activation, x, None)
    }

    pub fn decode(&self, e: &Matrix) -> Result<Matrix> {
        forward_path(&self.decoder, self.shape.activation, e, None)
    }

    /// Runs every view through encoder and decoder, keeping the caches needed
    /// by [`MlpParams::backward`].
    pub fn forward(&self, inputs: &[&Matrix]) -> Result<ForwardTrace> {
        let act = self.shape.activation;
        let views = inputs
            .iter()
            .map(|x| {
                let mut enc = Vec::with_capacity(self.encoder.len());
                let mut dec = Vec::with_capacity(self.decoder.len());
                let embedding = forward_path(&self.encoder, act, x, Some(&mut enc))?;
                let reconstruction = forward_path(&self.decoder, act, &embedding, Some(&mut dec))?;
                Ok(ViewTrace {
                    enc,
                    dec,
                    embedding,
                    reconstruction,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardTrace {
            version: self.version,
            views,
        })
    }

    /// Exact parameter gradients of a loss whose partials with respect to each
    /// view's embedding and reconstruction are `upstream`.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &[ViewGrads]) -> Result<Gradients> {
        if trace.version != self.version {
            return Err(Error::StaleTrace {
                trace: trace.version,
                params: self.version,
            });
        }
        if trace.views.len() != upstream.len() {
            return Err(Error::InvalidParameter(format!(
                "{} traced views but {} upstream gradients",
                trace.views.len(),
                upstream.len()
            )));
        }
        let act = self.shape.activation;
        let mut grads = Gradients::zeros(&self.shape);
        for (view, up) in trace.views.iter().zip(upstream) {
            if up.reconstruction.shape() != view.reconstruction.shape()
                || up.embedding.shape() != view.embedding.shape()
            {
                return Err(Error::Shape {
                    op: "backward upstream",
                    lhs: up.embedding.shape(),
                    rhs: view.embedding.shape(),
                });
            }
            let mut d_embed =
                backward_path(&self.decoder, act, &view.dec, &up.reconstruction, &mut grads.decoder)?;
            d_embed.add_assign(&up.embedding)?;
            backward_path(&self.encoder, act, &view.enc, &d_embed, &mut grads.encoder)?;
        }
        Ok(grads)
    }

    /// Encoder layers then decoder layers; per layer the row-major weight
    /// followed by the bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        flatten_layers(self.encoder.iter().chain(&self.decoder), &mut out);
        out
    }

    pub fn unflatten(flat: &[f64], shape: &ModelShape) -> Result<MlpParams> {
        shape.validate()?;
        let (encoder, decoder) = layers_from_flat(shape, flat)?;
        Ok(MlpParams {
            shape: shape.clone(),
            encoder,
            decoder,
            version: 0,
        })
    }

    /// Replaces every weight with `flat` (same layout as [`MlpParams::flatten`]).
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let (encoder, decoder) = layers_from_flat(&self.shape, flat)?;
        self.encoder = encoder;
        self.decoder = decoder;
        self.version += 1;
        Ok(())
    }

    /// The frozen encoder used after pretraining; the decoder is discarded.
    pub fn into_encoder(self) -> Encoder {
        Encoder {
            activation: self.shape.activation,
            layers: self.encoder,
        }
    }

    pub fn encoder(&self) -> Encoder {
        self.clone().into_encoder()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            shape: self.shape.clone(),
            count: self.param_count(),
        };
        wire::encode(&header, &self.flatten())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<MlpParams> {
        let (header, flat): (CheckpointHeader, Vec<f64>) = wire::decode(bytes)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Wire(format!("unknown checkpoint format '{}'", header.format)));
        }
        MlpParams::unflatten(&flat, &header.shape)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<MlpParams> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        MlpParams::from_bytes(&bytes)
    }
}

pub const CHECKPOINT_FORMAT: &str = "cfl-mlp-v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    shape: ModelShape,
    count: usize,
}

impl FramedHeader for CheckpointHeader {
    fn count(&self) -> usize {
        self.count
    }
}

/// Encoder half of a trained model, used read-only for probing.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    activation: Activation,
    layers: Vec<Layer>,
}

impl Encoder {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        forward_path(&self.layers, self.activation, x, None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Optimizer state, flat in the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl OptState {
    pub fn adam(param_count: usize, learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
        }
    }

    pub fn sgd(param_count: usize, learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(param_count, learning_rate)
        }
    }

    pub fn new(kind: OptimizerKind, param_count: usize, learning_rate: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Self::adam(param_count, learning_rate),
            OptimizerKind::Sgd => Self::sgd(param_count, learning_rate),
        }
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut MlpParams, grads: &Gradients) -> Result<()> {
        let g = grads.flatten();
        if g.len() != self.first_moment.len() || g.len() != params.param_count() {
            return Err(Error::Shape {
                op: "opt_step",
                lhs: (params.param_count(), 1),
                rhs: (g.len(), 1),
            });
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite gradient at parameter {i} (step {})",
                self.step
            )));
        }
        let mut theta = params.flatten();
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (t, gi) in theta.iter_mut().zip(&g) {
                    *t -= self.learning_rate * gi;
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for i in 0..g.len() {
                    let m = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g[i];
                    let v = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g[i] * g[i];
                    self.first_moment[i] = m;
                    self.second_moment[i] = v;
                    let m_hat = m / c1;
                    let v_hat = v / c2;
                    theta[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                }
            }
        }
        params.load_flat(&theta)
    }
}

pub fn opt_step(params: &MlpParams, grads: &Gradients, opt: &mut OptState) -> Result<MlpParams> {
    let mut next = params.clone();
    opt.step(&mut next, grads)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{Purpose, StreamKey};

    fn rng(seed: u64) -> RngStream {
        RngStream::new(seed, StreamKey::global(Purpose::Init))
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut g = rng(seed);
        Matrix::from_fn(rows, cols, |_, _| g.random_range(-1.0..1.0))
    }

    fn small() -> (ModelShape, MlpParams) {
        let shape = ModelShape::new(5, 7, 3);
        let p = init_params(&shape, &mut rng(1)).unwrap();
        (shape, p)
    }

    /// Per-neuron scalar forward pass, independent of the matrix path.
    fn scalar_path(layers: &[Layer], act: Activation, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, l) in layers.iter().enumerate() {
            let mut next = vec![0.0; l.weight.cols()];
            for (j, out) in next.iter_mut().enumerate() {
                let mut s = l.bias[j];
                for (k, hk) in h.iter().enumerate() {
                    s += hk * l.weight.get(k, j);
                }
                *out = if i + 1 == layers.len() {
                    s
                } else {
                    match act {
                        Activation::LeakyRelu => {
                            if s > 0.0 {
                                s
                            } else {
                                0.01 * s
                            }
                        }
                        Activation::Relu => s.max(0.0),
                        Activation::Tanh => s.tanh(),
                    }
                };
            }
            h = next;
        }
        h
    }

    #[test]
    fn init_biases_zero_and_deterministic() {
        let (shape, p) = small();
        assert!(p.encoder.iter().chain(&p.decoder).all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert_eq!(p, init_params(&shape, &mut rng(1)).unwrap());
        assert_ne!(p, init_params(&shape, &mut rng(2)).unwrap());
    }

    #[test]
    fn init_weight_spread_matches_uniform() {
        let shape = ModelShape::new(256, 256, 256);
        let p = init_params(&shape, &mut rng(3)).unwrap();
        let w = p.encoder[1].weight.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let limit = (6.0f64 / 512.0).sqrt();
        let expected = limit / 3f64.sqrt();
        assert!((sd - expected).abs() < 0.1 * expected, "{sd} vs {expected}");
        assert!(w.iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn zero_net_gives_zero_output() {
        let (shape, _) = small();
        let p = MlpParams::unflatten(&vec![0.0; shape.param_count()], &shape).unwrap();
        let x = random_input(4, 5, 4);
        assert_eq!(p.encode(&x).unwrap(), Matrix::zeros(4, 3));
        assert_eq!(p.decode(&Matrix::zeros(4, 3)).unwrap(), Matrix::zeros(4, 5));
    }

    #[test]
    fn batch_of_one_matches_batched_row() {
        let (_, p) = small();
        let x = random_input(6, 5, 5);
        let batched = p.encode(&x).unwrap();
        for r in 0..6 {
            let single = p.encode(&x.select_rows(&[r])).unwrap();
            assert_eq!(single.row(0), batched.row(r));
        }
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        for act in [Activation::LeakyRelu, Activation::Relu, Activation::Tanh] {
            let shape = ModelShape {
                d_in: 6,
                hidden: vec![9, 4],
                embed: 5,
                activation: act,
            };
            let p = init_params(&shape, &mut rng(6)).unwrap();
            let x = random_input(3, 6, 7);
            let e = p.encode(&x).unwrap();
            let d = p.decode(&e).unwrap();
            for r in 0..3 {
                let oe = scalar_path(&p.encoder, act, x.row(r));
                let od = scalar_path(&p.decoder, act, &oe);
                for (a, b) in e.row(r).iter().zip(&oe) {
                    assert!((a - b).abs() < 1e-12);
                }
                for (a, b) in d.row(r).iter().zip(&od) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (_, p) = small();
        assert!(matches!(p.encode(&Matrix::zeros(2, 4)), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let (shape, p) = small();
        let x = random_input(4, 5, 8);
        let trace = p.forward(&[&x]).unwrap();
        let up = ViewGrads {
            embedding: Matrix::zeros(4, 3),
            reconstruction: Matrix::zeros(4, 5),
        };
        let g = p.backward(&trace, &[up]).unwrap();
        assert_eq!(g, Gradients::zeros(&shape));
    }

    /// Central differences of `L = Σ a⊙embed + Σ b⊙recon` over every parameter.
    #[test]
    fn backward_matches_finite_differences() {
        let shape = ModelShape {
            d_in: 4,
            hidden: vec![6],
            embed: 3,
            activation: Activation::Tanh,
        };
        let p = init_params(&shape, &mut rng(9)).unwrap();
        let x = random_input(5, 4, 10);
        let a = random_input(5, 3, 11);
        let b = random_input(5, 4, 12);
        let loss = |q: &MlpParams| -> f64 {
            let e = q.encode(&x).unwrap();
            let d = q.decode(&e).unwrap();
            e.data().iter().zip(a.data()).map(|(u, v)| u * v).sum::<f64>()
                + d.data().iter().zip(b.data()).map(|(u, v)| u * v).sum::<f64>()
        };
        let trace = p.forward(&[&x]).unwrap();
        let g = p
            .backward(
                &trace,
                &[ViewGrads {
                    embedding: a.clone(),
                    reconstruction: b.clone(),
                }],
            )
            .unwrap()
            .flatten();
        let theta = p.flatten();
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut plus = theta.clone();
            plus[i] += h;
            let mut minus = theta.clone();
            minus[i] -= h;
            let fd = (loss(&MlpParams::unflatten(&plus, &shape).unwrap())
                - loss(&MlpParams::unflatten(&minus, &shape).unwrap()))
                / (2.0 * h);
            let denom = g[i].abs().max(fd.abs()).max(1e-6);
            assert!((g[i] - fd).abs() / denom < 1e-6, "param {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn stale_trace_rejected() {
        let (shape, p) = small();
        let x = random_input(2, 5, 13);
        let trace = p.forward(&[&x]).unwrap();
        let mut q = p.clone();
        let mut opt = OptState::adam(shape.param_count(), 1e-3);
        let mut g = Gradients::zeros(&shape);
        g.encoder[0].bias[0] = 1.0;
        opt.step(&mut q, &g).unwrap();
        let up = ViewGrads {
            embedding: Matrix::zeros(2, 3),
            reconstruction: Matrix::zeros(2, 5),
        };
        assert!(matches!(q.backward(&trace, &[up]), Err(Error::StaleTrace { .. })));
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let (shape, p) = small();
        let mut opt = OptState::adam(shape.param_count(), 1e-2);
        let q = opt_step(&p, &Gradients::zeros(&shape), &mut opt).unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let (shape, p) = small();
        let mut g = Gradients::zeros(&shape);
        g.encoder[0].weight.set(0, 0, 0.37);
        g.decoder[1].bias[2] = -2.5e-3;
        let lr = 1e-2;
        let mut opt = OptState::adam(shape.param_count(), lr);
        let q = opt_step(&p, &g, &mut opt).unwrap();
        // m̂ = g, v̂ = g², so Δ = -lr · g / (|g| + ε)
        let expect = |gv: f64| -lr * gv / (gv.abs() + 1e-8);
        let d0 = q.encoder[0].weight.get(0, 0) - p.encoder[0].weight.get(0, 0);
        assert!((d0 - expect(0.37)).abs() < 1e-15);
        let d1 = q.decoder[1].bias[2] - p.decoder[1].bias[2];
        assert!((d1 - expect(-2.5e-3)).abs() < 1e-15);
        assert!((d0.abs() - lr).abs() < 1e-6);
    }

    #[test]
    fn adam_is_stateful() {
        let (shape, p) = small();
        let mut g = Gradients::zeros(&shape);
        g.encoder[0].weight.set(1, 1, 0.5);
        let mut opt = OptState::adam(shape.param_count(), 1e-2);
        let twice = opt_step(&opt_step(&p, &g, &mut opt).unwrap(), &g, &mut opt).unwrap();
        let mut g2 = g.clone();
        g2.encoder[0].weight.set(1, 1, 1.0);
        let mut fresh = OptState::adam(shape.param_count(), 1e-2);
        let once = opt_step(&p, &g2, &mut fresh).unwrap();
        assert_ne!(twice, once);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let (shape, p) = small();
        let mut g = Gradients::zeros(&shape);
        g.decoder[0].weight.set(0, 0, f64::NAN);
        let mut opt = OptState::adam(shape.param_count(), 1e-3);
        assert!(matches!(opt_step(&p, &g, &mut opt), Err(Error::Divergence(_))));
    }

    #[test]
    fn sgd_step() {
        let (shape, p) = small();
        let mut g = Gradients::zeros(&shape);
        g.encoder[1].bias[0] = 2.0;
        let mut opt = OptState::sgd(shape.param_count(), 0.1);
        let q = opt_step(&p, &g, &mut opt).unwrap();
        assert!((q.encoder[1].bias[0] - (p.encoder[1].bias[0] - 0.2)).abs() < 1e-15);
    }

    #[test]
    fn flatten_round_trip_and_layout() {
        let (shape, p) = small();
        let flat = p.flatten();
        assert_eq!(flat.len(), shape.param_count());
        // 5*7+7 + 7*3+3 + 3*7+7 + 7*5+5
        assert_eq!(flat.len(), 42 + 24 + 28 + 40);
        let back = MlpParams::unflatten(&flat, &shape).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   flat.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        // first weight row-major, then bias of the first encoder layer
        assert_eq!(flat[1], p.encoder[0].weight.get(0, 1));
        assert_eq!(flat[35], p.encoder[0].bias[0]);
        assert!(MlpParams::unflatten(&flat[1..], &shape).is_err());
        let other = init_params(&shape, &mut rng(77)).unwrap();
        assert_eq!(other.flatten().len(), flat.len());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (_, p) = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        p.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + header_len]).unwrap();
        assert_eq!(header["count"], p.param_count());
        assert_eq!(bytes.len(), 8 + header_len + 8 * p.param_count());
        let first = f64::from_le_bytes(bytes[8 + header_len..16 + header_len].try_into().unwrap());
        assert_eq!(first, p.flatten()[0]);
        assert_eq!(MlpParams::load(&path).unwrap(), p);
        assert!(MlpParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn encoder_drops_decoder() {
        let (_, p) = small();
        let x = random_input(3, 5, 14);
        let enc = p.encoder();
        assert_eq!((enc.input_dim(), enc.output_dim()), (5, 3));
        assert_eq!(enc.encode(&x).unwrap(), p.encode(&x).unwrap());
    }
}
