//! Dense feed-forward networks with sinusoidal positional encoding and
//! hand-written reverse-mode gradients.
//!
//! Batches are stored column-wise: a batch of `n` inputs of width `d` is a
//! `d × n` matrix. Every layer computes `z = W x + b` followed by an
//! element-wise activation.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Sinusoidal encoding of a coordinate vector over `degree` octaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PosEncConfig {
    pub degree: usize,
    pub input_dim: usize,
}

impl PosEncConfig {
    pub fn new(degree: usize, input_dim: usize) -> Result<Self> {
        if degree == 0 || input_dim == 0 {
            return Err(Error::InvalidInput(format!(
                "positional encoding needs degree >= 1 and input_dim >= 1, got L={degree}, d={input_dim}"
            )));
        }
        Ok(Self { degree, input_dim })
    }

    pub fn encoded_dim(&self) -> usize {
        2 * self.degree * self.input_dim
    }

    /// Writes `(sin(2^k π p_d), cos(2^k π p_d))` for every dimension `d` and
    /// octave `k` into `out`.
    fn encode_into(&self, p: &[f64], out: &mut [f64]) {
        let mut i = 0;
        for &pd in p {
            let mut freq = PI;
            for _ in 0..self.degree {
                let (s, c) = (freq * pd).sin_cos();
                out[i] = s;
                out[i + 1] = c;
                i += 2;
                freq *= 2.0;
            }
        }
    }

    fn check(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "positional encoding expects {} coordinates, got {}",
                self.input_dim,
                p.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("coordinate {p:?}")));
        }
        Ok(())
    }

    pub fn encode(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.check(p)?;
        let mut out = vec![0.0; self.encoded_dim()];
        self.encode_into(p, &mut out);
        Ok(out)
    }

    /// Encodes a list of points into an `encoded_dim × n` batch.
    pub fn encode_batch<P: AsRef<[f64]>>(&self, points: &[P]) -> Result<DMatrix<f64>> {
        let rows = self.encoded_dim();
        let mut m = DMatrix::zeros(rows, points.len());
        // column-major storage: column j is one contiguous run
        for (col, p) in m.as_mut_slice().chunks_mut(rows).zip(points) {
            let p = p.as_ref();
            self.check(p)?;
            self.encode_into(p, col);
        }
        Ok(m)
    }
}

/// Sinusoidal encoding of a single point; see [`PosEncConfig`].
pub fn posenc(p: &[f64], cfg: &PosEncConfig) -> Result<Vec<f64>> {
    cfg.encode(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Sine,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Sine => z.sin(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sine => z.cos(),
            Activation::Identity => 1.0,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Sine => 2,
            Activation::Identity => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Tanh,
            1 => Activation::Relu,
            2 => Activation::Sine,
            3 => Activation::Identity,
            _ => return None,
        })
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "sine" => Ok(Activation::Sine),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidInput(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Layer sizes and activations of a network, `sizes.len() == activations.len() + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub sizes: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl NetworkSpec {
    /// `hidden` layers of width `width` with `act`, then a linear output layer.
    pub fn mlp(input: usize, width: usize, hidden: usize, output: usize, act: Activation) -> Self {
        let mut sizes = vec![input];
        let mut activations = Vec::new();
        for _ in 0..hidden {
            sizes.push(width);
            activations.push(act);
        }
        sizes.push(output);
        activations.push(Activation::Identity);
        Self { sizes, activations }
    }
}

/// Weights and biases of a feed-forward network. Also used to hold gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<Layer>,
}

/// Cached inputs and pre-activations of one batched forward pass.
#[derive(Debug, Clone)]
pub struct GradientTape {
    inputs: Vec<DMatrix<f64>>,
    preacts: Vec<DMatrix<f64>>,
    outputs: Vec<DMatrix<f64>>,
}

impl GradientTape {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |m| m.ncols())
    }
}

impl NetworkParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::Shape(format!(
                    "layer {k}: bias length {} != out dim {}",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {k} parameters")));
            }
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {k} out dim {} does not chain into layer {} in dim {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        if spec.sizes.len() < 2 || spec.activations.len() + 1 != spec.sizes.len() {
            return Err(Error::Shape(format!(
                "network spec needs len(sizes) = len(activations) + 1 >= 2, got {} sizes and {} activations",
                spec.sizes.len(),
                spec.activations.len()
            )));
        }
        if spec.sizes.contains(&0) {
            return Err(Error::Shape("layer sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .sizes
            .windows(2)
            .zip(&spec.activations)
            .map(|(io, &activation)| {
                let (fan_in, fan_out) = (io[0], io[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-a..=a));
                Layer {
                    weight,
                    bias: DVector::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: DMatrix::zeros(l.out_dim(), l.in_dim()),
                    bias: DVector::zeros(l.out_dim()),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn spec(&self) -> NetworkSpec {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(Layer::out_dim));
        NetworkSpec {
            sizes,
            activations: self.layers.iter().map(|l| l.activation).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Appends weights (column-major) then bias of every layer.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
    }

    /// Reads parameters in [`write_flat`](Self::write_flat) order, returning the rest of `src`.
    pub fn read_flat<'a>(&mut self, mut src: &'a [f64]) -> Result<&'a [f64]> {
        if src.len() < self.num_params() {
            return Err(Error::Shape(format!(
                "flat parameter vector too short: {} < {}",
                src.len(),
                self.num_params()
            )));
        }
        for l in &mut self.layers {
            let (w, rest) = src.split_at(l.weight.len());
            l.weight.as_mut_slice().copy_from_slice(w);
            let (b, rest) = rest.split_at(l.bias.len());
            l.bias.as_mut_slice().copy_from_slice(b);
            src = rest;
        }
        Ok(src)
    }

    pub fn add_assign(&mut self, other: &NetworkParams) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    /// Batched forward pass over the columns of `x`.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, GradientTape)> {
        if x.nrows() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network input dim {} but batch has {} rows",
                self.input_dim(),
                x.nrows()
            )));
        }
        let n = x.ncols();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for l in &self.layers {
            let mut z = &l.weight * &a;
            for j in 0..n {
                let mut col = z.column_mut(j);
                col += &l.bias;
            }
            let y = z.map(|v| l.activation.apply(v));
            inputs.push(a);
            preacts.push(z);
            a = y.clone();
            outputs.push(y);
        }
        Ok((a, GradientTape { inputs, preacts, outputs }))
    }

    /// Reverse pass of `Σ ⟨dy, y⟩` over the taped batch. Returns parameter
    /// gradients (summed over the batch) and the input gradient per column.
    pub fn backward_batch(
        &self,
        tape: &GradientTape,
        dy: &DMatrix<f64>,
    ) -> Result<(NetworkParams, DMatrix<f64>)> {
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "tape has {} layers, network has {}",
                tape.inputs.len(),
                self.layers.len()
            )));
        }
        for (k, (l, inp)) in self.layers.iter().zip(&tape.inputs).enumerate() {
            if inp.nrows() != l.in_dim() {
                return Err(Error::Shape(format!(
                    "tape layer {k} input width {} != layer in dim {}",
                    inp.nrows(),
                    l.in_dim()
                )));
            }
        }
        if dy.nrows() != self.output_dim() || dy.ncols() != tape.batch_size() {
            return Err(Error::Shape(format!(
                "output gradient is {}×{}, expected {}×{}",
                dy.nrows(),
                dy.ncols(),
                self.output_dim(),
                tape.batch_size()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = dy.clone();
        for (k, l) in self.layers.iter().enumerate().rev() {
            let z = &tape.preacts[k];
            let y = &tape.outputs[k];
            if l.activation != Activation::Identity {
                for ((d, &zv), &yv) in delta.iter_mut().zip(z.iter()).zip(y.iter()) {
                    *d *= l.activation.derivative(zv, yv);
                }
            }
            let gw = &delta * tape.inputs[k].transpose();
            let gb = DVector::from_iterator(l.out_dim(), delta.row_iter().map(|r| r.sum()));
            grads.push(Layer {
                weight: gw,
                bias: gb,
                activation: l.activation,
            });
            delta = l.weight.transpose() * &delta;
        }
        grads.reverse();
        Ok((NetworkParams { layers: grads }, delta))
    }

    /// Single-input forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, GradientTape)> {
        let xm = DMatrix::from_column_slice(x.len(), 1, x);
        let (y, tape) = self.forward_batch(&xm)?;
        Ok((y.as_slice().to_vec(), tape))
    }

    /// Single-output reverse pass; returns parameter gradients and `dx`.
    pub fn backward(&self, tape: &GradientTape, dy: &[f64]) -> Result<(NetworkParams, Vec<f64>)> {
        let dym = DMatrix::from_column_slice(dy.len(), 1, dy);
        let (g, dx) = self.backward_batch(tape, &dym)?;
        Ok((g, dx.as_slice().to_vec()))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}
