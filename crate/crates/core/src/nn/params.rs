use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }
}

/// Weights and biases of a dense network, input layer first.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<DenseLayer>,
}

/// Per-example or aggregated gradient; same layout as the model.
pub type GradientSet = ModelParams;

impl ModelParams {
    /// Validates that adjacent layers chain.
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("model needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(Error::Shape(format!(
                    "layer {i}: bias length {} != {} outputs",
                    l.bias.len(),
                    l.outputs()
                )));
            }
            if i > 0 && layers[i - 1].outputs() != l.inputs() {
                return Err(Error::Shape(format!(
                    "layer {i} expects {} inputs, previous layer has {} outputs",
                    l.inputs(),
                    layers[i - 1].outputs()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Self {
        let layers = layer_sizes
            .windows(2)
            .map(|w| DenseLayer {
                weights: Matrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.layer_sizes())
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].inputs()];
        sizes.extend(self.layers.iter().map(DenseLayer::outputs));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(<[f64]>::len).sum()
    }

    /// Weight then bias for each layer, in order.
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors().flat_map(|t| t.iter().copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tensors_mut().flat_map(|t| t.iter_mut())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.rows() == b.weights.rows() && a.weights.cols() == b.weights.cols()
            })
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn l2_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.values_mut() {
            *v *= factor;
        }
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for v in out.values_mut() {
            *v = f(*v);
        }
        out
    }
}

/// Fan-in uniform initialization, U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases.
pub fn init_model(layer_sizes: &[usize], seed: u64) -> Result<ModelParams> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(
            "a model needs at least an input and an output size".into(),
        ));
    }
    if let Some(pos) = layer_sizes.iter().position(|&s| s == 0) {
        return Err(Error::Config(format!(
            "layer size at position {pos} must be positive"
        )));
    }
    if *layer_sizes.last().unwrap() != 1 {
        return Err(Error::Config(
            "the output layer must have exactly one unit".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(layer_sizes);
    for layer in &mut params.layers {
        let bound = (6.0 / layer.inputs() as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for w in layer.weights.as_mut_slice() {
            *w = dist.sample(&mut rng);
        }
    }
    Ok(params)
}

// Weights payload: u32 tensor count, then per tensor: u8 rank, u32 dims, f64 values.

pub fn serialize_params(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + params.layers.len() * 16 + params.num_params() * 8);
    write_params(params, &mut out);
    out
}

pub(crate) fn write_params(params: &ModelParams, out: &mut Vec<u8>) {
    out.extend_from_slice(&(2 * params.layers.len() as u32).to_le_bytes());
    for l in &params.layers {
        out.push(2);
        out.extend_from_slice(&(l.outputs() as u32).to_le_bytes());
        out.extend_from_slice(&(l.inputs() as u32).to_le_bytes());
        for v in l.weights.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(1);
        out.extend_from_slice(&(l.outputs() as u32).to_le_bytes());
        for v in &l.bias {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn deserialize_params(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = crate::bytes::Reader::new(bytes);
    let params = read_params(&mut r)?;
    r.finish()?;
    Ok(params)
}

pub(crate) fn read_params(r: &mut crate::bytes::Reader<'_>) -> Result<ModelParams> {
    let count = r.u32()? as usize;
    if count == 0 || !count.is_multiple_of(2) {
        return Err(Error::Decode(format!(
            "tensor count {count} is not a positive even number"
        )));
    }
    let mut layers = Vec::with_capacity(count / 2);
    for i in 0..count / 2 {
        let rank = r.u8()?;
        if rank != 2 {
            return Err(Error::Decode(format!(
                "tensor {}: weight rank {rank}, expected 2",
                2 * i
            )));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Decode("tensor dims overflow".into()))?;
        let weights = Matrix::from_vec(rows, cols, r.f64_vec(n)?);
        let rank = r.u8()?;
        if rank != 1 {
            return Err(Error::Decode(format!(
                "tensor {}: bias rank {rank}, expected 1",
                2 * i + 1
            )));
        }
        let len = r.u32()? as usize;
        let bias = r.f64_vec(len)?;
        layers.push(DenseLayer { weights, bias });
    }
    ModelParams::new(layers).map_err(|e| Error::Decode(e.to_string()))
}
