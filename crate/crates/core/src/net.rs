//! Dense feed-forward networks with hand-written reverse passes.
//!
//! Parameters live in one flat vector, layer-major: for each layer the
//! weight matrix (row-major, `out × in`) followed by its bias vector.
//! All passes are generic over [`Scalar`] so the same code path yields
//! values, gradients and (with [`crate::scalar::Dual`]) second-order products.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PredictionMatrix;
use crate::error::{validation, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
    /// Non-negative outputs.
    Softplus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub output_activation: OutputActivation,
}

impl NetworkSpec {
    /// Multi-head response model: `M` revenue heads followed by `M` cost heads.
    pub fn response_model(
        input_dim: usize,
        hidden_layers: Vec<usize>,
        num_treatments: usize,
        activation: Activation,
        output_activation: OutputActivation,
    ) -> Self {
        Self {
            input_dim,
            hidden_layers,
            output_dim: 2 * num_treatments,
            activation,
            output_activation,
        }
    }

    /// Gate model over `features ⊕ one_hot(treatment)` with two sigmoid heads.
    pub fn bridge(
        feature_dim: usize,
        num_treatments: usize,
        hidden_layers: Vec<usize>,
        activation: Activation,
    ) -> Self {
        Self {
            input_dim: feature_dim + num_treatments,
            hidden_layers,
            output_dim: 2,
            activation,
            output_activation: OutputActivation::Sigmoid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(validation(
                "network input and output widths must be positive",
            ));
        }
        if self.hidden_layers.iter().any(|&h| h == 0) {
            return Err(validation("hidden layer sizes must be at least 1"));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.hidden_layers.iter().copied())
            .chain(std::iter::once(self.output_dim))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    weight_offset: usize,
    bias_offset: usize,
    act_offset: usize,
}

/// A multilayer perceptron with a fixed shape; parameters are passed in.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    num_params: usize,
    tape_len: usize,
}

/// Per-sample pre- and post-activation values recorded by the forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    values: Vec<T>,
}

impl Mlp {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let mut layers = Vec::with_capacity(widths.len() - 1);
        let mut offset = 0;
        let mut act_offset = 0;
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            layers.push(Layer {
                fan_in,
                fan_out,
                weight_offset: offset,
                bias_offset: offset + fan_in * fan_out,
                act_offset,
            });
            offset += fan_in * fan_out + fan_out;
            act_offset += fan_out;
        }
        Ok(Self {
            spec,
            layers,
            num_params: offset,
            tape_len: act_offset,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.num_params];
        for layer in &self.layers {
            let bound = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            for w in &mut values[layer.weight_offset..layer.bias_offset] {
                *w = rng.random_range(-bound..bound);
            }
        }
        ParamVector::new(values)
    }

    /// Forward pass over a batch; returns `batch × output_dim` outputs and the tape.
    pub fn forward<T: Scalar>(&self, params: &[T], inputs: &[&[f64]]) -> Result<(Vec<T>, Tape<T>)> {
        if params.len() != self.num_params {
            return Err(validation(format!(
                "expected {} parameters, got {}",
                self.num_params,
                params.len()
            )));
        }
        if let Some(bad) = inputs.iter().find(|x| x.len() != self.spec.input_dim) {
            return Err(validation(format!(
                "input width {} does not match network input_dim {}",
                bad.len(),
                self.spec.input_dim
            )));
        }
        let width = self.tape_len;
        let mut tape = Tape {
            values: vec![T::zero(); inputs.len() * width * 2],
        };
        let out_dim = self.spec.output_dim;
        let mut outputs = Vec::with_capacity(inputs.len() * out_dim);
        let last = self.layers.len() - 1;
        let mut buf: Vec<T> = Vec::new();
        let mut next: Vec<T> = Vec::new();
        for (s, x) in inputs.iter().enumerate() {
            buf.clear();
            buf.extend(x.iter().map(|&v| T::from_f64(v)));
            let base = s * width * 2;
            for (l, layer) in self.layers.iter().enumerate() {
                next.clear();
                let w = &params[layer.weight_offset..layer.bias_offset];
                let b = &params[layer.bias_offset..layer.bias_offset + layer.fan_out];
                for o in 0..layer.fan_out {
                    let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                    let mut acc = b[o];
                    for (wi, xi) in row.iter().zip(buf.iter()) {
                        acc += *wi * *xi;
                    }
                    next.push(acc);
                }
                let pre_at = base + layer.act_offset;
                let post_at = base + width + layer.act_offset;
                for (o, z) in next.iter_mut().enumerate() {
                    tape.values[pre_at + o] = *z;
                    let a = if l == last {
                        match self.spec.output_activation {
                            OutputActivation::Identity => *z,
                            OutputActivation::Sigmoid => z.sigmoid(),
                            OutputActivation::Softplus => z.softplus(),
                        }
                    } else {
                        match self.spec.activation {
                            Activation::Relu => z.relu(),
                            Activation::Tanh => z.tanh(),
                        }
                    };
                    tape.values[post_at + o] = a;
                    *z = a;
                }
                std::mem::swap(&mut buf, &mut next);
            }
            outputs.extend_from_slice(&buf);
        }
        Ok((outputs, tape))
    }

    /// Accumulates `Σ_s (∂out_s/∂params)ᵀ d_out_s` into `grad`.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        inputs: &[&[f64]],
        tape: &Tape<T>,
        d_out: &[T],
        grad: &mut [T],
    ) {
        let out_dim = self.spec.output_dim;
        assert_eq!(
            d_out.len(),
            inputs.len() * out_dim,
            "output gradient shape mismatch"
        );
        assert_eq!(
            grad.len(),
            self.num_params,
            "gradient buffer length mismatch"
        );
        let width = self.tape_len;
        let last = self.layers.len() - 1;
        let mut delta: Vec<T> = Vec::new();
        let mut prev: Vec<T> = Vec::new();
        for (s, x) in inputs.iter().enumerate() {
            let layer = &self.layers[last];
            let pre = &tape.values[s * width * 2 + layer.act_offset..];
            let post = &tape.values[s * width * 2 + width + layer.act_offset..];
            delta.clear();
            for o in 0..out_dim {
                let g = d_out[s * out_dim + o];
                delta.push(match self.spec.output_activation {
                    OutputActivation::Identity => g,
                    OutputActivation::Sigmoid => {
                        let a = post[o];
                        g * a * (T::one() - a)
                    }
                    OutputActivation::Softplus => g * pre[o].sigmoid(),
                });
            }
            for l in (0..self.layers.len()).rev() {
                let layer = self.layers[l];
                let w = &params[layer.weight_offset..layer.bias_offset];
                // activations feeding this layer
                let input_at = |k: usize| -> T {
                    if l == 0 {
                        T::from_f64(x[k])
                    } else {
                        let below = self.layers[l - 1];
                        tape.values[s * width * 2 + width + below.act_offset + k]
                    }
                };
                for o in 0..layer.fan_out {
                    let d = delta[o];
                    let g_row = &mut grad[layer.weight_offset + o * layer.fan_in
                        ..layer.weight_offset + (o + 1) * layer.fan_in];
                    for (k, g) in g_row.iter_mut().enumerate() {
                        *g += d * input_at(k);
                    }
                    grad[layer.bias_offset + o] += d;
                }
                if l == 0 {
                    break;
                }
                let below = self.layers[l - 1];
                prev.clear();
                prev.resize(layer.fan_in, T::zero());
                for o in 0..layer.fan_out {
                    let d = delta[o];
                    let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for (p, wi) in prev.iter_mut().zip(row) {
                        *p += *wi * d;
                    }
                }
                let pre_below = &tape.values[s * width * 2 + below.act_offset..];
                let post_below = &tape.values[s * width * 2 + width + below.act_offset..];
                for (k, p) in prev.iter_mut().enumerate() {
                    *p = match self.spec.activation {
                        Activation::Relu => {
                            if pre_below[k].value() > 0.0 {
                                *p
                            } else {
                                T::zero()
                            }
                        }
                        Activation::Tanh => {
                            let a = post_below[k];
                            *p * (T::one() - a * a)
                        }
                    };
                }
                std::mem::swap(&mut delta, &mut prev);
            }
        }
    }

    /// Response-model outputs split into revenue and cost heads.
    pub fn predict<T: Scalar>(
        &self,
        params: &[T],
        inputs: &[&[f64]],
    ) -> Result<PredictionMatrix<T>> {
        let (out, _) = self.forward(params, inputs)?;
        split_heads(&out, inputs.len(), self.spec.output_dim)
    }
}

/// Splits flat `n × 2M` network outputs into a prediction matrix.
pub fn split_heads<T: Scalar>(out: &[T], n: usize, out_dim: usize) -> Result<PredictionMatrix<T>> {
    if out_dim % 2 != 0 {
        return Err(validation("response model needs an even number of heads"));
    }
    let m = out_dim / 2;
    let mut revenues = Vec::with_capacity(n * m);
    let mut costs = Vec::with_capacity(n * m);
    for row in out.chunks(out_dim) {
        revenues.extend_from_slice(&row[..m]);
        costs.extend_from_slice(&row[m..]);
    }
    PredictionMatrix::new(n, m, revenues, costs)
}

/// Inverse of [`split_heads`] for gradients with respect to predictions.
pub fn merge_heads<T: Scalar>(grad: &PredictionMatrix<T>) -> Vec<T> {
    let m = grad.cols();
    let mut out = Vec::with_capacity(grad.rows() * 2 * m);
    for i in 0..grad.rows() {
        out.extend_from_slice(grad.revenue_row(i));
        out.extend_from_slice(grad.cost_row(i));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub layout_version: u32,
    pub spec: NetworkSpec,
    pub num_params: usize,
}

/// Writes a checkpoint: one JSON header line followed by a JSON array of values.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    spec: &NetworkSpec,
    params: &ParamVector,
) -> Result<()> {
    let header = CheckpointHeader {
        layout_version: CHECKPOINT_LAYOUT_VERSION,
        spec: spec.clone(),
        num_params: params.len(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    serde_json::to_writer(&mut w, &params.values)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(NetworkSpec, ParamVector)> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| validation("checkpoint is empty"))??;
    let header: CheckpointHeader = serde_json::from_str(&header_line)?;
    if header.layout_version != CHECKPOINT_LAYOUT_VERSION {
        return Err(validation(format!(
            "unsupported checkpoint layout {}",
            header.layout_version
        )));
    }
    let values_line = lines
        .next()
        .ok_or_else(|| validation("checkpoint has no parameter array"))??;
    let values: Vec<f64> = serde_json::from_str(&values_line)?;
    let expected = Mlp::new(header.spec.clone())?.num_params();
    if values.len() != header.num_params || values.len() != expected {
        return Err(validation(format!(
            "checkpoint holds {} values, spec needs {expected}",
            values.len()
        )));
    }
    Ok((header.spec, ParamVector::new(values)))
}
