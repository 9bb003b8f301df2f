//! Fully connected networks with hand-written backpropagation.
//!
//! Parameters live in one flat buffer so optimizers and model files can treat
//! them as a single vector. Layer `l` occupies `in_l * out_l` weights stored
//! row-major as an `in × out` matrix, followed by `out_l` biases. The first
//! layer's input is the row `[x | t | s]`: the data vector, then the scalar
//! time when the model is time conditioned, then the condition vector.
//! Hidden layers apply the activation; the last layer is linear.

use serde::{Deserialize, Serialize};

use super::matrix::{gemm, GemmOperand, Matrix};
use super::rng::Rng;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }

    /// He gain for relu, unit gain for tanh.
    fn init_gain(self) -> f64 {
        match self {
            Activation::Relu => std::f64::consts::SQRT_2,
            Activation::Tanh => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Validation(format!("unknown activation `{other}` (expected relu or tanh)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    activation: Activation,
    time_conditioned: bool,
    condition_dim: usize,
    params: Vec<f64>,
}

/// Layer inputs recorded by [`MlpModel::forward_trace`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    inputs: Vec<Matrix>,
    output: Matrix,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn into_output(self) -> Matrix {
        self.output
    }
}

#[derive(Clone, Debug)]
pub struct MlpGradients {
    /// Same layout as [`MlpModel::params`].
    pub params: Vec<f64>,
    /// Gradient with respect to the data input `x`.
    pub input: Matrix,
    /// Gradient with respect to `t`, when time conditioned.
    pub time: Option<Vec<f64>>,
    /// Gradient with respect to the condition `s`, when present.
    pub condition: Option<Matrix>,
}

impl MlpModel {
    /// Randomly initialized network: weights `N(0, gain² / fan_in)`, zero biases.
    pub fn new(
        layer_dims: &[usize],
        activation: Activation,
        time_conditioned: bool,
        condition_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut model = Self::zeros(layer_dims, activation, time_conditioned, condition_dim)?;
        let gain = activation.init_gain();
        for l in 0..model.num_layers() {
            let (fan_in, fan_out) = model.layer_shape(l);
            let std = gain / (fan_in as f64).sqrt();
            let off = model.layer_offset(l);
            for w in &mut model.params[off..off + fan_in * fan_out] {
                *w = std * rng.normal();
            }
        }
        Ok(model)
    }

    pub fn zeros(
        layer_dims: &[usize],
        activation: Activation,
        time_conditioned: bool,
        condition_dim: usize,
    ) -> Result<Self> {
        let count = Self::expected_param_count(layer_dims, time_conditioned, condition_dim)?;
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            time_conditioned,
            condition_dim,
            params: vec![0.0; count],
        })
    }

    pub fn from_parts(
        layer_dims: &[usize],
        activation: Activation,
        time_conditioned: bool,
        condition_dim: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let count = Self::expected_param_count(layer_dims, time_conditioned, condition_dim)?;
        if params.len() != count {
            return Err(Error::Shape(format!(
                "architecture {layer_dims:?} needs {count} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self { layer_dims: layer_dims.to_vec(), activation, time_conditioned, condition_dim, params })
    }

    /// `Σ (d_in + extras + 1) · d_out` over layers, with extras only on the first layer.
    pub fn expected_param_count(layer_dims: &[usize], time_conditioned: bool, condition_dim: usize) -> Result<usize> {
        if layer_dims.len() < 2 {
            return Err(Error::Validation("an MLP needs at least input and output dims".into()));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!("zero-width layer in {layer_dims:?}")));
        }
        let extras = usize::from(time_conditioned) + condition_dim;
        Ok(layer_dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| (w[0] + if l == 0 { extras } else { 0 } + 1) * w[1])
            .sum())
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn time_conditioned(&self) -> bool {
        self.time_conditioned
    }

    pub fn condition_dim(&self) -> usize {
        self.condition_dim
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated on construction")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `(fan_in, fan_out)` of layer `l`, including the extra inputs on layer 0.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        let extras = if l == 0 { usize::from(self.time_conditioned) + self.condition_dim } else { 0 };
        (self.layer_dims[l] + extras, self.layer_dims[l + 1])
    }

    fn layer_offset(&self, l: usize) -> usize {
        (0..l).map(|k| {
            let (i, o) = self.layer_shape(k);
            (i + 1) * o
        }).sum()
    }

    /// Copy of layer `l`'s weight matrix (`fan_in × fan_out`) and bias.
    pub fn layer(&self, l: usize) -> (Matrix, Vec<f64>) {
        let (i, o) = self.layer_shape(l);
        let off = self.layer_offset(l);
        let w = Matrix::from_vec(i, o, self.params[off..off + i * o].to_vec()).expect("layer slice");
        (w, self.params[off + i * o..off + i * o + o].to_vec())
    }

    pub fn set_layer(&mut self, l: usize, weights: &Matrix, bias: &[f64]) -> Result<()> {
        let (i, o) = self.layer_shape(l);
        if weights.shape() != (i, o) || bias.len() != o {
            return Err(Error::Shape(format!(
                "layer {l} expects {i}x{o} weights and {o} biases, got {}x{} and {}",
                weights.rows(),
                weights.cols(),
                bias.len()
            )));
        }
        let off = self.layer_offset(l);
        self.params[off..off + i * o].copy_from_slice(weights.as_slice());
        self.params[off + i * o..off + i * o + o].copy_from_slice(bias);
        Ok(())
    }

    fn assemble_input(&self, x: &Matrix, t: Option<&[f64]>, s: Option<&Matrix>) -> Result<Matrix> {
        let n = x.rows();
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "layer 0 expects {} data columns, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        match (self.time_conditioned, t) {
            (true, None) => return Err(Error::Shape("layer 0: time-conditioned model needs t".into())),
            (false, Some(_)) => return Err(Error::Shape("layer 0: model is not time conditioned".into())),
            (true, Some(t)) if t.len() != n => {
                return Err(Error::Shape(format!("layer 0: {} time values for {n} rows", t.len())))
            }
            _ => {}
        }
        match (self.condition_dim, s) {
            (0, Some(_)) => return Err(Error::Shape("layer 0: model takes no condition input".into())),
            (d, None) if d > 0 => return Err(Error::Shape(format!("layer 0: missing {d}-dim condition"))),
            (d, Some(s)) if s.cols() != d || s.rows() != n => {
                return Err(Error::Shape(format!(
                    "layer 0: condition must be {n}x{d}, got {}x{}",
                    s.rows(),
                    s.cols()
                )))
            }
            _ => {}
        }
        if t.is_none() && s.is_none() {
            return Ok(x.clone());
        }
        let width = self.layer_shape(0).0;
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            data.extend_from_slice(x.row(i));
            if let Some(t) = t {
                data.push(t[i]);
            }
            if let Some(s) = s {
                data.extend_from_slice(s.row(i));
            }
        }
        Matrix::from_vec(n, width, data)
    }

    pub fn forward(&self, x: &Matrix, t: Option<&[f64]>, s: Option<&Matrix>) -> Result<Matrix> {
        let mut z = self.assemble_input(x, t, s)?;
        for l in 0..self.num_layers() {
            z = self.layer_forward(l, &z);
        }
        Ok(z)
    }

    /// Forward pass keeping every layer input for [`MlpModel::backward`].
    pub fn forward_trace(&self, x: &Matrix, t: Option<&[f64]>, s: Option<&Matrix>) -> Result<ForwardTrace> {
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut z = self.assemble_input(x, t, s)?;
        for l in 0..self.num_layers() {
            let next = self.layer_forward(l, &z);
            inputs.push(z);
            z = next;
        }
        Ok(ForwardTrace { inputs, output: z })
    }

    fn layer_forward(&self, l: usize, z: &Matrix) -> Matrix {
        let (fan_in, fan_out) = self.layer_shape(l);
        let off = self.layer_offset(l);
        let n = z.rows();
        let bias = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        let mut out = vec![0.0; n * fan_out];
        for row in out.chunks_exact_mut(fan_out) {
            row.copy_from_slice(bias);
        }
        gemm(
            n,
            fan_in,
            fan_out,
            GemmOperand { data: z.as_slice(), row_stride: fan_in, col_stride: 1 },
            GemmOperand { data: &self.params[off..off + fan_in * fan_out], row_stride: fan_out, col_stride: 1 },
            1.0,
            &mut out,
        );
        if l + 1 < self.num_layers() {
            let act = self.activation;
            out.iter_mut().for_each(|v| *v = act.apply(*v));
        }
        Matrix::from_vec(n, fan_out, out).expect("layer output")
    }

    /// Gradients of `⟨upstream, forward(x)⟩` with respect to parameters and inputs.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &Matrix) -> Result<MlpGradients> {
        if upstream.shape() != trace.output.shape() {
            return Err(Error::Shape(format!(
                "upstream gradient {}x{} for output {}x{}",
                upstream.rows(),
                upstream.cols(),
                trace.output.rows(),
                trace.output.cols()
            )));
        }
        let n = upstream.rows();
        let mut grads = vec![0.0; self.params.len()];
        let mut g = upstream.as_slice().to_vec();
        for l in (0..self.num_layers()).rev() {
            let (fan_in, fan_out) = self.layer_shape(l);
            let off = self.layer_offset(l);
            let input = &trace.inputs[l];
            // dW = inputᵀ · g
            gemm(
                fan_in,
                n,
                fan_out,
                GemmOperand { data: input.as_slice(), row_stride: 1, col_stride: fan_in },
                GemmOperand { data: &g, row_stride: fan_out, col_stride: 1 },
                0.0,
                &mut grads[off..off + fan_in * fan_out],
            );
            let db = &mut grads[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            for row in g.chunks_exact(fan_out) {
                for (b, &v) in db.iter_mut().zip(row) {
                    *b += v;
                }
            }
            // g_prev = g · Wᵀ
            let mut prev = vec![0.0; n * fan_in];
            gemm(
                n,
                fan_out,
                fan_in,
                GemmOperand { data: &g, row_stride: fan_out, col_stride: 1 },
                GemmOperand { data: &self.params[off..off + fan_in * fan_out], row_stride: 1, col_stride: fan_out },
                0.0,
                &mut prev,
            );
            if l > 0 {
                let act = self.activation;
                for (p, &z) in prev.iter_mut().zip(input.as_slice()) {
                    *p *= act.derivative_from_output(z);
                }
            }
            g = prev;
        }
        let width = self.layer_shape(0).0;
        let d = self.input_dim();
        let mut input = Matrix::zeros(n, d);
        let mut time = self.time_conditioned.then(|| vec![0.0; n]);
        let mut condition = (self.condition_dim > 0).then(|| Matrix::zeros(n, self.condition_dim));
        for i in 0..n {
            let row = &g[i * width..(i + 1) * width];
            input.row_mut(i).copy_from_slice(&row[..d]);
            let mut at = d;
            if let Some(t) = time.as_mut() {
                t[i] = row[at];
                at += 1;
            }
            if let Some(c) = condition.as_mut() {
                c.row_mut(i).copy_from_slice(&row[at..]);
            }
        }
        Ok(MlpGradients { params: grads, input, time, condition })
    }

    /// Forward and backward in one call.
    pub fn gradients(
        &self,
        x: &Matrix,
        t: Option<&[f64]>,
        s: Option<&Matrix>,
        upstream: &Matrix,
    ) -> Result<MlpGradients> {
        let trace = self.forward_trace(x, t, s)?;
        self.backward(&trace, upstream)
    }
}
