//! Flow matching on pairs drawn from a transport plan.
//!
//! A time-conditioned MLP `v(t, x)` is regressed onto the displacement of
//! sampled pairs along the straight interpolant:
//!
//! ```text
//! x_t = (1 − t)·x₀ + t·x₁,   t ~ U[0, 1]
//! L(θ) = mean_b ‖v_θ(t_b, x_t,b) − (x₁,b − x₀,b)‖²
//! ```
//!
//! Integrating `ẋ = v(t, x)` from `t = 0` then carries source frames toward
//! the target distribution at `t = 1`.

use serde::{Deserialize, Serialize};

use crate::conversion::{ConversionMethod, ConversionReport, FeatureMatrix, PlanStats};
use crate::error::{Error, Result};
use crate::numerics::{norm, streams, Activation, AdamState, Matrix, MlpModel, Rng};
use crate::ot::{cost_matrix, sinkhorn, uniform_marginal, CostKind, PlanSampler, SinkhornConfig, TransportPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeMethod {
    Euler,
    Rk4,
}

impl OdeMethod {
    pub fn name(self) -> &'static str {
        match self {
            OdeMethod::Euler => "euler",
            OdeMethod::Rk4 => "rk4",
        }
    }
}

impl std::str::FromStr for OdeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(OdeMethod::Euler),
            "rk4" => Ok(OdeMethod::Rk4),
            other => Err(Error::Validation(format!("unknown ODE method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub ode_steps: usize,
    pub ode_method: OdeMethod,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![512, 512, 512],
            activation: Activation::Tanh,
            batch_size: 1000,
            iterations: 1000,
            learning_rate: 1e-3,
            ode_steps: 100,
            ode_method: OdeMethod::Euler,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Validation("flow iterations must be >= 1".into()));
        }
        if self.ode_steps == 0 {
            return Err(Error::Validation("ode_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("flow batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!("flow learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::Validation(format!("zero-width hidden layer in {:?}", self.hidden_dims)));
        }
        Ok(())
    }
}

/// A trained `v(t, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    pub model: MlpModel,
    pub training_loss_trace: Vec<f64>,
}

impl VelocityField {
    pub fn new(model: MlpModel) -> Result<Self> {
        if !model.time_conditioned() || model.condition_dim() != 0 || model.input_dim() != model.output_dim() {
            return Err(Error::Validation(format!(
                "a velocity field needs a time-conditioned d -> d model, got {:?} (time: {}, condition: {})",
                model.layer_dims(),
                model.time_conditioned(),
                model.condition_dim()
            )));
        }
        Ok(Self { model, training_loss_trace: Vec::new() })
    }

    pub fn dim(&self) -> usize {
        self.model.input_dim()
    }

    /// `v(t_i, x_i)` row by row.
    pub fn velocity(&self, t: &[f64], x: &Matrix) -> Result<Matrix> {
        self.model.forward(x, Some(t), None)
    }
}

/// Anything that can hand out `(x₀, x₁)` batches.
pub trait PairSource {
    fn dim(&self) -> usize;
    fn sample(&self, count: usize, rng: &mut Rng) -> Result<(Matrix, Matrix)>;
}

/// Pairs `(xᵢ, yⱼ)` drawn with probability `π_ij`.
pub struct PlanPairs<'a> {
    sampler: PlanSampler,
    source: &'a Matrix,
    target: &'a Matrix,
}

impl<'a> PlanPairs<'a> {
    pub fn new(plan: &TransportPlan, source: &'a Matrix, target: &'a Matrix) -> Result<Self> {
        if plan.rows() != source.rows() || plan.cols() != target.rows() {
            return Err(Error::Shape(format!(
                "plan is {}x{} but source has {} and target {} rows",
                plan.rows(),
                plan.cols(),
                source.rows(),
                target.rows()
            )));
        }
        if source.cols() != target.cols() {
            return Err(Error::Shape(format!("source dim {} != target dim {}", source.cols(), target.cols())));
        }
        Ok(Self { sampler: PlanSampler::new(plan)?, source, target })
    }
}

impl PairSource for PlanPairs<'_> {
    fn dim(&self) -> usize {
        self.source.cols()
    }

    fn sample(&self, count: usize, rng: &mut Rng) -> Result<(Matrix, Matrix)> {
        let idx = self.sampler.sample_indices(count, rng);
        let (i, j): (Vec<usize>, Vec<usize>) = idx.into_iter().unzip();
        Ok((self.source.select_rows(&i), self.target.select_rows(&j)))
    }
}

/// Interpolants and regression targets for one batch.
pub fn interpolate(x0: &Matrix, x1: &Matrix, t: &[f64]) -> Result<(Matrix, Matrix)> {
    if x0.shape() != x1.shape() || t.len() != x0.rows() {
        return Err(Error::Shape(format!(
            "pairs {:?} / {:?} with {} times",
            x0.shape(),
            x1.shape(),
            t.len()
        )));
    }
    let mut xt = x0.clone();
    for (i, &ti) in t.iter().enumerate() {
        for (v, &b) in xt.row_mut(i).iter_mut().zip(x1.row(i)) {
            *v = (1.0 - ti) * *v + ti * b;
        }
    }
    Ok((xt, x1.sub(x0)?))
}

/// Flow-matching loss and its parameter gradient on a fixed batch.
pub fn fm_loss_and_grad(model: &MlpModel, x0: &Matrix, x1: &Matrix, t: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (xt, target) = interpolate(x0, x1, t)?;
    let trace = model.forward_trace(&xt, Some(t), None)?;
    let resid = trace.output().sub(&target)?;
    let b = x0.rows() as f64;
    let loss = resid.as_slice().iter().map(|r| r * r).sum::<f64>() / b;
    let upstream = resid.scale(2.0 / b);
    let grads = model.backward(&trace, &upstream)?;
    Ok((loss, grads.params))
}

/// Fresh velocity-field network for dimension `d`.
pub fn init_velocity_field(d: usize, cfg: &FlowConfig, rng: &mut Rng) -> Result<VelocityField> {
    let mut dims = vec![d];
    dims.extend_from_slice(&cfg.hidden_dims);
    dims.push(d);
    let mut model = MlpModel::new(&dims, cfg.activation, true, 0, rng)?;
    // zero output layer: the untrained field is v ≡ 0 rather than a random
    // function of x that training never removes away from the data
    let last = model.num_layers() - 1;
    let (w, b) = model.layer(last);
    model.set_layer(last, &Matrix::zeros(w.rows(), w.cols()), &vec![0.0; b.len()])?;
    VelocityField::new(model)
}

/// Trains a velocity field with Adam on batches from `pairs`.
pub fn fm_train(pairs: &impl PairSource, cfg: &FlowConfig, rng: &Rng) -> Result<VelocityField> {
    let mut trace = Vec::new();
    let mut field = fm_train_traced(pairs, cfg, rng, &mut trace)?;
    field.training_loss_trace = trace;
    Ok(field)
}

/// [`fm_train`] that appends each batch loss to `trace` as it goes, so the
/// history survives a divergence error. The returned field's own trace is empty.
pub fn fm_train_traced(pairs: &impl PairSource, cfg: &FlowConfig, rng: &Rng, trace: &mut Vec<f64>) -> Result<VelocityField> {
    cfg.validate()?;
    let mut field = init_velocity_field(pairs.dim(), cfg, &mut rng.fork(streams::INIT))?;
    let mut train = rng.fork(streams::TRAIN);
    let mut adam = AdamState::new(field.model.param_count(), cfg.learning_rate, 0.0);
    for iteration in 0..cfg.iterations {
        let (x0, x1) = pairs.sample(cfg.batch_size, &mut train)?;
        let t: Vec<f64> = (0..cfg.batch_size).map(|_| train.uniform()).collect();
        let (loss, grads) = fm_loss_and_grad(&field.model, &x0, &x1, &t)?;
        trace.push(loss);
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration, value: loss });
        }
        adam.step(field.model.params_mut(), &grads)?;
    }
    Ok(field)
}

fn check_state(x: &Matrix, step: usize) -> Result<()> {
    match x.as_slice().iter().position(|v| !v.is_finite()) {
        Some(_) => Err(Error::NonFinite { what: "ODE state at step", index: step }),
        None => Ok(()),
    }
}

fn axpy(x: &Matrix, h: f64, v: &Matrix) -> Matrix {
    x.zip_map(v, |a, b| a + h * b).expect("same shape")
}

/// One integration step from `t` to `t + h`.
fn ode_step(field: &impl Fn(f64, &Matrix) -> Result<Matrix>, method: OdeMethod, t: f64, h: f64, x: &Matrix) -> Result<Matrix> {
    match method {
        OdeMethod::Euler => Ok(axpy(x, h, &field(t, x)?)),
        OdeMethod::Rk4 => {
            let k1 = field(t, x)?;
            let k2 = field(t + 0.5 * h, &axpy(x, 0.5 * h, &k1))?;
            let k3 = field(t + 0.5 * h, &axpy(x, 0.5 * h, &k2))?;
            let k4 = field(t + h, &axpy(x, h, &k3))?;
            let mut out = x.clone();
            for ((((o, a), b), c), d) in out
                .as_mut_slice()
                .iter_mut()
                .zip(k1.as_slice())
                .zip(k2.as_slice())
                .zip(k3.as_slice())
                .zip(k4.as_slice())
            {
                *o += h / 6.0 * (a + 2.0 * b + 2.0 * c + d);
            }
            Ok(out)
        }
    }
}

/// Integrates `ẋ = f(t, x)` over `[0, 1]`, returning every state (`steps + 1` of them).
pub fn integrate(
    field: impl Fn(f64, &Matrix) -> Result<Matrix>,
    x: &Matrix,
    steps: usize,
    method: OdeMethod,
) -> Result<Vec<Matrix>> {
    if steps == 0 {
        return Err(Error::Validation("ode_steps must be >= 1".into()));
    }
    let h = 1.0 / steps as f64;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x.clone());
    for step in 0..steps {
        let next = ode_step(&field, method, step as f64 * h, h, states.last().expect("initial state"))?;
        check_state(&next, step)?;
        states.push(next);
    }
    Ok(states)
}

fn field_fn(field: &VelocityField) -> impl Fn(f64, &Matrix) -> Result<Matrix> + '_ {
    move |t, x| field.velocity(&vec![t; x.rows()], x)
}

/// Pushes `x` through the learned flow from `t = 0` to `t = 1`.
pub fn fm_apply(field: &VelocityField, x: &Matrix, cfg: &FlowConfig) -> Result<Matrix> {
    if x.cols() != field.dim() {
        return Err(Error::Shape(format!("field has dim {} but input has {} columns", field.dim(), x.cols())));
    }
    if cfg.ode_steps == 0 {
        return Err(Error::Validation("ode_steps must be >= 1".into()));
    }
    let f = field_fn(field);
    let h = 1.0 / cfg.ode_steps as f64;
    let mut state = x.clone();
    for step in 0..cfg.ode_steps {
        state = ode_step(&f, cfg.ode_method, step as f64 * h, h, &state)?;
        check_state(&state, step)?;
    }
    Ok(state)
}

/// Path-straightness diagnostic for learned trajectories.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Straightness {
    /// Mean over rows of `max_t dist(x(t), chord) / ‖x(1) − x(0)‖`.
    pub mean_relative_deviation: f64,
    pub max_relative_deviation: f64,
}

fn distance_to_segment(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let ap: Vec<f64> = a.iter().zip(p).map(|(x, y)| y - x).collect();
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let s = if len2 > 0.0 { (ap.iter().zip(&ab).map(|(u, v)| u * v).sum::<f64>() / len2).clamp(0.0, 1.0) } else { 0.0 };
    let d: Vec<f64> = ap.iter().zip(&ab).map(|(u, v)| u - s * v).collect();
    norm(&d)
}

/// Measures how far each trajectory strays from the chord between its endpoints.
pub fn straightness(field: &VelocityField, x: &Matrix, cfg: &FlowConfig) -> Result<Straightness> {
    let states = integrate(field_fn(field), x, cfg.ode_steps, cfg.ode_method)?;
    let end = states.last().expect("at least two states");
    let mut ratios = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let a = x.row(i);
        let b = end.row(i);
        let chord: f64 = norm(&a.iter().zip(b).map(|(u, v)| v - u).collect::<Vec<_>>());
        let dev = states.iter().map(|s| distance_to_segment(s.row(i), a, b)).fold(0.0, f64::max);
        ratios.push(if chord > 0.0 { dev / chord } else { 0.0 });
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
    let max = ratios.iter().copied().fold(0.0, f64::max);
    Ok(Straightness { mean_relative_deviation: mean, max_relative_deviation: max })
}

/// Solves one Sinkhorn plan, trains a field on pairs from it and converts the
/// source frames with it.
pub fn fm_pipeline(
    source: &FeatureMatrix,
    reference: &FeatureMatrix,
    sinkhorn_cfg: &SinkhornConfig,
    cfg: &FlowConfig,
    cost: CostKind,
    rng: &Rng,
) -> Result<(VelocityField, FeatureMatrix, ConversionReport)> {
    if source.dim() != reference.dim() {
        return Err(Error::Validation(format!(
            "source has dim {} but reference has dim {}",
            source.dim(),
            reference.dim()
        )));
    }
    if source.is_empty() || reference.is_empty() {
        return Err(Error::Validation("source and reference need at least one frame".into()));
    }
    let c = cost_matrix(&source.frames, &reference.frames, cost)?;
    let plan = sinkhorn(&c, &uniform_marginal(source.len()), &uniform_marginal(reference.len()), sinkhorn_cfg)?;
    let pairs = PlanPairs::new(&plan, &source.frames, &reference.frames)?;
    let field = fm_train(&pairs, cfg, rng)?;
    let frames = fm_apply(&field, &source.frames, cfg)?;
    let report = ConversionReport {
        plan_stats: Some(PlanStats::from(&plan)),
        mean_transport_cost: plan.transport_cost(&c).max(0.0),
        method: ConversionMethod::Fmvc,
        k: 0,
    };
    let out = FeatureMatrix { frames, frame_rate_hint: source.frame_rate_hint, tag: source.tag.clone() };
    Ok((field, out, report))
}
