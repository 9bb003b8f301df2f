//! Conditional maximin neural optimal transport.
//!
//! A map `T(x, s)` and a potential `f(y, s)` play the saddle game
//!
//! ```text
//! max_f min_T  w·E_ν[f(y, s)] + E_μ[½‖x − T(x, s)‖² − f(T(x, s), s)]
//! ```
//!
//! with `w = 1` and unconstrained `f` for the plain problem. The extremal
//! variant constrains `f ≤ 0` (the network output goes through `−softplus`)
//! and weights the target term by `w ≥ 1`, which lets `T` cover only the
//! part of the target closest to its inputs.
//!
//! Training alternates `K_T` descent steps on the map with one ascent step
//! on the potential. The map is parameterized as a displacement,
//! `T(x, s) = x + g(x, s)`, with the output layer of `g` zeroed so training
//! starts from the identity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{theorem1_check, w2_squared_empirical, W2Mode};
use crate::numerics::{matrix_sqrt_psd, streams, Activation, AdamState, Matrix, MlpModel, Rng};

/// Loss magnitude beyond which training is aborted.
pub const DIVERGENCE_THRESHOLD: f64 = 1e8;

/// A distribution that can be sampled row by row.
#[derive(Clone, Debug)]
pub enum Sampler {
    /// `mean + z·factor` with `z ~ N(0, I)` and `factor` the symmetric root of the covariance.
    Gaussian { mean: Vec<f64>, factor: Matrix },
    /// Component `k` chosen with probability `weights[k]`.
    Mixture { weights: Vec<f64>, components: Vec<Sampler> },
    /// Uniform resampling of stored rows.
    Empirical(Matrix),
}

impl Sampler {
    pub fn gaussian(mean: Vec<f64>, covariance: &Matrix) -> Result<Self> {
        if covariance.shape() != (mean.len(), mean.len()) {
            return Err(Error::Shape(format!(
                "covariance {:?} does not match mean of length {}",
                covariance.shape(),
                mean.len()
            )));
        }
        if let Some(i) = mean.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "sampler mean", index: i });
        }
        let factor = matrix_sqrt_psd(covariance)?;
        Ok(Sampler::Gaussian { mean, factor })
    }

    /// `N(mean, scale²·I)`.
    pub fn isotropic(mean: Vec<f64>, scale: f64) -> Result<Self> {
        let d = mean.len();
        let cov = Matrix::identity(d).scale(scale * scale);
        Self::gaussian(mean, &cov)
    }

    pub fn mixture(weights: Vec<f64>, components: Vec<Sampler>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::Validation(format!(
                "mixture needs one weight per component, got {} weights and {} components",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Validation("mixture weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Validation("mixture weights sum to zero".into()));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::Shape("mixture components disagree on dimension".into()));
        }
        Ok(Sampler::Mixture { weights: weights.iter().map(|w| w / total).collect(), components })
    }

    pub fn empirical(frames: Matrix) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(Error::Validation("empirical sampler needs at least one row".into()));
        }
        frames.check_finite("empirical sampler frames")?;
        Ok(Sampler::Empirical(frames))
    }

    pub fn dim(&self) -> usize {
        match self {
            Sampler::Gaussian { mean, .. } => mean.len(),
            Sampler::Mixture { components, .. } => components[0].dim(),
            Sampler::Empirical(frames) => frames.cols(),
        }
    }

    pub fn sample(&self, count: usize, rng: &mut Rng) -> Result<Matrix> {
        Ok(self.sample_labeled(count, rng)?.0)
    }

    /// Samples with the mixture component of each row (zero for other samplers).
    pub fn sample_labeled(&self, count: usize, rng: &mut Rng) -> Result<(Matrix, Vec<usize>)> {
        match self {
            Sampler::Gaussian { mean, factor } => {
                let mut z = Matrix::zeros(count, mean.len());
                rng.fill_normal(z.as_mut_slice());
                let x = z.matmul(factor)?.add_row_vector(mean)?;
                Ok((x, vec![0; count]))
            }
            Sampler::Mixture { weights, components } => {
                let labels: Vec<usize> = (0..count).map(|_| pick(weights, rng.uniform())).collect();
                let mut x = Matrix::zeros(count, self.dim());
                for (k, component) in components.iter().enumerate() {
                    let rows: Vec<usize> = (0..count).filter(|&i| labels[i] == k).collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let block = component.sample(rows.len(), rng)?;
                    for (j, &i) in rows.iter().enumerate() {
                        x.row_mut(i).copy_from_slice(block.row(j));
                    }
                }
                Ok((x, labels))
            }
            Sampler::Empirical(frames) => {
                let idx: Vec<usize> = (0..count).map(|_| rng.below(frames.rows())).collect();
                Ok((frames.select_rows(&idx), vec![0; count]))
            }
        }
    }
}

fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

/// One condition: its embedding `s` with source `μ(·|s)` and target `ν(·|s)`.
#[derive(Clone, Debug)]
pub struct Condition {
    pub embedding: Vec<f64>,
    pub source: Sampler,
    pub target: Sampler,
}

#[derive(Clone, Debug)]
pub struct ConditionalDataset {
    conditions: Vec<Condition>,
    dim: usize,
    condition_dim: usize,
}

/// A training batch; rows of `x`, `y` and `s` share a condition.
#[derive(Clone, Debug)]
pub struct NotBatch {
    pub x: Matrix,
    pub y: Matrix,
    pub s: Matrix,
    pub condition: Vec<usize>,
}

impl ConditionalDataset {
    pub fn new(conditions: Vec<Condition>) -> Result<Self> {
        let first = conditions
            .first()
            .ok_or_else(|| Error::Validation("a conditional dataset needs at least one condition".into()))?;
        let dim = first.source.dim();
        let condition_dim = first.embedding.len();
        if condition_dim == 0 {
            return Err(Error::Validation("condition embeddings must be nonempty".into()));
        }
        for (c, cond) in conditions.iter().enumerate() {
            if cond.source.dim() != dim || cond.target.dim() != dim {
                return Err(Error::Shape(format!(
                    "condition {c}: source dim {} and target dim {} must both be {dim}",
                    cond.source.dim(),
                    cond.target.dim()
                )));
            }
            if cond.embedding.len() != condition_dim {
                return Err(Error::Shape(format!(
                    "condition {c}: embedding length {} differs from {condition_dim}",
                    cond.embedding.len()
                )));
            }
            if let Some(i) = cond.embedding.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "condition embedding", index: i });
            }
        }
        Ok(Self { conditions, dim, condition_dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn condition_dim(&self) -> usize {
        self.condition_dim
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    pub fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    pub fn condition(&self, c: usize) -> &Condition {
        &self.conditions[c]
    }

    /// `count` copies of the embedding of condition `c`.
    pub fn condition_matrix(&self, c: usize, count: usize) -> Matrix {
        let mut s = Matrix::zeros(count, self.condition_dim);
        for i in 0..count {
            s.row_mut(i).copy_from_slice(&self.conditions[c].embedding);
        }
        s
    }

    /// Draws a condition per row uniformly, then `x ~ μ(·|s)` and `y ~ ν(·|s)`.
    pub fn sample_batch(&self, count: usize, rng: &mut Rng) -> Result<NotBatch> {
        let picks: Vec<usize> = (0..count).map(|_| rng.below(self.conditions.len())).collect();
        let mut x = Matrix::zeros(0, self.dim);
        let mut y = Matrix::zeros(0, self.dim);
        let mut s = Matrix::zeros(0, self.condition_dim);
        let mut condition = Vec::with_capacity(count);
        for c in 0..self.conditions.len() {
            let n = picks.iter().filter(|&&p| p == c).count();
            if n == 0 {
                continue;
            }
            x = x.vstack(&self.conditions[c].source.sample(n, rng)?)?;
            y = y.vstack(&self.conditions[c].target.sample(n, rng)?)?;
            s = s.vstack(&self.condition_matrix(c, n))?;
            condition.extend(std::iter::repeat(c).take(n));
        }
        Ok(NotBatch { x, y, s, condition })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NotConfig {
    /// Map updates per potential update (`K_T`).
    pub inner_steps: usize,
    pub batch_size: usize,
    pub map_lr: f64,
    pub potential_lr: f64,
    pub weight_decay: f64,
    pub outer_iterations: usize,
    pub extremal: bool,
    pub w: f64,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    /// Outer iterations between push-forward checkpoints.
    pub log_every: usize,
    /// Samples per condition and side at each checkpoint.
    pub eval_samples: usize,
}

impl Default for NotConfig {
    fn default() -> Self {
        Self {
            inner_steps: 10,
            batch_size: 128,
            map_lr: 1e-3,
            potential_lr: 1e-3,
            weight_decay: 1e-10,
            outer_iterations: 5000,
            extremal: false,
            w: 1.0,
            hidden_dims: vec![128, 128],
            activation: Activation::Tanh,
            log_every: 500,
            eval_samples: 256,
        }
    }
}

impl NotConfig {
    /// Defaults with the extremal constraint on and `w = 12`.
    pub fn extremal_default() -> Self {
        Self { extremal: true, w: 12.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::Validation("inner_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        if !(self.w.is_finite() && self.w >= 1.0) {
            return Err(Error::Validation(format!("w must be >= 1, got {}", self.w)));
        }
        for (name, lr) in [("map_lr", self.map_lr), ("potential_lr", self.potential_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Validation(format!("{name} must be > 0, got {lr}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Validation(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::Validation(format!("zero-width hidden layer in {:?}", self.hidden_dims)));
        }
        if self.eval_samples == 0 {
            return Err(Error::Validation("eval_samples must be >= 1".into()));
        }
        Ok(())
    }

    /// Weight on the target term: `w` in extremal mode, otherwise 1.
    pub fn target_weight(&self) -> f64 {
        if self.extremal {
            self.w
        } else {
            1.0
        }
    }
}

/// The map `T(x, s) = x + g(x, s)` and the potential `f(y, s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NotModelPair {
    /// Displacement network `g`: `d + d_s → d`.
    pub map: MlpModel,
    /// Potential network: `d + d_s → 1`, before the optional transform.
    pub potential: MlpModel,
    /// When set, `f = −softplus(raw)` so `f ≤ 0` everywhere.
    pub nonpositive: bool,
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn zero_last_layer(model: &mut MlpModel) -> Result<()> {
    let last = model.num_layers() - 1;
    let (w, b) = model.layer(last);
    model.set_layer(last, &Matrix::zeros(w.rows(), w.cols()), &vec![0.0; b.len()])
}

impl NotModelPair {
    /// Random hidden layers, zero output layers: `T` starts at the identity
    /// and `f` at a constant.
    pub fn new(dim: usize, condition_dim: usize, cfg: &NotConfig, rng: &mut Rng) -> Result<Self> {
        let mut map_dims = vec![dim];
        map_dims.extend_from_slice(&cfg.hidden_dims);
        map_dims.push(dim);
        let mut pot_dims = vec![dim];
        pot_dims.extend_from_slice(&cfg.hidden_dims);
        pot_dims.push(1);
        let mut map = MlpModel::new(&map_dims, cfg.activation, false, condition_dim, rng)?;
        let mut potential = MlpModel::new(&pot_dims, cfg.activation, false, condition_dim, rng)?;
        zero_last_layer(&mut map)?;
        zero_last_layer(&mut potential)?;
        Self::from_models(map, potential, cfg.extremal)
    }

    pub fn from_models(map: MlpModel, potential: MlpModel, nonpositive: bool) -> Result<Self> {
        let d = map.input_dim();
        if map.output_dim() != d || potential.input_dim() != d || potential.output_dim() != 1 {
            return Err(Error::Shape(format!(
                "map {:?} must be d -> d and potential {:?} must be d -> 1",
                map.layer_dims(),
                potential.layer_dims()
            )));
        }
        if map.condition_dim() == 0 || map.condition_dim() != potential.condition_dim() {
            return Err(Error::Shape(format!(
                "map and potential need the same nonzero condition dim, got {} and {}",
                map.condition_dim(),
                potential.condition_dim()
            )));
        }
        if map.time_conditioned() || potential.time_conditioned() {
            return Err(Error::Validation("neural OT networks are not time conditioned".into()));
        }
        Ok(Self { map, potential, nonpositive })
    }

    pub fn dim(&self) -> usize {
        self.map.input_dim()
    }

    pub fn condition_dim(&self) -> usize {
        self.map.condition_dim()
    }

    pub fn apply_map(&self, x: &Matrix, s: &Matrix) -> Result<Matrix> {
        x.add(&self.map.forward(x, None, Some(s))?)
    }

    /// `f(y_i, s_i)` with the transform applied.
    pub fn potential_values(&self, y: &Matrix, s: &Matrix) -> Result<Vec<f64>> {
        let raw = self.potential.forward(y, None, Some(s))?;
        Ok(raw.as_slice().iter().map(|&r| self.transform(r).0).collect())
    }

    /// `(f, df/draw)` for one raw output.
    fn transform(&self, raw: f64) -> (f64, f64) {
        if self.nonpositive {
            (-softplus(raw), -sigmoid(raw))
        } else {
            (raw, 1.0)
        }
    }

    /// Mean `½‖x − T(x, s)‖²`.
    pub fn mean_transport_cost(&self, x: &Matrix, s: &Matrix) -> Result<f64> {
        let t = self.apply_map(x, s)?;
        Ok(half_sq_rows(x, &t).iter().sum::<f64>() / x.rows().max(1) as f64)
    }
}

fn half_sq_rows(x: &Matrix, t: &Matrix) -> Vec<f64> {
    (0..x.rows())
        .map(|i| 0.5 * x.row(i).iter().zip(t.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .collect()
}

fn check_batch(pair: &NotModelPair, x: &Matrix, s: &Matrix) -> Result<()> {
    if x.cols() != pair.dim() || s.cols() != pair.condition_dim() || x.rows() != s.rows() || x.rows() == 0 {
        return Err(Error::Shape(format!(
            "batch x {:?} with s {:?} does not fit a pair with d = {}, d_s = {}",
            x.shape(),
            s.shape(),
            pair.dim(),
            pair.condition_dim()
        )));
    }
    Ok(())
}

fn potential_objective(
    pair: &NotModelPair,
    x: &Matrix,
    y: &Matrix,
    s: &Matrix,
    cfg: &NotConfig,
) -> Result<(f64, Vec<f64>)> {
    if cfg.extremal != pair.nonpositive {
        return Err(Error::Validation(format!(
            "config extremal = {} but the pair's nonpositive transform is {}",
            cfg.extremal, pair.nonpositive
        )));
    }
    check_batch(pair, x, s)?;
    check_batch(pair, y, s)?;
    let n = x.rows();
    let w = cfg.target_weight();
    let t = pair.apply_map(x, s)?;
    let trace = pair.potential.forward_trace(&y.vstack(&t)?, None, Some(&s.vstack(s)?))?;
    let raw = trace.output().as_slice();
    let mut loss = 0.0;
    let mut upstream = Matrix::zeros(2 * n, 1);
    for i in 0..2 * n {
        let (f, df) = pair.transform(raw[i]);
        let weight = if i < n { w / n as f64 } else { -1.0 / n as f64 };
        loss += weight * f;
        upstream.as_mut_slice()[i] = weight * df;
    }
    let grads = pair.potential.backward(&trace, &upstream)?.params;
    Ok((loss, grads))
}

fn map_objective(pair: &NotModelPair, x: &Matrix, s: &Matrix) -> Result<(f64, Vec<f64>)> {
    check_batch(pair, x, s)?;
    let n = x.rows() as f64;
    let map_trace = pair.map.forward_trace(x, None, Some(s))?;
    let t = x.add(map_trace.output())?;
    let pot_trace = pair.potential.forward_trace(&t, None, Some(s))?;
    let raw = pot_trace.output().as_slice();
    let mut df = Matrix::zeros(x.rows(), 1);
    let mut loss = half_sq_rows(x, &t).iter().sum::<f64>();
    for (i, &r) in raw.iter().enumerate() {
        let (f, d) = pair.transform(r);
        loss -= f;
        df.as_mut_slice()[i] = d;
    }
    let grad_f = pair.potential.backward(&pot_trace, &df)?.input;
    // ∂/∂T_i of ½‖x_i − T_i‖² − f(T_i) is (T_i − x_i) − ∇f(T_i)
    let upstream = t.sub(x)?.sub(&grad_f)?.scale(1.0 / n);
    let grads = pair.map.backward(&map_trace, &upstream)?.params;
    Ok((loss / n, grads))
}

/// `L_f = w/|Y| Σ f(y, s) − 1/|X| Σ f(T(x, s), s)` and `∂L_f/∂ψ`.
///
/// `w` is 1 unless `cfg.extremal`. The potential step ascends this value.
pub fn not_loss_potential(
    pair: &NotModelPair,
    x: &Matrix,
    y: &Matrix,
    s: &Matrix,
    cfg: &NotConfig,
) -> Result<(f64, Vec<f64>)> {
    let (loss, grads) = potential_objective(pair, x, y, s, cfg)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { what: "potential objective", index: 0 });
    }
    Ok((loss, grads))
}

/// `L_T = 1/|X| Σ [½‖x − T(x, s)‖² − f(T(x, s), s)]` and `∂L_T/∂θ`.
pub fn not_loss_map(pair: &NotModelPair, x: &Matrix, s: &Matrix) -> Result<(f64, Vec<f64>)> {
    let (loss, grads) = map_objective(pair, x, s)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { what: "map objective", index: 0 });
    }
    Ok((loss, grads))
}

/// Per outer iteration: the last map objective and the potential objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NotTraceRow {
    pub iteration: usize,
    pub map_objective: f64,
    pub potential_objective: f64,
}

/// Push-forward diagnostics for one condition at one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NotCheckpoint {
    pub iteration: usize,
    pub condition: usize,
    /// Unit-convention `Ŵ2²(T♯μ(·|s), ν(·|s))`.
    pub w2_squared: f64,
    /// Unit-convention `Ŵ2²(μ(·|s), ν(·|s))` on the same samples.
    pub baseline_w2_squared: f64,
    /// Fréchet distance between Gaussian fits of `T♯μ(·|s)` and `ν(·|s)`.
    pub frechet_distance: f64,
    /// `FD ≤ 2·Ŵ2²` on these samples.
    pub theorem1_holds: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NotTrace {
    pub rows: Vec<NotTraceRow>,
    pub checkpoints: Vec<NotCheckpoint>,
}

impl NotTrace {
    /// Checkpoints from the last logged iteration.
    pub fn final_checkpoints(&self) -> Vec<&NotCheckpoint> {
        match self.checkpoints.last() {
            Some(last) => self.checkpoints.iter().filter(|c| c.iteration == last.iteration).collect(),
            None => Vec::new(),
        }
    }
}

/// Evaluates every condition on fresh samples from `rng`.
pub fn evaluate_conditions(
    pair: &NotModelPair,
    dataset: &ConditionalDataset,
    samples: usize,
    iteration: usize,
    rng: &mut Rng,
) -> Result<Vec<NotCheckpoint>> {
    let mode = W2Mode::auto(samples, samples);
    let mut out = Vec::with_capacity(dataset.len());
    for c in 0..dataset.len() {
        let cond = dataset.condition(c);
        let x = cond.source.sample(samples, rng)?;
        let y = cond.target.sample(samples, rng)?;
        let t = pair.apply_map(&x, &dataset.condition_matrix(c, samples))?;
        let report = theorem1_check(&t, &y, mode)?;
        let baseline = 2.0 * w2_squared_empirical(&x, &y, mode)?;
        out.push(NotCheckpoint {
            iteration,
            condition: c,
            w2_squared: report.two_w2_squared,
            baseline_w2_squared: baseline,
            frechet_distance: report.fd,
            theorem1_holds: report.holds,
        });
    }
    Ok(out)
}

fn guard(iteration: usize, value: f64) -> Result<()> {
    if !value.is_finite() || value.abs() > DIVERGENCE_THRESHOLD {
        return Err(Error::Divergence { iteration, value });
    }
    Ok(())
}

fn train_loop(dataset: &ConditionalDataset, cfg: &NotConfig, rng: &Rng, trace: &mut NotTrace) -> Result<NotModelPair> {
    cfg.validate()?;
    let mut pair = NotModelPair::new(dataset.dim(), dataset.condition_dim(), cfg, &mut rng.fork(streams::INIT))?;
    let mut train = rng.fork(streams::TRAIN);
    let mut eval = rng.fork(streams::EVAL);
    let mut map_opt = AdamState::new(pair.map.param_count(), cfg.map_lr, cfg.weight_decay);
    let mut pot_opt = AdamState::new(pair.potential.param_count(), cfg.potential_lr, cfg.weight_decay);
    for iteration in 0..cfg.outer_iterations {
        let mut map_value = 0.0;
        for _ in 0..cfg.inner_steps {
            let batch = dataset.sample_batch(cfg.batch_size, &mut train)?;
            let (value, grads) = map_objective(&pair, &batch.x, &batch.s)?;
            guard(iteration, value)?;
            map_opt.step(pair.map.params_mut(), &grads)?;
            map_value = value;
        }
        let batch = dataset.sample_batch(cfg.batch_size, &mut train)?;
        let (pot_value, grads) = potential_objective(&pair, &batch.x, &batch.y, &batch.s, cfg)?;
        guard(iteration, pot_value)?;
        let ascent: Vec<f64> = grads.iter().map(|g| -g).collect();
        pot_opt.step(pair.potential.params_mut(), &ascent)?;
        trace.rows.push(NotTraceRow { iteration, map_objective: map_value, potential_objective: pot_value });
        let done = iteration + 1 == cfg.outer_iterations;
        if done || (cfg.log_every > 0 && (iteration + 1) % cfg.log_every == 0) {
            trace.checkpoints.extend(evaluate_conditions(&pair, dataset, cfg.eval_samples, iteration + 1, &mut eval)?);
        }
    }
    Ok(pair)
}

/// Plain conditional training. Rows are appended to `trace` as training
/// runs, so it holds the history up to the failure when an error is returned.
pub fn not_train(dataset: &ConditionalDataset, cfg: &NotConfig, rng: &Rng, trace: &mut NotTrace) -> Result<NotModelPair> {
    if cfg.extremal {
        return Err(Error::Validation("not_train got an extremal config; use xnot_train".into()));
    }
    train_loop(dataset, cfg, rng, trace)
}

/// Extremal training: `f ≤ 0` and target term weighted by `w ≥ 1` when
/// `cfg.extremal` is set. With `extremal` off and `w = 1` it runs the plain
/// loop step for step.
pub fn xnot_train(dataset: &ConditionalDataset, cfg: &NotConfig, rng: &Rng, trace: &mut NotTrace) -> Result<NotModelPair> {
    if !(cfg.w.is_finite() && cfg.w >= 1.0) {
        return Err(Error::Validation(format!("w must be >= 1, got {}", cfg.w)));
    }
    train_loop(dataset, cfg, rng, trace)
}

/// Work allowed to the duality-gap probes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeBudget {
    /// Adam steps for the map retrained against the frozen potential.
    pub map_iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Samples per condition and side used to evaluate the objective.
    pub eval_samples: usize,
    /// Outer iterations for the fresh pair behind the second gap; zero skips it.
    pub pair_outer_iterations: usize,
}

impl Default for ProbeBudget {
    fn default() -> Self {
        Self { map_iterations: 2000, batch_size: 256, learning_rate: 1e-3, eval_samples: 2000, pair_outer_iterations: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualityGapReport {
    /// `L(f̂, T̂) − min(L(f̂, T̂), L(f̂, T_re))`, `T_re` a fresh map trained against frozen `f̂`.
    pub epsilon1_estimate: f64,
    /// `max(0, V(f_re) − V(f̂))` with `V(f) = min_T L(f, T)` over the probed maps
    /// and `f_re` from a fresh pair; `None` when the budget skips it.
    pub epsilon2_estimate: Option<f64>,
    /// `L(f̂, T̂)` on the evaluation samples.
    pub objective: f64,
    /// `L(f̂, T_re)` on the same samples.
    pub retrained_objective: f64,
    pub beta_note: String,
    pub lipschitz_note: String,
}

struct EvalSet {
    x: Vec<Matrix>,
    y: Vec<Matrix>,
    s: Vec<Matrix>,
}

impl EvalSet {
    fn draw(dataset: &ConditionalDataset, n: usize, rng: &mut Rng) -> Result<Self> {
        let mut set = EvalSet { x: Vec::new(), y: Vec::new(), s: Vec::new() };
        for c in 0..dataset.len() {
            set.x.push(dataset.condition(c).source.sample(n, rng)?);
            set.y.push(dataset.condition(c).target.sample(n, rng)?);
            set.s.push(dataset.condition_matrix(c, n));
        }
        Ok(set)
    }
}

/// `w·E_ν f + E_μ[½‖x − T‖² − f(T)]` averaged uniformly over conditions.
fn saddle_objective(pair: &NotModelPair, w: f64, set: &EvalSet) -> Result<f64> {
    let mut total = 0.0;
    for c in 0..set.x.len() {
        let fy = pair.potential_values(&set.y[c], &set.s[c])?;
        let t = pair.apply_map(&set.x[c], &set.s[c])?;
        let ft = pair.potential_values(&t, &set.s[c])?;
        let cost = half_sq_rows(&set.x[c], &t);
        let n = fy.len() as f64;
        let target_term = w * fy.iter().sum::<f64>() / n;
        let map_term = cost.iter().zip(&ft).map(|(c, f)| c - f).sum::<f64>() / n;
        total += target_term + map_term;
    }
    Ok(total / set.x.len() as f64)
}

/// Trains a fresh map of the same architecture against the frozen potential of `pair`.
fn retrain_map(pair: &NotModelPair, dataset: &ConditionalDataset, budget: &ProbeBudget, rng: &mut Rng) -> Result<NotModelPair> {
    let mut map = MlpModel::new(pair.map.layer_dims(), pair.map.activation(), false, pair.condition_dim(), rng)?;
    zero_last_layer(&mut map)?;
    let mut probe = NotModelPair { map, potential: pair.potential.clone(), nonpositive: pair.nonpositive };
    let mut opt = AdamState::new(probe.map.param_count(), budget.learning_rate, 0.0);
    for iteration in 0..budget.map_iterations {
        let batch = dataset.sample_batch(budget.batch_size, rng)?;
        let (value, grads) = map_objective(&probe, &batch.x, &batch.s)?;
        guard(iteration, value)?;
        opt.step(probe.map.params_mut(), &grads)?;
    }
    Ok(probe)
}

/// Diagnostic estimates of the inner and outer duality gaps of `pair`.
///
/// Neither value is a certified bound: both come from finite retraining.
pub fn duality_gap_estimate(
    pair: &NotModelPair,
    dataset: &ConditionalDataset,
    cfg: &NotConfig,
    budget: &ProbeBudget,
    rng: &Rng,
) -> Result<DualityGapReport> {
    if budget.batch_size == 0 || budget.eval_samples == 0 {
        return Err(Error::Validation("probe budget needs nonzero batch_size and eval_samples".into()));
    }
    if pair.dim() != dataset.dim() || pair.condition_dim() != dataset.condition_dim() {
        return Err(Error::Shape("pair and dataset dimensions differ".into()));
    }
    let w = if pair.nonpositive { cfg.w } else { 1.0 };
    let set = EvalSet::draw(dataset, budget.eval_samples, &mut rng.fork(streams::EVAL))?;
    let mut probe_rng = rng.fork(streams::PROBE);

    let objective = saddle_objective(pair, w, &set)?;
    let retrained = retrain_map(pair, dataset, budget, &mut probe_rng)?;
    let retrained_objective = saddle_objective(&retrained, w, &set)?;
    let current_value = objective.min(retrained_objective);
    let epsilon1_estimate = objective - current_value;

    let epsilon2_estimate = if budget.pair_outer_iterations > 0 {
        let fresh_cfg = NotConfig { outer_iterations: budget.pair_outer_iterations, extremal: pair.nonpositive, ..cfg.clone() };
        let fresh = train_loop(dataset, &fresh_cfg, &probe_rng.fork(streams::TRAIN), &mut NotTrace::default())?;
        let fresh_retrained = retrain_map(&fresh, dataset, budget, &mut probe_rng)?;
        let fresh_value = saddle_objective(&fresh, w, &set)?.min(saddle_objective(&fresh_retrained, w, &set)?);
        Some((fresh_value - current_value).max(0.0))
    } else {
        None
    };

    Ok(DualityGapReport {
        epsilon1_estimate,
        epsilon2_estimate,
        objective,
        retrained_objective,
        beta_note: "strong convexity constant of the potential not estimated; not applicable to a neural potential".into(),
        lipschitz_note: "feature extractor is the identity here, so its Lipschitz constant is 1".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::max_relative_gradient_error;

    fn shift_dataset(shift: &[f64]) -> ConditionalDataset {
        let d = shift.len();
        ConditionalDataset::new(vec![Condition {
            embedding: vec![1.0],
            source: Sampler::isotropic(vec![0.0; d], 1.0).unwrap(),
            target: Sampler::isotropic(shift.to_vec(), 1.0).unwrap(),
        }])
        .unwrap()
    }

    fn small_pair(nonpositive: bool, seed: u64) -> NotModelPair {
        let mut rng = Rng::new(seed);
        let map = MlpModel::new(&[2, 8, 2], Activation::Tanh, false, 1, &mut rng).unwrap();
        let potential = MlpModel::new(&[2, 8, 1], Activation::Tanh, false, 1, &mut rng).unwrap();
        NotModelPair::from_models(map, potential, nonpositive).unwrap()
    }

    /// `f(y) = ⟨g, y⟩` and `T(x) = x + h` as single linear layers.
    fn linear_pair(g: &[f64], h: &[f64]) -> NotModelPair {
        let d = g.len();
        let mut potential = MlpModel::zeros(&[d, 1], Activation::Tanh, false, 1).unwrap();
        let mut wp = Matrix::zeros(d + 1, 1);
        for i in 0..d {
            wp.set(i, 0, g[i]);
        }
        potential.set_layer(0, &wp, &[0.0]).unwrap();
        let mut map = MlpModel::zeros(&[d, d], Activation::Tanh, false, 1).unwrap();
        map.set_layer(0, &Matrix::zeros(d + 1, d), h).unwrap();
        NotModelPair::from_models(map, potential, false).unwrap()
    }

    fn random_batch(n: usize, d: usize, rng: &mut Rng) -> (Matrix, Matrix, Matrix) {
        let mut x = Matrix::zeros(n, d);
        let mut y = Matrix::zeros(n, d);
        rng.fill_normal(x.as_mut_slice());
        rng.fill_normal(y.as_mut_slice());
        (x, y, Matrix::filled(n, 1, 1.0))
    }

    #[test]
    fn hand_computed_tiny_batch() {
        // f(y) = y₀ + 2·y₁, T(x) = x + (1, −1)
        let pair = linear_pair(&[1.0, 2.0], &[1.0, -1.0]);
        let x = Matrix::from_rows(&[[0.0, 0.0], [1.0, 2.0]]).unwrap();
        let y = Matrix::from_rows(&[[3.0, 1.0], [0.0, -1.0]]).unwrap();
        let s = Matrix::filled(2, 1, 1.0);
        let cfg = NotConfig::default();
        // f(y) = 5, −2 → mean 1.5; T(x) = (1,−1), (2,1) → f = −1, 4 → mean 1.5
        let (lf, _) = not_loss_potential(&pair, &x, &y, &s, &cfg).unwrap();
        assert!((lf - 0.0).abs() < 1e-12, "{lf}");
        // cost ½‖(1,−1)‖² = 1 per row; L_T = 1 − 1.5
        let (lt, _) = not_loss_map(&pair, &x, &s).unwrap();
        assert!((lt - (-0.5)).abs() < 1e-12, "{lt}");
    }

    #[test]
    fn matched_distributions_give_zero_potential_objective() {
        let mut rng = Rng::new(3);
        let mut pair = small_pair(false, 4);
        zero_last_layer(&mut pair.map).unwrap();
        let cfg = NotConfig::default();
        let n = 4000;
        let (x, y, s) = random_batch(n, 2, &mut rng);
        let (lf, _) = not_loss_potential(&pair, &x, &y, &s, &cfg).unwrap();
        let fy = pair.potential_values(&y, &s).unwrap();
        let fx = pair.potential_values(&x, &s).unwrap();
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (v.len() - 1) as f64
        };
        let se = ((var(&fy) + var(&fx)) / n as f64).sqrt();
        assert!(lf.abs() < 3.0 * se, "L_f = {lf}, se = {se}");
    }

    #[test]
    fn unit_weight_reduction_for_nonpositive_potential() {
        // with w = 1 the extremal objective is the plain formula applied to f ≤ 0
        let mut rng = Rng::new(8);
        let constrained = small_pair(true, 9);
        let (x, y, s) = random_batch(16, 2, &mut rng);
        let xcfg = NotConfig { extremal: true, w: 1.0, ..NotConfig::default() };
        let (a, _) = not_loss_potential(&constrained, &x, &y, &s, &xcfg).unwrap();
        let fy = constrained.potential_values(&y, &s).unwrap();
        let t = constrained.apply_map(&x, &s).unwrap();
        let ft = constrained.potential_values(&t, &s).unwrap();
        let b = fy.iter().sum::<f64>() / 16.0 - ft.iter().sum::<f64>() / 16.0;
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }

    #[test]
    fn extremal_flag_must_match_transform() {
        let pair = small_pair(false, 1);
        let mut rng = Rng::new(2);
        let (x, y, s) = random_batch(4, 2, &mut rng);
        let err = not_loss_potential(&pair, &x, &y, &s, &NotConfig::extremal_default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn potential_gradient_matches_finite_differences() {
        for nonpositive in [false, true] {
            let pair = small_pair(nonpositive, 11);
            let mut rng = Rng::new(12);
            let (x, y, s) = random_batch(5, 2, &mut rng);
            let cfg = NotConfig { extremal: nonpositive, w: if nonpositive { 3.0 } else { 1.0 }, ..NotConfig::default() };
            let (_, grads) = not_loss_potential(&pair, &x, &y, &s, &cfg).unwrap();
            let err = max_relative_gradient_error(pair.potential.params(), &grads, 1e-6, 1e-4, |p| {
                let mut probe = pair.clone();
                probe.potential.params_mut().copy_from_slice(p);
                not_loss_potential(&probe, &x, &y, &s, &cfg).unwrap().0
            });
            assert!(err < 1e-5, "nonpositive = {nonpositive}: {err}");
        }
    }

    #[test]
    fn map_gradient_matches_finite_differences() {
        for nonpositive in [false, true] {
            let pair = small_pair(nonpositive, 21);
            let mut rng = Rng::new(22);
            let (x, _, s) = random_batch(5, 2, &mut rng);
            let (_, grads) = not_loss_map(&pair, &x, &s).unwrap();
            let err = max_relative_gradient_error(pair.map.params(), &grads, 1e-6, 1e-4, |p| {
                let mut probe = pair.clone();
                probe.map.params_mut().copy_from_slice(p);
                not_loss_map(&probe, &x, &s).unwrap().0
            });
            assert!(err < 1e-5, "nonpositive = {nonpositive}: {err}");
        }
    }

    #[test]
    fn nonpositive_transform_bounds_potential() {
        let pair = small_pair(true, 5);
        let mut rng = Rng::new(6);
        let mut y = Matrix::zeros(10_000, 2);
        rng.fill_normal(y.as_mut_slice());
        let y = y.scale(50.0);
        let f = pair.potential_values(&y, &Matrix::filled(10_000, 1, 1.0)).unwrap();
        assert!(f.iter().all(|&v| v <= 0.0));
    }

    fn train_map_only(pair: &mut NotModelPair, dataset: &ConditionalDataset, steps: usize, seed: u64) {
        let mut rng = Rng::new(seed);
        let mut opt = AdamState::new(pair.map.param_count(), 1e-2, 0.0);
        for _ in 0..steps {
            let b = dataset.sample_batch(64, &mut rng).unwrap();
            let (_, g) = not_loss_map(pair, &b.x, &b.s).unwrap();
            opt.step(pair.map.params_mut(), &g).unwrap();
        }
    }

    fn mean_displacement_error(pair: &NotModelPair, dataset: &ConditionalDataset, target: &[f64]) -> f64 {
        let mut rng = Rng::new(99);
        let x = dataset.condition(0).source.sample(500, &mut rng).unwrap();
        let t = pair.apply_map(&x, &dataset.condition_matrix(0, 500)).unwrap();
        let disp = t.sub(&x).unwrap();
        disp.row_iter()
            .map(|r| r.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .sum::<f64>()
            / 500.0
    }

    #[test]
    fn zero_potential_drives_map_to_identity() {
        let dataset = shift_dataset(&[3.0, 0.0]);
        let mut pair = small_pair(false, 31);
        let (w, b) = pair.potential.layer(1);
        pair.potential.set_layer(1, &Matrix::zeros(w.rows(), w.cols()), &vec![0.0; b.len()]).unwrap();
        train_map_only(&mut pair, &dataset, 1500, 32);
        let err = mean_displacement_error(&pair, &dataset, &[0.0, 0.0]);
        assert!(err < 0.05, "{err}");
    }

    #[test]
    fn linear_potential_gives_shifted_map() {
        let g = [1.5, -0.5];
        let dataset = shift_dataset(&[0.0, 0.0]);
        let fixed = linear_pair(&g, &[0.0, 0.0]);
        let mut rng = Rng::new(41);
        let map = MlpModel::new(&[2, 16, 2], Activation::Tanh, false, 1, &mut rng).unwrap();
        let mut pair = NotModelPair::from_models(map, fixed.potential, false).unwrap();
        train_map_only(&mut pair, &dataset, 1500, 42);
        let err = mean_displacement_error(&pair, &dataset, &g);
        let scale = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!(err < 0.05 * scale, "{err}");
    }

    #[test]
    fn gap_vanishes_when_map_is_optimal() {
        let g = [1.0, 2.0];
        let pair = linear_pair(&g, &g);
        let dataset = shift_dataset(&g);
        let budget = ProbeBudget { map_iterations: 500, batch_size: 64, learning_rate: 1e-2, eval_samples: 500, pair_outer_iterations: 0 };
        let report = duality_gap_estimate(&pair, &dataset, &NotConfig::default(), &budget, &Rng::new(5)).unwrap();
        assert!(report.epsilon1_estimate < 1e-6, "{report:?}");
        assert!(report.epsilon2_estimate.is_none());
    }

    #[test]
    fn divergence_guard_trips_on_huge_loss() {
        assert!(matches!(guard(7, 2e8), Err(Error::Divergence { iteration: 7, .. })));
        assert!(matches!(guard(0, f64::NAN), Err(Error::Divergence { .. })));
        assert!(guard(0, -1e7).is_ok());
    }

    #[test]
    fn config_rejects_small_w() {
        let cfg = NotConfig { extremal: true, w: 0.5, ..NotConfig::default() };
        assert!(cfg.validate().is_err());
        let dataset = shift_dataset(&[1.0, 0.0]);
        assert!(xnot_train(&dataset, &cfg, &Rng::new(1), &mut NotTrace::default()).is_err());
        assert_eq!(NotConfig::default().inner_steps, 10);
        assert_eq!(NotConfig::extremal_default().w, 12.0);
    }

    #[test]
    fn plain_and_extremal_paths_coincide_at_unit_weight() {
        let dataset = shift_dataset(&[1.0, 1.0]);
        let cfg = NotConfig { outer_iterations: 20, hidden_dims: vec![16, 16], log_every: 10, eval_samples: 32, ..NotConfig::default() };
        let mut ta = NotTrace::default();
        let mut tb = NotTrace::default();
        let a = not_train(&dataset, &cfg, &Rng::new(77), &mut ta).unwrap();
        let b = xnot_train(&dataset, &cfg, &Rng::new(77), &mut tb).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(ta.checkpoints.len(), 2);
    }

    #[test]
    fn mixture_labels_follow_weights() {
        let a = Sampler::isotropic(vec![0.0], 0.1).unwrap();
        let b = Sampler::isotropic(vec![10.0], 0.1).unwrap();
        let mix = Sampler::mixture(vec![3.0, 1.0], vec![a, b]).unwrap();
        let (x, labels) = mix.sample_labeled(4000, &mut Rng::new(1)).unwrap();
        let frac = labels.iter().filter(|&&l| l == 1).count() as f64 / 4000.0;
        assert!((frac - 0.25).abs() < 0.03, "{frac}");
        for (i, &l) in labels.iter().enumerate() {
            assert!((x.get(i, 0) - 10.0 * l as f64).abs() < 1.0);
        }
    }
}
