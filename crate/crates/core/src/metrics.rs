//! Wasserstein-2 and Fréchet distances, and the `FD ≤ 2·W2²` check.
//!
//! Two cost conventions meet here. [`w2_squared_empirical`] reports the
//! transport cost under `½‖x − y‖²`, like the OT module. The Gaussian
//! formulas, the Fréchet distance and [`MetricReport::w2_squared`] use the
//! unit convention `‖x − y‖²`, which is twice the former.
//!
//! Gaussian fits use the `1/n` (empirical-measure) covariance. With that
//! normalisation the fitted Gaussians carry exactly the first two moments of
//! the empirical measures, and the Gelbrich bound makes
//! `FD(X, Y) ≤ 2·Ŵ2²(X, Y)` hold exactly for the optimal coupling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matrix_inv_sqrt_pd, matrix_sqrt_psd, symmetric_eig, Matrix, PSD_TOLERANCE};
use crate::ot::{
    assignment, cost_matrix, exact_ot, round_to_feasible, sinkhorn, uniform_marginal, CostKind, SinkhornConfig, ASSIGNMENT_MAX_SIZE,
    EXACT_OT_MAX_SIZE,
};

/// Shrinkage `λ = SHRINKAGE · trace(Σ) / d` added when `n ≤ d`.
pub const SHRINKAGE: f64 = 1e-6;

/// Slack allowed in [`theorem1_check`] beyond the estimator tolerance.
pub const THEOREM1_TOLERANCE: f64 = 1e-8;

/// Entropic regularisation of the Sinkhorn W2 estimate, relative to the mean cost.
pub const SINKHORN_W2_EPSILON: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub covariance: Matrix,
    pub sample_count: usize,
}

impl GaussianStats {
    /// Moment fit with `1/n` covariance; shrinks toward `λI` when `n ≤ d`.
    pub fn fit(x: &Matrix) -> Result<Self> {
        let (n, d) = x.shape();
        if n == 0 || d == 0 {
            return Err(Error::Validation(format!("cannot fit a Gaussian to a {n}x{d} sample")));
        }
        x.check_finite("samples")?;
        let mean = x.col_means();
        let neg: Vec<f64> = mean.iter().map(|m| -m).collect();
        let centered = x.add_row_vector(&neg)?;
        let mut covariance = centered.matmul_tn(&centered)?.scale(1.0 / n as f64).symmetrize()?;
        if n <= d {
            let lambda = SHRINKAGE * covariance.trace() / d as f64;
            if !(lambda > 0.0) {
                return Err(Error::Domain(format!(
                    "degenerate covariance fit from {n} identical samples in {d} dims; supply more samples"
                )));
            }
            for i in 0..d {
                covariance.set(i, i, covariance.get(i, i) + lambda);
            }
        }
        Ok(Self { mean, covariance, sample_count: n })
    }

    pub fn new(mean: Vec<f64>, covariance: Matrix) -> Result<Self> {
        let stats = Self { mean, covariance, sample_count: 0 };
        stats.validate()?;
        Ok(stats)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Square, symmetric within 1e-10, no eigenvalue below the PSD tolerance.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.covariance.shape() != (d, d) {
            return Err(Error::Shape(format!("covariance is {:?}, mean has length {d}", self.covariance.shape())));
        }
        let asym = self.covariance.max_abs_diff(&self.covariance.transpose())?;
        if asym > 1e-10 {
            return Err(Error::Domain(format!("covariance is not symmetric (max asymmetry {asym:e})")));
        }
        let (values, _) = symmetric_eig(&self.covariance)?;
        let scale = values.last().copied().unwrap_or(0.0).max(1.0);
        if values.first().is_some_and(|&v| v < -PSD_TOLERANCE * scale) {
            return Err(Error::Domain("covariance is not positive semidefinite".into()));
        }
        Ok(())
    }
}

fn require_same_dim(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.cols() != y.cols() {
        return Err(Error::Shape(format!("feature dims differ: {} vs {}", x.cols(), y.cols())));
    }
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::Validation("empty sample".into()));
    }
    Ok(())
}

/// Estimator behind [`w2_squared_empirical`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum W2Mode {
    /// Exact OT, `n = m ≤ 64`.
    ExactSmall,
    /// Exact assignment, `n = m ≤ 2048`.
    Assignment,
    /// `⟨C, π_ε⟩`; biased upward by the entropic term.
    Sinkhorn,
}

impl W2Mode {
    pub fn name(self) -> &'static str {
        match self {
            W2Mode::ExactSmall => "exact_small",
            W2Mode::Assignment => "assignment",
            W2Mode::Sinkhorn => "sinkhorn",
        }
    }

    /// Exact where the sizes allow it, Sinkhorn otherwise.
    pub fn auto(n: usize, m: usize) -> Self {
        if n == m && n <= EXACT_OT_MAX_SIZE {
            W2Mode::ExactSmall
        } else if n == m && n <= ASSIGNMENT_MAX_SIZE {
            W2Mode::Assignment
        } else {
            W2Mode::Sinkhorn
        }
    }
}

impl std::str::FromStr for W2Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact_small" | "exact" => Ok(W2Mode::ExactSmall),
            "assignment" => Ok(W2Mode::Assignment),
            "sinkhorn" => Ok(W2Mode::Sinkhorn),
            other => Err(Error::Validation(format!("unknown W2 mode `{other}`"))),
        }
    }
}

/// Optimal transport cost between uniform empirical measures under `½‖x − y‖²`.
pub fn w2_squared_empirical(x: &Matrix, y: &Matrix, mode: W2Mode) -> Result<f64> {
    require_same_dim(x, y)?;
    let (n, m) = (x.rows(), y.rows());
    match mode {
        W2Mode::ExactSmall | W2Mode::Assignment => {
            let limit = if mode == W2Mode::ExactSmall { EXACT_OT_MAX_SIZE } else { ASSIGNMENT_MAX_SIZE };
            if n != m || n > limit {
                return Err(Error::Capacity(format!(
                    "{} W2 needs n = m <= {limit}, got {n} and {m}; use sinkhorn mode",
                    mode.name()
                )));
            }
            let c = cost_matrix(x, y, CostKind::SquaredEuclidean)?;
            if mode == W2Mode::ExactSmall {
                Ok(exact_ot(&c, &uniform_marginal(n), &uniform_marginal(m))?.cost)
            } else {
                Ok(assignment(&c)?.1)
            }
        }
        W2Mode::Sinkhorn => {
            let c = cost_matrix(x, y, CostKind::SquaredEuclidean)?;
            let mean = c.mean();
            if mean == 0.0 {
                return Ok(0.0);
            }
            let cfg = SinkhornConfig { tolerance: 1e-9, ..SinkhornConfig::with_epsilon(SINKHORN_W2_EPSILON * mean) };
            let plan = sinkhorn(&c, &uniform_marginal(n), &uniform_marginal(m), &cfg)?;
            Ok(round_to_feasible(&plan).transport_cost(&c))
        }
    }
}

/// `‖m₁ − m₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₂^½ Σ₁ Σ₂^½)^½)`, unit convention.
pub fn w2_squared_gaussian(g1: &GaussianStats, g2: &GaussianStats) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(Error::Shape(format!("Gaussian dims differ: {} vs {}", g1.dim(), g2.dim())));
    }
    g1.validate()?;
    g2.validate()?;
    let mean_term: f64 = g1.mean.iter().zip(&g2.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let s2 = matrix_sqrt_psd(&g2.covariance)?;
    let cross = s2.matmul(&g1.covariance)?.matmul(&s2)?;
    let (values, _) = symmetric_eig(&cross)?;
    let scale = values.last().copied().unwrap_or(0.0).max(1.0);
    if values.first().is_some_and(|&v| v < -PSD_TOLERANCE * scale) {
        return Err(Error::Domain("Gaussian W2: cross-covariance term is not PSD".into()));
    }
    let cross_trace: f64 = values.iter().map(|v| v.max(0.0).sqrt()).sum();
    let total = mean_term + g1.covariance.trace() + g2.covariance.trace() - 2.0 * cross_trace;
    Ok(total.max(0.0))
}

/// Affine map `T(x) = A(x − m₁) + m₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    pub a: Matrix,
    pub source_mean: Vec<f64>,
    pub target_mean: Vec<f64>,
}

impl AffineMap {
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let neg: Vec<f64> = self.source_mean.iter().map(|m| -m).collect();
        x.add_row_vector(&neg)?.matmul_nt(&self.a)?.add_row_vector(&self.target_mean)
    }
}

/// Optimal map between Gaussians: `A = Σ₁^{-½}(Σ₁^½ Σ₂ Σ₁^½)^½ Σ₁^{-½}`.
pub fn gaussian_ot_map(g1: &GaussianStats, g2: &GaussianStats) -> Result<AffineMap> {
    if g1.dim() != g2.dim() {
        return Err(Error::Shape(format!("Gaussian dims differ: {} vs {}", g1.dim(), g2.dim())));
    }
    g1.validate()?;
    g2.validate()?;
    let inv_sqrt = matrix_inv_sqrt_pd(&g1.covariance)?;
    let sqrt1 = matrix_sqrt_psd(&g1.covariance)?;
    let middle = matrix_sqrt_psd(&sqrt1.matmul(&g2.covariance)?.matmul(&sqrt1)?.symmetrize()?)?;
    let a = inv_sqrt.matmul(&middle)?.matmul(&inv_sqrt)?.symmetrize()?;
    Ok(AffineMap { a, source_mean: g1.mean.clone(), target_mean: g2.mean.clone() })
}

/// W2² (unit convention) between Gaussian fits of `x` and `y`.
pub fn frechet_distance(x: &Matrix, y: &Matrix) -> Result<f64> {
    require_same_dim(x, y)?;
    w2_squared_gaussian(&GaussianStats::fit(x)?, &GaussianStats::fit(y)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub fd: f64,
    /// `2·Ŵ2²` under `½‖·‖²`, i.e. the unit-convention empirical W2².
    pub two_w2_squared: f64,
    /// Extra slack for the W2 estimator; zero for exact estimators.
    pub estimator_tolerance: f64,
    pub holds: bool,
    pub mode: W2Mode,
}

/// Evaluates `FD(X, Y) ≤ 2·Ŵ2²(X, Y) + tol` with the identity feature map.
pub fn theorem1_check(x: &Matrix, y: &Matrix, mode: W2Mode) -> Result<Theorem1Report> {
    let fd = frechet_distance(x, y)?;
    let two_w2_squared = 2.0 * w2_squared_empirical(x, y, mode)?;
    // exact and entropic plans both upper-bound the optimal cost, which
    // in turn bounds FD of the 1/n moment fits
    let estimator_tolerance = 0.0;
    let holds = fd <= two_w2_squared + THEOREM1_TOLERANCE + estimator_tolerance;
    Ok(Theorem1Report { fd, two_w2_squared, estimator_tolerance, holds, mode })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Unit convention `‖x − y‖²`.
    pub w2_squared: f64,
    pub frechet_distance: f64,
    pub notes: Vec<String>,
    pub n_source: usize,
    pub n_target: usize,
}

pub fn metric_report(x: &Matrix, y: &Matrix, mode: W2Mode) -> Result<MetricReport> {
    let w2_squared = 2.0 * w2_squared_empirical(x, y, mode)?;
    let frechet_distance = frechet_distance(x, y)?;
    let mut notes = vec![
        format!("w2 estimator: {}", mode.name()),
        "w2_squared uses the unit cost ||x-y||^2 (twice the 1/2-cost value)".to_string(),
        "frechet distance computed with the identity feature map".to_string(),
    ];
    if mode == W2Mode::Sinkhorn {
        notes.push(format!(
            "sinkhorn estimate at epsilon = {SINKHORN_W2_EPSILON} x mean cost; biased upward by the entropic term"
        ));
    }
    if x.rows() <= x.cols() || y.rows() <= y.cols() {
        notes.push(format!("covariance shrinkage {SHRINKAGE} x trace/d applied (n <= d)"));
    }
    Ok(MetricReport { w2_squared, frechet_distance, notes, n_source: x.rows(), n_target: y.rows() })
}
