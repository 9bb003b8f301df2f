//! Entropic OT by Sinkhorn iterations on the dual potentials.
//!
//! With potentials `f` (rows) and `g` (columns) the plan is
//! `π_ij = exp((f_i + g_j − C_ij) / ε)`. Each half-step makes one marginal
//! exact:
//!
//! ```text
//! g_j ← ε log b_j − ε LSE_i((f_i − C_ij) / ε)
//! f_i ← ε log a_i − ε LSE_j((g_j − C_ij) / ε)
//! ```
//!
//! Everything stays in log space, so no kernel `exp(−C/ε)` is ever formed and
//! small ε cannot underflow it.

use serde::{Deserialize, Serialize};

use super::cost::CostMatrix;
use super::plan::TransportPlan;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Stop once the max absolute marginal deviation drops below this.
    pub tolerance: f64,
    /// Always true: the solver only has a log-domain implementation.
    pub log_domain: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { epsilon: 0.1, max_iterations: 10_000, tolerance: 1e-6, log_domain: true }
    }
}

impl SinkhornConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self { epsilon, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Validation(format!("sinkhorn epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Validation(format!("sinkhorn tolerance must be > 0, got {}", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Validation("sinkhorn max_iterations must be >= 1".into()));
        }
        if !self.log_domain {
            return Err(Error::Validation("only the log-domain sinkhorn solver is available".into()));
        }
        Ok(())
    }
}

const MARGINAL_SUM_TOLERANCE: f64 = 1e-9;

/// Checks that `p` is a strictly positive probability vector of length `len`.
pub fn validate_marginal(p: &[f64], len: usize, name: &str) -> Result<()> {
    if p.len() != len {
        return Err(Error::Validation(format!("marginal {name} has length {}, expected {len}", p.len())));
    }
    if let Some(i) = p.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Validation(format!("marginal {name}[{i}] = {} is not strictly positive", p[i])));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > MARGINAL_SUM_TOLERANCE {
        return Err(Error::Validation(format!("marginal {name} sums to {total}, not 1")));
    }
    Ok(())
}

pub fn uniform_marginal(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Solves entropic OT between `a` and `b` under `cost`.
///
/// Hitting `max_iterations` is not an error: the plan comes back with
/// `converged == false` and its actual `marginal_error`.
pub fn sinkhorn(cost: &CostMatrix, a: &[f64], b: &[f64], cfg: &SinkhornConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    let (m, n) = (cost.rows(), cost.cols());
    if m == 0 || n == 0 {
        return Err(Error::Validation("sinkhorn on an empty cost matrix".into()));
    }
    validate_marginal(a, m, "a")?;
    validate_marginal(b, n, "b")?;
    cost.values.check_finite("cost matrix").map_err(|e| Error::Validation(e.to_string()))?;

    let eps = cfg.epsilon;
    let c = cost.values.as_slice();
    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let mut row_lse = vec![0.0; m];
    let mut col_max = vec![0.0; n];
    let mut col_acc = vec![0.0; n];
    let mut row_buf = vec![0.0; n];

    let mut iterations = 0;
    let mut row_error = f64::INFINITY;
    while iterations < cfg.max_iterations {
        iterations += 1;

        // g-update: column LSE of (f_i − C_ij)/ε, accumulated row by row.
        col_max.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        for i in 0..m {
            let ci = &c[i * n..(i + 1) * n];
            for (mx, &cij) in col_max.iter_mut().zip(ci) {
                let v = (f[i] - cij) / eps;
                if v > *mx {
                    *mx = v;
                }
            }
        }
        col_acc.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            let ci = &c[i * n..(i + 1) * n];
            for ((acc, &mx), &cij) in col_acc.iter_mut().zip(&col_max).zip(ci) {
                *acc += ((f[i] - cij) / eps - mx).exp();
            }
        }
        for j in 0..n {
            g[j] = eps * log_b[j] - eps * (col_max[j] + col_acc[j].ln());
        }

        // Row LSE with the new g gives both the current row marginals and the f-update.
        for i in 0..m {
            let ci = &c[i * n..(i + 1) * n];
            for ((r, &gj), &cij) in row_buf.iter_mut().zip(&g).zip(ci) {
                *r = (gj - cij) / eps;
            }
            row_lse[i] = crate::numerics::logsumexp(&row_buf);
        }
        row_error = (0..m).map(|i| ((f[i] / eps + row_lse[i]).exp() - a[i]).abs()).fold(0.0, f64::max);
        if row_error < cfg.tolerance {
            break;
        }
        for i in 0..m {
            f[i] = eps * log_a[i] - eps * row_lse[i];
        }
    }

    let mut coupling = Matrix::zeros(m, n);
    for i in 0..m {
        let ci = &c[i * n..(i + 1) * n];
        for (j, p) in coupling.row_mut(i).iter_mut().enumerate() {
            *p = ((f[i] + g[j] - ci[j]) / eps).exp();
        }
    }
    let mut plan = TransportPlan::new(coupling, a.to_vec(), b.to_vec(), eps, iterations);
    plan.converged = row_error < cfg.tolerance && plan.marginal_error < cfg.tolerance;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::cost::{cost_matrix, CostKind};
    use crate::numerics::Rng;

    fn random_points(n: usize, d: usize, rng: &mut Rng) -> Matrix {
        let mut m = Matrix::zeros(n, d);
        rng.fill_uniform(m.as_mut_slice());
        m
    }

    #[test]
    fn zero_cost_matching_concentrates_mass() {
        let n = 6;
        let perm = [3, 0, 5, 1, 4, 2];
        let mut c = Matrix::filled(n, n, 1.0);
        for (i, &j) in perm.iter().enumerate() {
            c.set(i, j, 0.0);
        }
        let cost = CostMatrix { values: c, kind: CostKind::SquaredEuclidean };
        let u = uniform_marginal(n);
        let plan = sinkhorn(&cost, &u, &u, &SinkhornConfig::with_epsilon(0.01)).unwrap();
        assert!(plan.converged);
        for (i, &j) in perm.iter().enumerate() {
            assert!(plan.coupling.get(i, j) / u[i] >= 0.99);
        }
    }

    #[test]
    fn self_transport_is_nearly_free() {
        let mut rng = Rng::new(3);
        // spread out so that neighbours sit many ε apart
        let x = random_points(20, 2, &mut rng).scale(10.0);
        let cost = cost_matrix(&x, &x, CostKind::SquaredEuclidean).unwrap();
        let u = uniform_marginal(20);
        let plan = sinkhorn(&cost, &u, &u, &SinkhornConfig::with_epsilon(0.01)).unwrap();
        assert!(plan.transport_cost(&cost) < 1e-3 * cost.mean());
    }

    #[test]
    fn rejects_bad_inputs() {
        let cost = CostMatrix { values: Matrix::filled(2, 2, 1.0), kind: CostKind::SquaredEuclidean };
        let u = uniform_marginal(2);
        let cfg = SinkhornConfig::default();
        assert!(matches!(sinkhorn(&cost, &[0.7, 0.7], &u, &cfg), Err(Error::Validation(_))));
        assert!(matches!(sinkhorn(&cost, &[1.0, 0.0], &u, &cfg), Err(Error::Validation(_))));
        assert!(matches!(sinkhorn(&cost, &[1.0], &u, &cfg), Err(Error::Validation(_))));
        let mut bad = cost.clone();
        bad.values.set(0, 1, f64::INFINITY);
        assert!(matches!(sinkhorn(&bad, &u, &u, &cfg), Err(Error::Validation(_))));
        assert!(sinkhorn(&cost, &u, &u, &SinkhornConfig::with_epsilon(0.0)).is_err());
    }

    #[test]
    fn reports_non_convergence() {
        let mut rng = Rng::new(5);
        let x = random_points(10, 2, &mut rng);
        let y = random_points(12, 2, &mut rng);
        let cost = cost_matrix(&x, &y, CostKind::SquaredEuclidean).unwrap();
        let cfg = SinkhornConfig { epsilon: 0.001, max_iterations: 2, tolerance: 1e-12, log_domain: true };
        let plan = sinkhorn(&cost, &uniform_marginal(10), &uniform_marginal(12), &cfg).unwrap();
        assert!(!plan.converged);
        assert_eq!(plan.iterations_used, 2);
        assert!(plan.marginal_error > 0.0);
    }

    #[test]
    fn tiny_epsilon_does_not_underflow() {
        let mut rng = Rng::new(9);
        let x = random_points(8, 3, &mut rng).scale(100.0);
        let y = random_points(8, 3, &mut rng).scale(100.0);
        let cost = cost_matrix(&x, &y, CostKind::SquaredEuclidean).unwrap();
        let u = uniform_marginal(8);
        let cfg = SinkhornConfig { max_iterations: 200, ..SinkhornConfig::with_epsilon(1e-3) };
        let plan = sinkhorn(&cost, &u, &u, &cfg).unwrap();
        assert!(plan.coupling.is_finite());
        assert!((plan.coupling.sum() - 1.0).abs() < 1e-9);
    }
}
