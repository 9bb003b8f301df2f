//! Transport plans and what can be read off them.

use std::cmp::Ordering;

use super::cost::CostMatrix;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// A coupling between `m` source and `n` target atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub coupling: Matrix,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    /// Entropic regularization used; 0 for exact plans.
    pub epsilon: f64,
    pub iterations_used: usize,
    /// `max(|rowsum − a|, |colsum − b|)` of `coupling`.
    pub marginal_error: f64,
    pub converged: bool,
}

impl TransportPlan {
    pub fn new(coupling: Matrix, row_marginal: Vec<f64>, col_marginal: Vec<f64>, epsilon: f64, iterations_used: usize) -> Self {
        let mut plan = Self {
            coupling,
            row_marginal,
            col_marginal,
            epsilon,
            iterations_used,
            marginal_error: 0.0,
            converged: true,
        };
        plan.marginal_error = plan.marginal_deviation();
        plan
    }

    pub fn rows(&self) -> usize {
        self.coupling.rows()
    }

    pub fn cols(&self) -> usize {
        self.coupling.cols()
    }

    /// Recomputes the max absolute marginal deviation from the coupling.
    pub fn marginal_deviation(&self) -> f64 {
        let rows = self.coupling.row_sums();
        let cols = self.coupling.col_sums();
        let r = rows.iter().zip(&self.row_marginal).map(|(s, a)| (s - a).abs());
        let c = cols.iter().zip(&self.col_marginal).map(|(s, b)| (s - b).abs());
        r.chain(c).fold(0.0, f64::max)
    }

    /// `⟨C, π⟩`
    pub fn transport_cost(&self, cost: &CostMatrix) -> f64 {
        self.coupling.as_slice().iter().zip(cost.values.as_slice()).map(|(p, c)| p * c).sum()
    }

    pub fn transpose(&self) -> TransportPlan {
        TransportPlan {
            coupling: self.coupling.transpose(),
            row_marginal: self.col_marginal.clone(),
            col_marginal: self.row_marginal.clone(),
            ..self.clone()
        }
    }

    /// Column receiving the most mass from each row; ties go to the lower index.
    pub fn row_argmax(&self) -> Vec<usize> {
        (0..self.rows()).map(|i| top_k_indices(self.coupling.row(i), 1)[0]).collect()
    }
}

/// Projects an approximately feasible plan onto the transport polytope.
///
/// Rows, then columns, are scaled down to at most their target mass, and the
/// remaining deficit is filled by the rank-one product of the row and column
/// shortfalls. The result has the exact marginals up to rounding, so its cost
/// is a valid upper bound on the optimal cost.
pub fn round_to_feasible(plan: &TransportPlan) -> TransportPlan {
    let (m, n) = (plan.rows(), plan.cols());
    let mut p = plan.coupling.clone();
    let rows = p.row_sums();
    for i in 0..m {
        let s = if rows[i] > plan.row_marginal[i] { plan.row_marginal[i] / rows[i] } else { 1.0 };
        p.row_mut(i).iter_mut().for_each(|v| *v *= s);
    }
    let cols = p.col_sums();
    let col_scale: Vec<f64> =
        (0..n).map(|j| if cols[j] > plan.col_marginal[j] { plan.col_marginal[j] / cols[j] } else { 1.0 }).collect();
    for i in 0..m {
        p.row_mut(i).iter_mut().zip(&col_scale).for_each(|(v, s)| *v *= s);
    }
    let rows = p.row_sums();
    let cols = p.col_sums();
    let err_r: Vec<f64> = (0..m).map(|i| (plan.row_marginal[i] - rows[i]).max(0.0)).collect();
    let err_c: Vec<f64> = (0..n).map(|j| (plan.col_marginal[j] - cols[j]).max(0.0)).collect();
    let total: f64 = err_r.iter().sum();
    if total > 0.0 {
        for i in 0..m {
            let ri = err_r[i] / total;
            p.row_mut(i).iter_mut().zip(&err_c).for_each(|(v, c)| *v += ri * c);
        }
    }
    let mut out = TransportPlan::new(p, plan.row_marginal.clone(), plan.col_marginal.clone(), plan.epsilon, plan.iterations_used);
    out.converged = plan.converged;
    out
}

/// Indices of the `k` largest values, largest first; equal values keep index order.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let by_value_desc = |&a: &usize, &b: &usize| match values[b].total_cmp(&values[a]) {
        Ordering::Equal => a.cmp(&b),
        other => other,
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k, by_value_desc);
        idx.truncate(k);
    }
    idx.sort_by(by_value_desc);
    idx
}

fn mean_of_rows(y: &Matrix, indices: &[usize], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for &j in indices {
        for (o, &v) in out.iter_mut().zip(y.row(j)) {
            *o += v;
        }
    }
    let k = indices.len() as f64;
    out.iter_mut().for_each(|v| *v /= k);
}

fn check_plan_targets(plan: &TransportPlan, y: &Matrix) -> Result<()> {
    if plan.cols() != y.rows() {
        return Err(Error::Shape(format!("plan has {} columns but target has {} rows", plan.cols(), y.rows())));
    }
    Ok(())
}

/// Replaces each source atom by the unweighted mean of the `k` targets it
/// sends the most mass to (ties: lower column index).
pub fn plan_top_k_map(plan: &TransportPlan, y: &Matrix, k: usize) -> Result<Matrix> {
    check_plan_targets(plan, y)?;
    if k == 0 || k > y.rows() {
        return Err(Error::Validation(format!("top-k needs 1 <= k <= {}, got {k}", y.rows())));
    }
    let mut out = Matrix::zeros(plan.rows(), y.cols());
    for i in 0..plan.rows() {
        let idx = top_k_indices(plan.coupling.row(i), k);
        mean_of_rows(y, &idx, out.row_mut(i));
    }
    Ok(out)
}

/// Coupling-weighted mean of the targets for each source atom.
pub fn plan_barycentric_map(plan: &TransportPlan, y: &Matrix) -> Result<Matrix> {
    check_plan_targets(plan, y)?;
    let out = plan.coupling.matmul(y)?;
    let mass = plan.coupling.row_sums();
    let mut out = out;
    for (i, &w) in mass.iter().enumerate() {
        if !(w > 0.0) {
            return Err(Error::Domain(format!("barycentric map: source row {i} carries no mass")));
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= w);
    }
    Ok(out)
}

/// Draws index pairs `(i, j)` with probability `π_ij / Σπ`.
#[derive(Clone, Debug)]
pub struct PlanSampler {
    cumulative: Vec<f64>,
    cols: usize,
}

impl PlanSampler {
    pub fn new(plan: &TransportPlan) -> Result<Self> {
        let mut acc = 0.0;
        let mut cumulative = Vec::with_capacity(plan.coupling.as_slice().len());
        for (k, &p) in plan.coupling.as_slice().iter().enumerate() {
            if !(p >= 0.0 && p.is_finite()) {
                return Err(Error::Validation(format!("plan entry {k} = {p} is not a probability")));
            }
            acc += p;
            cumulative.push(acc);
        }
        if !(acc > 0.0) {
            return Err(Error::Validation("plan carries no mass".into()));
        }
        Ok(Self { cumulative, cols: plan.cols() })
    }

    pub fn sample_index(&self, rng: &mut Rng) -> (usize, usize) {
        let total = *self.cumulative.last().expect("non-empty plan");
        let u = rng.uniform() * total;
        // first cell whose cumulative mass exceeds u; empty cells are never selected
        let k = self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1);
        (k / self.cols, k % self.cols)
    }

    pub fn sample_indices(&self, count: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
        (0..count).map(|_| self.sample_index(rng)).collect()
    }
}

/// Pairs of feature rows drawn i.i.d. from a plan.
#[derive(Clone, Debug)]
pub struct SampledPairs {
    pub source: Matrix,
    pub target: Matrix,
    pub indices: Vec<(usize, usize)>,
}

pub fn sample_pairs_from_plan(
    plan: &TransportPlan,
    x: &Matrix,
    y: &Matrix,
    count: usize,
    rng: &mut Rng,
) -> Result<SampledPairs> {
    if plan.rows() != x.rows() {
        return Err(Error::Shape(format!("plan has {} rows but source has {}", plan.rows(), x.rows())));
    }
    check_plan_targets(plan, y)?;
    let sampler = PlanSampler::new(plan)?;
    let indices = sampler.sample_indices(count, rng);
    let (src, tgt): (Vec<usize>, Vec<usize>) = indices.iter().copied().unzip();
    Ok(SampledPairs { source: x.select_rows(&src), target: y.select_rows(&tgt), indices })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan_from(rows: &[&[f64]]) -> TransportPlan {
        let c = Matrix::from_rows(rows).unwrap();
        let a = c.row_sums();
        let b = c.col_sums();
        TransportPlan::new(c, a, b, 0.0, 0)
    }

    fn permutation_plan(perm: &[usize]) -> TransportPlan {
        let n = perm.len();
        let mut c = Matrix::zeros(n, n);
        for (i, &j) in perm.iter().enumerate() {
            c.set(i, j, 1.0 / n as f64);
        }
        TransportPlan::new(c, vec![1.0 / n as f64; n], vec![1.0 / n as f64; n], 0.0, 0)
    }

    fn targets(n: usize, d: usize) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|v| v as f64 * 0.5 - 1.0).collect()).unwrap()
    }

    #[test]
    fn top_one_follows_permutation() {
        let perm = [2, 0, 3, 1];
        let y = targets(4, 3);
        let out = plan_top_k_map(&permutation_plan(&perm), &y, 1).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            assert_eq!(out.row(i), y.row(j));
        }
    }

    #[test]
    fn top_all_is_column_mean() {
        let y = targets(5, 2);
        let plan = plan_from(&[&[0.1, 0.05, 0.02, 0.01, 0.02], &[0.0, 0.3, 0.2, 0.1, 0.2]]);
        let out = plan_top_k_map(&plan, &y, 5).unwrap();
        let mean = y.col_means();
        for i in 0..2 {
            for (a, b) in out.row(i).iter().zip(&mean) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn top_four_hand_computed() {
        let y = targets(6, 2);
        let plan = plan_from(&[&[0.3, 0.25, 0.2, 0.15, 0.07, 0.03]]);
        let out = plan_top_k_map(&plan, &y, 4).unwrap();
        // rows 0..4 of y are (-1,-.5), (0,.5), (1,1.5), (2,2.5): mean (0.5, 1.0)
        assert_eq!(out.row(0), &[0.5, 1.0]);
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[0.2, 0.5, 0.5, 0.2, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.1, 0.1, 0.1], 1), vec![0]);
        assert_eq!(top_k_indices(&[0.0, 0.3, 0.1, 0.3], 4), vec![1, 3, 2, 0]);
    }

    #[test]
    fn top_k_bounds() {
        let y = targets(3, 2);
        let plan = permutation_plan(&[0, 1, 2]);
        assert!(plan_top_k_map(&plan, &y, 0).is_err());
        assert!(plan_top_k_map(&plan, &y, 4).is_err());
        assert!(plan_top_k_map(&plan, &targets(4, 2), 1).is_err());
    }

    #[test]
    fn barycentric_special_cases() {
        let y = targets(3, 2);
        let id = permutation_plan(&[0, 1, 2]);
        assert!(plan_barycentric_map(&id, &y).unwrap().max_abs_diff(&y).unwrap() < 1e-15);
        let uniform = plan_from(&[&[1.0 / 9.0; 3], &[1.0 / 9.0; 3], &[1.0 / 9.0; 3]]);
        let out = plan_barycentric_map(&uniform, &y).unwrap();
        let mean = y.col_means();
        for i in 0..3 {
            for (a, b) in out.row(i).iter().zip(&mean) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        let empty_row = plan_from(&[&[0.5, 0.5, 0.0], &[0.0, 0.0, 0.0]]);
        assert!(matches!(plan_barycentric_map(&empty_row, &y), Err(Error::Domain(_))));
    }

    #[test]
    fn barycentric_matches_naive_loop() {
        let mut rng = Rng::new(12);
        let mut c = Matrix::zeros(4, 5);
        rng.fill_uniform(c.as_mut_slice());
        let plan = TransportPlan::new(c.clone(), c.row_sums(), c.col_sums(), 0.1, 1);
        let mut y = Matrix::zeros(5, 3);
        rng.fill_normal(y.as_mut_slice());
        let out = plan_barycentric_map(&plan, &y).unwrap();
        for i in 0..4 {
            let w: f64 = c.row(i).iter().sum();
            for d in 0..3 {
                let mut s = 0.0;
                for j in 0..5 {
                    s += c.get(i, j) * y.get(j, d);
                }
                assert!((out.get(i, d) - s / w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_respects_permutation_and_zero_cells() {
        let perm = [1, 2, 0];
        let plan = permutation_plan(&perm);
        let sampler = PlanSampler::new(&plan).unwrap();
        let mut rng = Rng::new(4);
        for (i, j) in sampler.sample_indices(2000, &mut rng) {
            assert_eq!(perm[i], j);
        }
        let with_zero = plan_from(&[&[0.25, 0.0], &[0.25, 0.5]]);
        let sampler = PlanSampler::new(&with_zero).unwrap();
        assert!(sampler.sample_indices(20_000, &mut rng).iter().all(|&p| p != (0, 1)));
    }

    #[test]
    fn uniform_two_by_two_frequencies() {
        let plan = plan_from(&[&[0.25, 0.25], &[0.25, 0.25]]);
        let x = targets(2, 1);
        let y = targets(2, 1);
        let mut rng = Rng::new(77);
        let pairs = sample_pairs_from_plan(&plan, &x, &y, 100_000, &mut rng).unwrap();
        let mut counts = [[0usize; 2]; 2];
        for &(i, j) in &pairs.indices {
            counts[i][j] += 1;
        }
        for row in counts {
            for c in row {
                assert!((c as f64 / 1e5 - 0.25).abs() < 0.01);
            }
        }
        assert_eq!(pairs.source.rows(), 100_000);
        assert_eq!(pairs.source.get(5, 0), x.get(pairs.indices[5].0, 0));
    }

    #[test]
    fn rounding_restores_marginals() {
        let mut rng = Rng::new(12);
        let mut c = Matrix::zeros(5, 7);
        rng.fill_uniform(c.as_mut_slice());
        let a = vec![0.2; 5];
        let b = vec![1.0 / 7.0; 7];
        let plan = TransportPlan::new(c, a, b, 0.1, 1);
        assert!(plan.marginal_error > 0.01);
        let fixed = round_to_feasible(&plan);
        assert!(fixed.marginal_error < 1e-15);
        assert!(fixed.coupling.as_slice().iter().all(|&v| v >= 0.0));
    }
}
