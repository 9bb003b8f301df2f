//! Exact discrete OT for small problems.
//!
//! Equal sizes with uniform weights reduce to an assignment problem, solved
//! with the O(n³) Hungarian method. Everything else goes through successive
//! shortest paths on the bipartite transportation network, with Dijkstra on
//! reduced costs.

use super::cost::CostMatrix;
use super::plan::TransportPlan;
use super::sinkhorn::validate_marginal;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Largest side accepted by [`exact_ot`].
pub const EXACT_OT_MAX_SIZE: usize = 64;

/// Largest side accepted by [`assignment`] when called directly.
pub const ASSIGNMENT_MAX_SIZE: usize = 2048;

#[derive(Clone, Debug)]
pub struct ExactSolution {
    pub plan: TransportPlan,
    pub cost: f64,
}

const UNIFORM_TOLERANCE: f64 = 1e-12;

fn is_uniform(p: &[f64]) -> bool {
    let u = 1.0 / p.len() as f64;
    p.iter().all(|&v| (v - u).abs() <= UNIFORM_TOLERANCE)
}

/// Optimal plan for `⟨C, π⟩` under marginals `a`, `b`; both sides at most
/// [`EXACT_OT_MAX_SIZE`].
pub fn exact_ot(cost: &CostMatrix, a: &[f64], b: &[f64]) -> Result<ExactSolution> {
    let (m, n) = (cost.rows(), cost.cols());
    if m > EXACT_OT_MAX_SIZE || n > EXACT_OT_MAX_SIZE {
        return Err(Error::Capacity(format!(
            "exact OT is limited to {EXACT_OT_MAX_SIZE}x{EXACT_OT_MAX_SIZE}, got {m}x{n}; use the sinkhorn estimate instead"
        )));
    }
    if m == 0 || n == 0 {
        return Err(Error::Validation("exact OT on an empty cost matrix".into()));
    }
    validate_marginal(a, m, "a")?;
    validate_marginal(b, n, "b")?;
    cost.values.check_finite("cost matrix").map_err(|e| Error::Validation(e.to_string()))?;

    if m == n && is_uniform(a) && is_uniform(b) {
        let perm = hungarian(&cost.values);
        return Ok(permutation_solution(cost, &perm, a.to_vec(), b.to_vec()));
    }
    let (coupling, augmentations) = successive_shortest_paths(&cost.values, a, b)?;
    let plan = TransportPlan::new(coupling, a.to_vec(), b.to_vec(), 0.0, augmentations);
    let cost_value = plan.transport_cost(cost);
    Ok(ExactSolution { plan, cost: cost_value })
}

/// Optimal assignment for a square cost matrix with uniform weights.
///
/// `perm[i]` is the column matched to row `i`; the returned cost is the mean
/// matched cost, i.e. `⟨C, π⟩` for the uniform plan.
pub fn assignment(cost: &CostMatrix) -> Result<(Vec<usize>, f64)> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(Error::Shape(format!("assignment needs a square cost, got {}x{}", n, cost.cols())));
    }
    if n > ASSIGNMENT_MAX_SIZE {
        return Err(Error::Capacity(format!("assignment is limited to n <= {ASSIGNMENT_MAX_SIZE}, got {n}")));
    }
    if n == 0 {
        return Err(Error::Validation("assignment on an empty cost matrix".into()));
    }
    cost.values.check_finite("cost matrix").map_err(|e| Error::Validation(e.to_string()))?;
    let perm = hungarian(&cost.values);
    let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost.values.get(i, j)).sum();
    Ok((perm, total / n as f64))
}

fn permutation_solution(cost: &CostMatrix, perm: &[usize], a: Vec<f64>, b: Vec<f64>) -> ExactSolution {
    let n = perm.len();
    let mut coupling = Matrix::zeros(n, n);
    for (i, &j) in perm.iter().enumerate() {
        coupling.set(i, j, 1.0 / n as f64);
    }
    let plan = TransportPlan::new(coupling, a, b, 0.0, n);
    let cost_value = plan.transport_cost(cost);
    ExactSolution { plan, cost: cost_value }
}

/// Hungarian method with row/column potentials (shortest augmenting path form).
fn hungarian(c: &Matrix) -> Vec<usize> {
    let n = c.rows();
    // 1-based arrays; column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[matched_row[j] - 1] = j - 1;
    }
    perm
}

const MASS_EPS: f64 = 1e-15;

/// Min-cost transportation by successive shortest augmenting paths.
///
/// Nodes `0..m` are sources and `m..m+n` sinks. Forward arcs `i → j` are
/// uncapacitated with cost `C_ij`; a reverse arc `j → i` with cost `−C_ij`
/// exists while `flow_ij > 0`. Node potentials keep reduced costs
/// nonnegative so Dijkstra applies.
fn successive_shortest_paths(c: &Matrix, a: &[f64], b: &[f64]) -> Result<(Matrix, usize)> {
    let (m, n) = c.shape();
    let nodes = m + n;
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut flow = Matrix::zeros(m, n);
    let mut pot = vec![0.0; nodes];
    for j in 0..n {
        pot[m + j] = (0..m).map(|i| c.get(i, j)).fold(f64::INFINITY, f64::min);
    }
    let limit = 4 * nodes * nodes + 16;
    let mut augmentations = 0;
    let mut dist = vec![0.0; nodes];
    let mut done = vec![false; nodes];
    let mut parent = vec![usize::MAX; nodes];

    while supply.iter().any(|&s| s > MASS_EPS) && demand.iter().any(|&d| d > MASS_EPS) {
        if augmentations >= limit {
            return Err(Error::Domain("exact OT: augmenting-path limit reached".into()));
        }
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        done.iter_mut().for_each(|d| *d = false);
        parent.iter_mut().for_each(|p| *p = usize::MAX);
        for i in 0..m {
            if supply[i] > MASS_EPS {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for v in 0..nodes {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < m {
                for j in 0..n {
                    let v = m + j;
                    if done[v] {
                        continue;
                    }
                    let nd = dist[u] + (c.get(u, j) + pot[u] - pot[v]).max(0.0);
                    if nd < dist[v] {
                        dist[v] = nd;
                        parent[v] = u;
                    }
                }
            } else {
                let j = u - m;
                for i in 0..m {
                    if done[i] || flow.get(i, j) <= MASS_EPS {
                        continue;
                    }
                    let nd = dist[u] + (-c.get(i, j) + pot[u] - pot[i]).max(0.0);
                    if nd < dist[i] {
                        dist[i] = nd;
                        parent[i] = u;
                    }
                }
            }
        }
        let target = (0..n)
            .filter(|&j| demand[j] > MASS_EPS && dist[m + j].is_finite())
            .min_by(|&x, &y| dist[m + x].total_cmp(&dist[m + y]).then(x.cmp(&y)))
            .ok_or_else(|| Error::Domain("exact OT: no augmenting path".into()))?;
        let reach = dist[m + target];
        for v in 0..nodes {
            pot[v] += dist[v].min(reach);
        }

        let mut delta = demand[target];
        let mut v = m + target;
        while parent[v] != usize::MAX {
            let u = parent[v];
            if u >= m {
                // reverse arc sink u -> source v cancels flow
                delta = delta.min(flow.get(v, u - m));
            }
            v = u;
        }
        let root = v;
        delta = delta.min(supply[root]);

        let mut v = m + target;
        while parent[v] != usize::MAX {
            let u = parent[v];
            if u < m {
                let j = v - m;
                flow.set(u, j, flow.get(u, j) + delta);
            } else {
                let j = u - m;
                let f = flow.get(v, j) - delta;
                flow.set(v, j, if f <= MASS_EPS { 0.0 } else { f });
            }
            v = u;
        }
        supply[root] -= delta;
        demand[target] -= delta;
        if supply[root] <= MASS_EPS {
            supply[root] = 0.0;
        }
        if demand[target] <= MASS_EPS {
            demand[target] = 0.0;
        }
        augmentations += 1;
    }
    Ok((flow, augmentations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::ot::cost::{cost_matrix, CostKind};
    use crate::ot::sinkhorn::uniform_marginal;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute_force_assignment(c: &Matrix) -> f64 {
        let n = c.rows();
        permutations(n)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum::<f64>() / n as f64)
            .fold(f64::INFINITY, f64::min)
    }

    fn random_cost(m: usize, n: usize, rng: &mut Rng) -> CostMatrix {
        let mut v = Matrix::zeros(m, n);
        rng.fill_uniform(v.as_mut_slice());
        CostMatrix { values: v, kind: CostKind::SquaredEuclidean }
    }

    #[test]
    fn one_by_one() {
        let c = CostMatrix { values: Matrix::filled(1, 1, 2.5), kind: CostKind::SquaredEuclidean };
        let sol = exact_ot(&c, &[1.0], &[1.0]).unwrap();
        assert_eq!(sol.plan.coupling.as_slice(), &[1.0]);
        assert_eq!(sol.cost, 2.5);
    }

    #[test]
    fn one_dimensional_identity_matching() {
        let x = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let c = cost_matrix(&x, &x, CostKind::SquaredEuclidean).unwrap();
        // enumerate both permutations: identity costs 0, swap costs 0.5
        let sol = exact_ot(&c, &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!(sol.cost, 0.0);
        assert_eq!(sol.plan.coupling.get(0, 0), 0.5);
        assert_eq!(sol.plan.coupling.get(1, 1), 0.5);
    }

    #[test]
    fn three_by_three_matches_all_permutations() {
        let mut rng = Rng::new(31);
        for _ in 0..20 {
            let c = random_cost(3, 3, &mut rng);
            let u = uniform_marginal(3);
            let sol = exact_ot(&c, &u, &u).unwrap();
            assert!((sol.cost - brute_force_assignment(&c.values)).abs() < 1e-12);
        }
    }

    #[test]
    fn shortest_paths_agree_with_hungarian() {
        let mut rng = Rng::new(8);
        for n in 1..=7 {
            let c = random_cost(n, n, &mut rng);
            let u = uniform_marginal(n);
            let (flow, _) = successive_shortest_paths(&c.values, &u, &u).unwrap();
            let plan = TransportPlan::new(flow, u.clone(), u.clone(), 0.0, 0);
            assert!(plan.marginal_error < 1e-12);
            let exact = brute_force_assignment(&c.values);
            assert!((plan.transport_cost(&c) - exact).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn general_marginals_satisfy_constraints_and_beat_sinkhorn() {
        let mut rng = Rng::new(21);
        for (m, n) in [(3, 5), (7, 4), (10, 10), (1, 6)] {
            let c = random_cost(m, n, &mut rng);
            let mut a: Vec<f64> = (0..m).map(|_| rng.uniform() + 0.1).collect();
            let mut b: Vec<f64> = (0..n).map(|_| rng.uniform() + 0.1).collect();
            let sa: f64 = a.iter().sum();
            let sb: f64 = b.iter().sum();
            a.iter_mut().for_each(|v| *v /= sa);
            b.iter_mut().for_each(|v| *v /= sb);
            let sol = exact_ot(&c, &a, &b).unwrap();
            assert!(sol.plan.marginal_error < 1e-12);
            assert!(sol.plan.coupling.as_slice().iter().all(|&p| p >= 0.0));
            let cfg = crate::ot::SinkhornConfig { epsilon: 0.01, tolerance: 1e-12, ..Default::default() };
            let ent = crate::ot::sinkhorn(&c, &a, &b, &cfg).unwrap();
            assert!(sol.cost <= ent.transport_cost(&c) + 1e-10);
        }
    }

    #[test]
    fn capacity_limit() {
        let c = CostMatrix { values: Matrix::zeros(65, 2), kind: CostKind::SquaredEuclidean };
        let err = exact_ot(&c, &uniform_marginal(65), &uniform_marginal(2)).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
    }

    #[test]
    fn assignment_mean_cost() {
        let mut rng = Rng::new(2);
        let c = random_cost(6, 6, &mut rng);
        let (perm, mean) = assignment(&c).unwrap();
        let mut seen = perm.clone();
        seen.sort();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
        assert!((mean - brute_force_assignment(&c.values)).abs() < 1e-12);
    }
}
