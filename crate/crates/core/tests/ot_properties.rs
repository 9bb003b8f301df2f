use otvc_core::numerics::{Matrix, Rng};
use otvc_core::ot::{cost_matrix, exact_ot, sinkhorn, CostKind, CostMatrix, SinkhornConfig};
use proptest::prelude::*;

fn points(n: usize, d: usize, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::zeros(n, d);
    rng.fill_normal(m.as_mut_slice());
    m
}

fn probability(n: usize, rng: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| 0.2 + rng.uniform()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn tight(epsilon: f64) -> SinkhornConfig {
    SinkhornConfig { epsilon, max_iterations: 200_000, tolerance: 1e-13, log_domain: true }
}

fn instance(seed: u64, m: usize, n: usize) -> (CostMatrix, Vec<f64>, Vec<f64>) {
    let mut rng = Rng::new(seed);
    let x = points(m, 3, &mut rng);
    let y = points(n, 3, &mut rng);
    let c = cost_matrix(&x, &y, CostKind::SquaredEuclidean).unwrap();
    (c, probability(m, &mut rng), probability(n, &mut rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn converged_plans_are_feasible(seed in any::<u64>(), m in 1usize..20, n in 1usize..20, eps in 0.05f64..2.0) {
        let (c, a, b) = instance(seed, m, n);
        let cfg = SinkhornConfig::with_epsilon(eps);
        let plan = sinkhorn(&c, &a, &b, &cfg).unwrap();
        if plan.converged {
            let rows = plan.coupling.row_sums();
            let cols = plan.coupling.col_sums();
            let dev = rows.iter().zip(&a).chain(cols.iter().zip(&b)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            prop_assert!(dev < cfg.tolerance);
        }
        prop_assert!(plan.coupling.as_slice().iter().all(|&p| p >= 0.0));
        prop_assert!((plan.coupling.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transposed_problem_gives_transposed_plan(seed in any::<u64>(), m in 1usize..12, n in 1usize..12, eps in 0.2f64..2.0) {
        let (c, a, b) = instance(seed, m, n);
        let p = sinkhorn(&c, &a, &b, &tight(eps)).unwrap();
        let q = sinkhorn(&c.transpose(), &b, &a, &tight(eps)).unwrap();
        prop_assert!(p.converged && q.converged);
        prop_assert!(p.coupling.transpose().max_abs_diff(&q.coupling).unwrap() < 1e-10);
    }

    #[test]
    fn permuting_sources_permutes_plan_rows(seed in any::<u64>(), m in 2usize..12, n in 1usize..12, eps in 0.1f64..2.0) {
        let mut rng = Rng::new(seed);
        let x = points(m, 2, &mut rng);
        let y = points(n, 2, &mut rng);
        let a = probability(m, &mut rng);
        let b = probability(n, &mut rng);
        let perm = rng.permutation(m);
        let xp = x.select_rows(&perm);
        let ap: Vec<f64> = perm.iter().map(|&i| a[i]).collect();
        let p = sinkhorn(&cost_matrix(&x, &y, CostKind::SquaredEuclidean).unwrap(), &a, &b, &tight(eps)).unwrap();
        let q = sinkhorn(&cost_matrix(&xp, &y, CostKind::SquaredEuclidean).unwrap(), &ap, &b, &tight(eps)).unwrap();
        prop_assert!(p.coupling.select_rows(&perm).max_abs_diff(&q.coupling).unwrap() < 1e-10);
    }

    #[test]
    fn exact_cost_bounds_entropic_cost(seed in any::<u64>(), m in 1usize..10, n in 1usize..10, eps in 0.01f64..2.0) {
        let (c, a, b) = instance(seed, m, n);
        let exact = exact_ot(&c, &a, &b).unwrap();
        let plan = sinkhorn(&c, &a, &b, &tight(eps)).unwrap();
        prop_assert!(exact.cost <= plan.transport_cost(&c) + 1e-10);
    }

    #[test]
    fn smaller_epsilon_never_costs_more(seed in any::<u64>(), m in 2usize..10, n in 2usize..10) {
        let (c, a, b) = instance(seed, m, n);
        let costs: Vec<f64> = [0.5, 0.1, 0.02]
            .iter()
            .map(|&e| sinkhorn(&c, &a, &b, &tight(e)).unwrap().transport_cost(&c))
            .collect();
        prop_assert!(costs[1] <= costs[0] + 1e-9, "{costs:?}");
        prop_assert!(costs[2] <= costs[1] + 1e-9, "{costs:?}");
    }
}
