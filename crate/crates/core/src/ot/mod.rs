//! Discrete optimal transport: cost matrices, entropic Sinkhorn, exact plans.

pub mod cost;
pub mod exact;
pub mod plan;
pub mod sinkhorn;

pub use cost::{cost_matrix, CostKind, CostMatrix};
pub use exact::{assignment, exact_ot, ExactSolution, ASSIGNMENT_MAX_SIZE, EXACT_OT_MAX_SIZE};
pub use plan::{
    plan_barycentric_map, plan_top_k_map, round_to_feasible, sample_pairs_from_plan, top_k_indices, PlanSampler, SampledPairs,
    TransportPlan,
};
pub use sinkhorn::{sinkhorn, uniform_marginal, validate_marginal, SinkhornConfig};
