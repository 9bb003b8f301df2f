//! Dense linear algebra, seeded randomness, small MLPs and Adam.

mod adam;
mod linalg;
mod matrix;
mod mlp;
mod rng;

pub use adam::AdamState;
pub use linalg::{cholesky, matrix_inv_sqrt_pd, matrix_sqrt_psd, symmetric_eig, PSD_TOLERANCE};
pub use matrix::{dot, logsumexp, norm, squared_distance, Matrix};
pub use mlp::{Activation, ForwardTrace, MlpGradients, MlpModel};
pub use rng::{streams, Rng};

/// Central finite-difference check of an analytic gradient.
///
/// Returns the largest relative error `|a - n| / max(|a|, |n|, floor)` over
/// all coordinates, where `n` uses step `h`.
pub fn max_relative_gradient_error(
    params: &[f64],
    analytic: &[f64],
    h: f64,
    floor: f64,
    mut objective: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for k in 0..params.len() {
        probe[k] = params[k] + h;
        let plus = objective(&probe);
        probe[k] = params[k] - h;
        let minus = objective(&probe);
        probe[k] = params[k];
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}
