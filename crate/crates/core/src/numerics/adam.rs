//! Adam with decoupled weight decay (AdamW).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    /// Decoupled: applied as `p -= lr * weight_decay * p` before the moment step.
    pub weight_decay: f64,
    step: u64,
    first_moments: Vec<f64>,
    second_moments: Vec<f64>,
}

impl AdamState {
    /// Betas default to (0.9, 0.999) and epsilon to 1e-8.
    pub fn new(param_count: usize, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            weight_decay,
            step: 0,
            first_moments: vec![0.0; param_count],
            second_moments: vec![0.0; param_count],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Parameters are left untouched if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moments.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam state for {} parameters got {} params and {} grads",
                self.first_moments.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite { what: "gradient", index });
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.learning_rate;
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moments.iter_mut())
            .zip(self.second_moments.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut adam = AdamState::new(3, 0.1, 0.0);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..10 {
            adam.step(&mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.step_count(), 10);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut adam = AdamState::new(2, 0.01, 0.0);
        let mut p = vec![0.0, 0.0];
        for _ in 0..100 {
            adam.step(&mut p, &[2.5, -0.3]).unwrap();
        }
        assert!(p[0] < 0.0 && p[1] > 0.0);
    }

    #[test]
    fn quadratic_converges_and_matches_scalar_recurrence() {
        let mut adam = AdamState::new(1, 0.1, 0.0);
        let mut p = [0.0];
        // scalar recurrence written out independently
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for k in 1..=500 {
            let g = 2.0 * (p[0] - 3.0);
            adam.step(&mut p, &[g]).unwrap();
            let gx = 2.0 * (x - 3.0);
            m = 0.9 * m + 0.1 * gx;
            v = 0.999 * v + 0.001 * gx * gx;
            let mh = m / (1.0 - 0.9f64.powi(k));
            let vh = v / (1.0 - 0.999f64.powi(k));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0] - 3.0).abs() < 1e-2, "x = {}", p[0]);
        assert!((p[0] - x).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_shrinks() {
        let mut adam = AdamState::new(1, 0.1, 0.5);
        let mut p = [2.0];
        adam.step(&mut p, &[0.0]).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_reports_index() {
        let mut adam = AdamState::new(3, 0.1, 0.0);
        let mut p = [0.0; 3];
        let err = adam.step(&mut p, &[0.0, 1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 2, .. }));
        assert_eq!(adam.step_count(), 0);
        assert!(adam.step(&mut p, &[0.0; 2]).is_err());
    }
}
