//! Bias-corrected Adam over a list of flat parameter buffers.

use serde::{Deserialize, Serialize};

use crate::error::AutodiffError;

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Fresh state for parameters of the given flat lengths.
    pub fn new(learning_rate: f64, sizes: &[usize]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Registers a new parameter buffer with zero moments.
    pub fn push_param(&mut self, size: usize) {
        self.first_moment.push(vec![0.0; size]);
        self.second_moment.push(vec![0.0; size]);
    }

    pub fn param_count(&self) -> usize {
        self.first_moment.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.first_moment.iter().map(Vec::len).collect()
    }

    /// Moment buffers in parameter order, for checkpointing.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first_moment, &self.second_moment)
    }

    pub fn set_moments(&mut self, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) {
        self.first_moment = first;
        self.second_moment = second;
    }
}

/// One Adam update. Parameters are left untouched when any gradient entry
/// is non-finite.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
) -> Result<(), AutodiffError> {
    if params.len() != grads.len() || params.len() != state.param_count() {
        return Err(AutodiffError::ParamCount {
            params: params.len(),
            grads: grads.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first_moment[i].len() {
            return Err(AutodiffError::shape(
                "adam_step",
                (p.len(), 1),
                (g.len(), 1),
            ));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFiniteGradient(i));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let lr = state.learning_rate;
    let eps = state.epsilon;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(1e-3, &[2]);
        adam_step(&mut [&mut p], &[&[0.0, 0.0]], &mut st).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_is_signed_learning_rate() {
        let mut p = vec![0.0, 0.0, 0.0];
        let mut st = AdamState::new(1e-3, &[3]);
        adam_step(&mut [&mut p], &[&[0.5, -3.0, 20.0]], &mut st).unwrap();
        for (x, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - s * 1e-3).abs() < 1e-6, "{x}");
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = vec![1.0];
        let mut st = AdamState::new(1e-3, &[1]);
        let err = adam_step(&mut [&mut p], &[&[f64::NAN]], &mut st).unwrap_err();
        assert_eq!(err, AutodiffError::NonFiniteGradient(0));
        assert_eq!(p, vec![1.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn quadratic_bowl_descends() {
        // f(x) = sum (x_i - c_i)^2
        let c = [0.3, -0.8, 1.5];
        let mut x = vec![2.0, 2.0, -2.0];
        let mut st = AdamState::new(1e-3, &[3]);
        let loss = |x: &[f64]| x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let mut prev = loss(&x);
        for step in 0..500 {
            let g: Vec<f64> = x.iter().zip(c).map(|(a, b)| 2.0 * (a - b)).collect();
            adam_step(&mut [&mut x], &[&g], &mut st).unwrap();
            let l = loss(&x);
            if step >= 10 {
                assert!(l < prev, "step {step}: {l} >= {prev}");
            }
            prev = l;
        }
    }
}
