//! Adam with bias correction, plus global-norm gradient clipping.

use crate::model::{NamedArray, OptimizerState};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: OptimizerState,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &[NamedArray]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
        Self::with_state(
            learning_rate,
            OptimizerState {
                step: 0,
                first_moment: zeros.clone(),
                second_moment: zeros,
            },
        )
    }

    pub fn with_state(learning_rate: f64, state: OptimizerState) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state,
        }
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn step(&mut self, params: &mut [NamedArray], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter array");
        self.state.step += 1;
        let t = self.state.step as i32;
        let correction1 = 1.0 - self.beta1.powi(t);
        let correction2 = 1.0 - self.beta2.powi(t);
        let moments = self.state.first_moment.iter_mut().zip(self.state.second_moment.iter_mut());
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(moments) {
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                p.values[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arrays(values: Vec<f64>) -> Vec<NamedArray> {
        vec![NamedArray {
            name: "w".into(),
            shape: vec![values.len()],
            values,
        }]
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = arrays(vec![1.0, -2.0]);
        let mut adam = Adam::new(0.1, &p);
        adam.step(&mut p, &[vec![0.5, -3.0]]);
        // bias-corrected first step is lr * sign(g)
        assert!((p[0].values[0] - 0.9).abs() < 1e-7);
        assert!((p[0].values[1] + 1.9).abs() < 1e-7);
        assert_eq!(adam.state().step, 1);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = arrays(vec![3.0]);
        let mut adam = Adam::new(0.05, &p);
        for _ in 0..2000 {
            let g = vec![vec![2.0 * p[0].values[0]]];
            adam.step(&mut p, &g);
        }
        assert!(p[0].values[0].abs() < 1e-3);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
