//! Adam with a per-step cosine-annealed learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SidError};
use crate::network::ParamTensors;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    /// Steps taken so far.
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Length of the cosine schedule.
    pub total_steps: u64,
}

impl OptimizerState {
    pub fn new(num_params: usize, lr: f64, total_steps: u64) -> Self {
        OptimizerState {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps,
        }
    }

    /// `(1 + cos(pi t / T)) / 2` at the current step counter.
    pub fn schedule_factor(&self) -> f64 {
        if self.total_steps == 0 {
            return 1.0;
        }
        let t = self.step.min(self.total_steps) as f64 / self.total_steps as f64;
        0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn current_lr(&self) -> f64 {
        self.lr * self.schedule_factor()
    }
}

/// One bias-corrected Adam update; the step size comes from the schedule at
/// the step counter before it is incremented.
pub fn adam_step<P, G>(params: &mut P, grads: &G, state: &mut OptimizerState) -> Result<()>
where
    P: ParamTensors,
    G: ParamTensors,
{
    let n = params.num_params();
    if grads.num_params() != n || state.first_moment.len() != n {
        return Err(SidError::dim(format!(
            "adam: {n} parameters, {} gradients, {} moment slots",
            grads.num_params(),
            state.first_moment.len()
        )));
    }
    let lr = state.current_lr();
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let mut idx = 0;
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        for (w, &gi) in p.iter_mut().zip(g) {
            let m = &mut state.first_moment[idx];
            let v = &mut state.second_moment[idx];
            *m = b1 * *m + (1.0 - b1) * gi;
            *v = b2 * *v + (1.0 - b2) * gi * gi;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
            idx += 1;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Linear;

    fn layer(vals: &[f64]) -> Linear {
        let mut l = Linear::zeros(vals.len() - 1, 1);
        l.assign_flat(vals);
        l
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = layer(&[0.5, -0.25, 1.0]);
        let before = p.flatten();
        let mut st = OptimizerState::new(3, 1e-3, 100);
        st.first_moment = vec![0.1, 0.2, 0.3];
        st.second_moment = vec![0.0; 3];
        let g = layer(&[0.0, 0.0, 0.0]);
        adam_step(&mut p, &g, &mut st).unwrap();
        assert!((st.first_moment[0] - 0.09).abs() < 1e-15);
        // nonzero first moment still moves parameters; with both moments zero nothing moves
        let mut st = OptimizerState::new(3, 1e-3, 100);
        let mut q = layer(&[0.5, -0.25, 1.0]);
        adam_step(&mut q, &g, &mut st).unwrap();
        assert_eq!(q.flatten(), before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = layer(&[0.0, 0.0, 0.0]);
        let g = layer(&[3.0, -0.01, 250.0]);
        let mut st = OptimizerState::new(3, 1e-3, 1000);
        adam_step(&mut p, &g, &mut st).unwrap();
        let flat = p.flatten();
        assert!((flat[0] + 1e-3).abs() < 1e-9);
        assert!((flat[1] - 1e-3).abs() < 1e-9);
        assert!((flat[2] + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn schedule_endpoint_freezes_params() {
        let mut p = layer(&[0.3, 0.4]);
        let g = layer(&[1.0, 1.0]);
        let mut st = OptimizerState::new(2, 1e-2, 10);
        st.step = 10;
        adam_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p.flatten(), vec![0.3, 0.4]);
        let st = OptimizerState::new(2, 1e-2, 10);
        assert_eq!(st.schedule_factor(), 1.0);
        let half = OptimizerState { step: 5, ..st };
        assert!((half.schedule_factor() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = layer(&[0.3, 0.4]);
        let g = layer(&[1.0, 1.0, 2.0]);
        let mut st = OptimizerState::new(2, 1e-2, 10);
        assert!(adam_step(&mut p, &g, &mut st).is_err());
    }
}
