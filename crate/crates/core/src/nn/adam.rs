//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::{ModelParams, NnError, ParamGrads};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments, one buffer per trainable tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let mut p = params.clone();
        let shapes: Vec<usize> = p.trainable_slices_mut().iter().map(|s| s.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One Adam update of `params` in place. Non-finite gradients reject the
    /// whole step and leave both params and state untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads, lr: f64) -> Result<(), NnError> {
        let g = grads.slices();
        let mut p = params.trainable_slices_mut();
        if g.len() != p.len() || g.len() != self.m.len() {
            return Err(NnError::Shape { what: "gradient tensors", expected: p.len(), found: g.len() });
        }
        for ((gi, pi), mi) in g.iter().zip(&p).zip(&self.m) {
            if gi.len() != pi.len() || gi.len() != mi.len() {
                return Err(NnError::Shape { what: "gradient tensor length", expected: pi.len(), found: gi.len() });
            }
        }
        if g.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(NnError::NonFiniteGradient);
        }

        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (((pi, gi), mi), vi) in p.iter_mut().zip(&g).zip(&mut self.m).zip(&mut self.v) {
            for j in 0..pi.len() {
                let grad = gi[j];
                mi[j] = BETA1 * mi[j] + (1.0 - BETA1) * grad;
                vi[j] = BETA2 * vi[j] + (1.0 - BETA2) * grad * grad;
                let m_hat = mi[j] / bc1;
                let v_hat = vi[j] / bc2;
                pi[j] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_network, Mode, NetworkSpec, OutputKind};
    use ndarray::Array2;

    fn scalar_net() -> ModelParams {
        let spec = NetworkSpec::new(vec![1, 1], vec![], OutputKind::Linear).unwrap();
        let mut p = init_network(&spec, 0);
        p.layers[0].weight[[0, 0]] = 0.25;
        p
    }

    fn grads_with(p: &ModelParams, w: f64, b: f64) -> ParamGrads {
        let x = Array2::from_elem((1, 1), 1.0);
        let (out, tape) = p.forward(x.view(), Mode::Eval).unwrap();
        let mut g = p.backward(&tape, Array2::zeros(out.dim()).view()).unwrap();
        g.layers[0].weight[[0, 0]] = w;
        g.layers[0].bias[0] = b;
        g
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut p = scalar_net();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let g = grads_with(&p, 0.0, 0.0);
        for _ in 0..3 {
            s.step(&mut p, &g, 3e-4).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.steps(), 3);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let mut p = scalar_net();
        let mut s = AdamState::new(&p);
        let g = grads_with(&p, 0.5, 0.0);
        s.step(&mut p, &g, 0.0003).unwrap();
        // m_hat = g, v_hat = g^2 on step one
        let expected = -0.0003 * 0.5 / ((0.5f64 * 0.5).sqrt() + 1e-8);
        assert!((p.layers[0].weight[[0, 0]] - 0.25 - expected).abs() < 1e-15);
        assert!((expected + 0.0003).abs() < 1e-10);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = scalar_net();
            let mut s = AdamState::new(&p);
            for k in 0..5 {
                let g = grads_with(&p, 0.1 * k as f64 - 0.2, 0.3);
                s.step(&mut p, &g, 1e-2).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_non_finite() {
        let mut p = scalar_net();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let g = grads_with(&p, f64::NAN, 0.0);
        assert!(matches!(s.step(&mut p, &g, 1e-3), Err(NnError::NonFiniteGradient)));
        assert_eq!(p, before);
        assert_eq!(s.steps(), 0);
    }
}
