//! Adam optimizer with decoupled weight decay.

use super::params::ParamVector;
use crate::{Error, Result};

/// Adam with decoupled weight decay over a flat parameter vector.
///
/// Moment buffers are owned by the optimizer and indexed positionally, so
/// swapping the parameter values (for instance after a blend) leaves the
/// moments untouched.
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step_count: u64,
}

impl AdamW {
    pub fn new(n_params: usize) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step_count: 0,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update in place: `params -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * params)`.
    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector, lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::contract(
                "AdamW::step",
                format!("optimizer sized for {} params, got {}", self.m.len(), params.len()),
            ));
        }
        if grad.len() != params.len() {
            return Err(Error::contract(
                "AdamW::step",
                format!("gradient has {} entries, params have {}", grad.len(), params.len()),
            ));
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let g = grad.flat();
        let p = params.flat_mut();
        for i in 0..g.len() {
            let gi = g[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gi;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gi * gi;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p[i]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::params::ParamLayout;
    use std::sync::Arc;

    fn vec_params(values: Vec<f64>) -> ParamVector {
        let layout =
            Arc::new(ParamLayout::new(vec![("x".to_string(), vec![values.len()])]).unwrap());
        ParamVector::from_flat(layout, values).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        // With zero-initialized moments and bias correction, the first update
        // is lr * g / (|g| + eps') which is approximately lr * sign(g).
        let mut p = vec_params(vec![1.0, -2.0, 0.5]);
        let g = vec_params(vec![10.0, -0.01, 0.0]);
        let mut opt = AdamW::new(3);
        opt.step(&mut p, &g, 0.1).unwrap();
        assert!((p.flat()[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p.flat()[1] - (-2.0 + 0.1)).abs() < 1e-6);
        assert_eq!(p.flat()[2], 0.5);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut p = vec_params(vec![3.0, -4.0]);
        let mut opt = AdamW::new(2);
        for _ in 0..2000 {
            let g = vec_params(p.flat().iter().map(|x| 2.0 * x).collect());
            opt.step(&mut p, &g, 0.01).unwrap();
        }
        assert!(p.flat().iter().all(|x| x.abs() < 1e-3), "params {:?}", p.flat());
    }

    #[test]
    fn decoupled_decay_shrinks_params_without_gradient() {
        let mut p = vec_params(vec![1.0]);
        let g = vec_params(vec![0.0]);
        let mut opt = AdamW::new(1).with_weight_decay(0.1);
        opt.step(&mut p, &g, 0.5).unwrap();
        // No gradient signal, so the only change is -lr * wd * p.
        assert!((p.flat()[0] - (1.0 - 0.5 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let mut p = vec_params(vec![1.0, 2.0]);
        let g = vec_params(vec![1.0]);
        let mut opt = AdamW::new(2);
        assert!(opt.step(&mut p, &g, 0.1).is_err());
    }
}
