use std::f64::consts::PI;

use super::{ParamSet, TensorError};

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// First and second moments, aligned with the parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

impl AdamW {
    /// One update with learning rate `lr`. Non-trainable parameters are skipped.
    pub fn step(
        &self,
        params: &mut ParamSet,
        grads: &[Vec<f64>],
        state: &mut AdamWState,
        lr: f64,
    ) -> Result<(), TensorError> {
        if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
            return Err(TensorError::StateShapeMismatch(format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            let n = p.values.len();
            if grads[i].len() != n || state.m[i].len() != n || state.v[i].len() != n {
                return Err(TensorError::StateShapeMismatch(p.name.clone()));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for (j, w) in p.values.iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                *w *= 1.0 - lr * self.weight_decay;
                *w -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `step == total_steps`.
/// Steps past the end stay at `lr_min`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_min;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Parameter;

    fn single(value: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert(Parameter {
            name: "w".into(),
            shape: vec![1],
            values: vec![value],
            trainable: true,
        })
        .unwrap();
        ps
    }

    #[test]
    fn first_step_closed_form() {
        // After bias correction the first step moves by lr * g / (|g| + eps).
        let opt = AdamW::default();
        let mut ps = single(1.0);
        let mut st = AdamWState::new(&ps);
        opt.step(&mut ps, &[vec![0.5]], &mut st, 0.01).unwrap();
        let expected = 1.0 * (1.0 - 0.01 * 0.1) - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((ps.get("w").unwrap().values[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decay_only_with_zero_gradient() {
        let opt = AdamW::default();
        let mut ps = single(2.0);
        let mut st = AdamWState::new(&ps);
        for _ in 0..3 {
            opt.step(&mut ps, &[vec![0.0]], &mut st, 0.1).unwrap();
        }
        let expected = 2.0 * (1.0f64 - 0.01).powi(3);
        assert!((ps.get("w").unwrap().values[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_untouched() {
        let opt = AdamW::default();
        let mut ps = single(2.0);
        ps.set_trainable(false);
        let mut st = AdamWState::new(&ps);
        opt.step(&mut ps, &[vec![1.0]], &mut st, 0.1).unwrap();
        assert_eq!(ps.get("w").unwrap().values[0], 2.0);
    }

    #[test]
    fn mismatched_state_rejected() {
        let opt = AdamW::default();
        let mut ps = single(2.0);
        let mut st = AdamWState::new(&ps);
        assert!(opt.step(&mut ps, &[vec![1.0, 2.0]], &mut st, 0.1).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 1e-4, 1e-6), 1e-4);
        assert!((cosine_lr(10, 10, 1e-4, 1e-6) - 1e-6).abs() < 1e-20);
        let mid = cosine_lr(5, 10, 1e-4, 1e-6);
        assert!((mid - (1e-4 + 1e-6) / 2.0).abs() < 1e-18);
        assert!(cosine_lr(3, 10, 1e-4, 1e-6) > cosine_lr(4, 10, 1e-4, 1e-6));
        assert_eq!(cosine_lr(12, 10, 1e-4, 1e-6), cosine_lr(10, 10, 1e-4, 1e-6));
    }
}
