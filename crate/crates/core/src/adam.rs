//! Adam optimizer over a `ParameterSet`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.98;
pub const DEFAULT_EPS: f64 = 1e-6;

/// Per-parameter first/second moments plus the step counter. The state
/// owns a fixed set of parameter names; names outside the set (for
/// example a frozen frontend) are never touched.
pub struct AdamState<S: Scalar> {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: BTreeMap<String, Vec<S>>,
    v: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParameterSet<S>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let names = params.names();
        Self::for_names(params, &names, beta1, beta2, eps)
    }

    pub fn with_defaults(params: &ParameterSet<S>) -> Self {
        Self::new(params, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS)
    }

    /// State over a subset of parameters (the trainable ones).
    pub fn for_names(
        params: &ParameterSet<S>,
        names: &[String],
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for name in names {
            let t = params.get(name).expect("adam state over unknown parameter");
            m.insert(name.clone(), vec![S::ZERO; t.len()]);
            v.insert(name.clone(), vec![S::ZERO; t.len()]);
        }
        AdamState {
            step: 0,
            beta1,
            beta2,
            eps,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn owned_names(&self) -> Vec<String> {
        self.m.keys().cloned().collect()
    }

    pub fn hyperparams(&self) -> (f64, f64, f64) {
        (self.beta1, self.beta2, self.eps)
    }

    pub fn moments(&self, name: &str) -> Option<(&[S], &[S])> {
        match (self.m.get(name), self.v.get(name)) {
            (Some(m), Some(v)) => Some((m.as_slice(), v.as_slice())),
            _ => None,
        }
    }

    /// Restore moments and step counter, e.g. when resuming a run.
    pub fn restore(
        &mut self,
        step: u64,
        moments: impl IntoIterator<Item = (String, Vec<S>, Vec<S>)>,
    ) -> Result<()> {
        self.step = step;
        for (name, m, v) in moments {
            let slot_m = self
                .m
                .get_mut(&name)
                .ok_or_else(|| Error::Optim(format!("restore: unknown parameter `{name}`")))?;
            if slot_m.len() != m.len() || self.v[&name].len() != v.len() {
                return Err(Error::Optim(format!(
                    "restore: moment size mismatch for `{name}`"
                )));
            }
            *slot_m = m;
            self.v.insert(name, v);
        }
        Ok(())
    }
}

/// One Adam update over the parameters owned by `state`. Requires every
/// owned parameter to carry a gradient; clears those gradients by
/// swapping in fresh leaf tensors.
pub fn adam_step<S: Scalar>(
    params: &mut ParameterSet<S>,
    state: &mut AdamState<S>,
    lr: f64,
) -> Result<()> {
    let t = state.step + 1;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    let b1 = S::from_f64(state.beta1);
    let b2 = S::from_f64(state.beta2);
    let one_m_b1 = S::from_f64(1.0 - state.beta1);
    let one_m_b2 = S::from_f64(1.0 - state.beta2);
    let inv_bc1 = S::from_f64(1.0 / bc1);
    let inv_bc2 = S::from_f64(1.0 / bc2);
    let eps = S::from_f64(state.eps);
    let lr_s = S::from_f64(lr);

    let names: Vec<String> = state.m.keys().cloned().collect();
    for name in &names {
        let param = params.get(name)?;
        let grad = param
            .grad()
            .ok_or_else(|| Error::Optim(format!("missing gradient for `{name}`")))?;
        let m = state.m.get_mut(name).unwrap();
        let v = state.v.get_mut(name).unwrap();
        let mut new_data = param.data().to_vec();
        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + one_m_b1 * g;
            v[i] = b2 * v[i] + one_m_b2 * g * g;
            let m_hat = m[i] * inv_bc1;
            let v_hat = v[i] * inv_bc2;
            new_data[i] = new_data[i] - lr_s * m_hat / (v_hat.sqrt_v() + eps);
        }
        let dims = param.dims().to_vec();
        params.replace(name, Tensor::param(&dims, new_data))?;
    }
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::forward_backward;

    #[test]
    fn one_step_decreases_quadratic() {
        let mut ps: ParameterSet<f64> = ParameterSet::new();
        ps.insert("w", Tensor::param(&[1], vec![1.0])).unwrap();
        let mut adam = AdamState::with_defaults(&ps);
        let f = |ps: &ParameterSet<f64>| {
            let w = ps.get("w").unwrap();
            w.mul(w).sum_all()
        };
        let before = f(&ps).item();
        forward_backward(&f(&ps)).unwrap();
        adam_step(&mut ps, &mut adam, 0.1).unwrap();
        let after = f(&ps).item();
        assert!(after < before, "{after} !< {before}");
        assert_eq!(adam.step_count(), 1);
        assert!(ps.get("w").unwrap().grad().is_none(), "grads not cleared");
    }

    #[test]
    fn zero_grad_means_no_drift() {
        let mut ps: ParameterSet<f64> = ParameterSet::new();
        ps.insert("w", Tensor::param(&[2], vec![0.5, -0.25])).unwrap();
        let mut adam = AdamState::with_defaults(&ps);
        // Loss independent of w: gradient is exactly zero.
        let w = ps.get("w").unwrap();
        let zero = w.scale(0.0).sum_all();
        forward_backward(&zero).unwrap();
        adam_step(&mut ps, &mut adam, 0.1).unwrap();
        let after = ps.get("w").unwrap().data().to_vec();
        assert!((after[0] - 0.5).abs() < 1e-12);
        assert!((after[1] + 0.25).abs() < 1e-12);
    }

    #[test]
    fn lr_zero_is_identity() {
        let mut ps: ParameterSet<f64> = ParameterSet::new();
        ps.insert("w", Tensor::param(&[2], vec![1.0, 2.0])).unwrap();
        let mut adam = AdamState::with_defaults(&ps);
        let w = ps.get("w").unwrap();
        forward_backward(&w.mul(w).sum_all()).unwrap();
        adam_step(&mut ps, &mut adam, 0.0).unwrap();
        assert_eq!(ps.get("w").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn converges_on_2d_quadratic() {
        let mut ps: ParameterSet<f64> = ParameterSet::new();
        ps.insert("w", Tensor::param(&[2], vec![1.0, -1.0])).unwrap();
        let mut adam = AdamState::with_defaults(&ps);
        for _ in 0..500 {
            let w = ps.get("w").unwrap();
            forward_backward(&w.mul(w).sum_all()).unwrap();
            adam_step(&mut ps, &mut adam, 0.05).unwrap();
        }
        let w = ps.get("w").unwrap().data().to_vec();
        let norm = (w[0] * w[0] + w[1] * w[1]).sqrt();
        assert!(norm < 1e-3, "|w| = {norm}");
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut ps: ParameterSet<f64> = ParameterSet::new();
        ps.insert("w", Tensor::param(&[1], vec![1.0])).unwrap();
        let mut adam = AdamState::with_defaults(&ps);
        assert!(adam_step(&mut ps, &mut adam, 0.1).is_err());
    }

    #[test]
    fn subset_state_skips_frozen_names() {
        let mut ps: ParameterSet<f64> = ParameterSet::new();
        ps.insert("frontend.w", Tensor::param(&[1], vec![3.0])).unwrap();
        ps.insert("encoder.w", Tensor::param(&[1], vec![1.0])).unwrap();
        let trainable = ps.names_with_prefix("encoder.");
        let mut adam = AdamState::for_names(&ps, &trainable, 0.9, 0.98, 1e-6);
        let e = ps.get("encoder.w").unwrap();
        forward_backward(&e.mul(e).sum_all()).unwrap();
        adam_step(&mut ps, &mut adam, 0.1).unwrap();
        assert_eq!(ps.get("frontend.w").unwrap().data(), &[3.0]);
        assert_ne!(ps.get("encoder.w").unwrap().data(), &[1.0]);
    }
}
