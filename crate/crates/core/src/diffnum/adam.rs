use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one slot per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            moments: Vec::new(),
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
///
/// Frozen parameters are never touched. A trainable parameter without a
/// gradient is an error.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, cfg: &AdamConfig, state: &mut AdamState<T>) -> Result<()> {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).filter(|&id| store.is_trainable(id)).collect();
    for &id in &ids {
        if store.get(id).grad.is_none() {
            return Err(Error::MissingGradient(store.get(id).name.clone()));
        }
    }
    if state.moments.len() < store.len() {
        state.moments.resize(store.len(), None);
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::one() - T::lit(cfg.beta1.powi(t));
    let bc2 = T::one() - T::lit(cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for id in ids {
        let p = store.get_mut(id);
        let n = p.value.numel();
        let (m, v) = state.moments[id.index()].get_or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        let grad = p.grad.as_ref().expect("checked above").data();
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnum::Tensor;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add_group("live", true);
        s.add_group("frozen", false);
        s.add("w", "live", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        s.add("f", "frozen", Tensor::new(&[2], vec![0.1, 0.2]).unwrap()).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store();
        let w = s.id("w").unwrap();
        s.accumulate_grad(w, &[0.3, -4.0, 1e-3]).unwrap();
        let cfg = AdamConfig::with_lr(0.01);
        let mut st = AdamState::new();
        adam_step(&mut s, &cfg, &mut st).unwrap();
        let got = s.value(w).data();
        let want = [1.0 - 0.01 * 0.3 / (0.3 + 1e-8), -2.0 + 0.01 * 4.0 / (4.0 + 1e-8), 0.5 - 0.01 * 1e-3 / (1e-3 + 1e-8)];
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn frozen_group_is_bitwise_untouched() {
        let mut s = store();
        let w = s.id("w").unwrap();
        let f = s.id("f").unwrap();
        let before: Vec<u64> = s.value(f).data().iter().map(|v| v.to_bits()).collect();
        let mut st = AdamState::new();
        for k in 0..100 {
            s.zero_grads();
            s.accumulate_grad(w, &[k as f64, 1.0, -1.0]).unwrap();
            s.accumulate_grad(f, &[5.0, -5.0]).unwrap();
            adam_step(&mut s, &AdamConfig::default(), &mut st).unwrap();
        }
        let after: Vec<u64> = s.value(f).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
        assert_ne!(s.value(w).data()[1], -2.0);
    }

    #[test]
    fn missing_gradient_is_reported() {
        let mut s = store();
        let err = adam_step(&mut s, &AdamConfig::default(), &mut AdamState::new()).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "w"));
    }
}
