//! AdamW optimizer with decoupled weight decay.
//!
//! Per parameter element, with gradient `g` and step count `t`:
//!
//! ```text
//! m <- b1 m + (1 - b1) g          v <- b2 v + (1 - b2) g^2
//! m_hat = m / (1 - b1^t)          v_hat = v / (1 - b2^t)
//! p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)
//! ```
//!
//! Decay multiplies the parameter directly instead of being folded into the
//! gradient, so it is independent of the adaptive scaling. Parameters whose
//! gradient is absent in a step are skipped entirely: no moment update and
//! no decay.

use crate::error::{MocError, Result};
use crate::nn::graph::Grads;
use crate::nn::store::{ParamId, ParamStore};
use crate::nn::tensor::{sc, Scalar};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug)]
pub struct AdamW<F> {
    lr: F,
    weight_decay: F,
    beta1: F,
    beta2: F,
    eps: F,
    step: u64,
    m: Vec<Option<Vec<F>>>,
    v: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr: sc(lr),
            weight_decay: sc(weight_decay),
            beta1: sc(DEFAULT_BETA1),
            beta2: sc(DEFAULT_BETA2),
            eps: sc(DEFAULT_EPS),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Restores the step counter (used when resuming from a checkpoint).
    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    /// First and second moment buffers for a parameter, if it has ever
    /// received a gradient.
    pub fn moments(&self, id: ParamId) -> Option<(&[F], &[F])> {
        let m = self.m.get(id.index())?.as_deref()?;
        let v = self.v.get(id.index())?.as_deref()?;
        Some((m, v))
    }

    /// Installs moment buffers for a parameter (used when resuming).
    pub fn set_moments(&mut self, id: ParamId, m: Vec<F>, v: Vec<F>) -> Result<()> {
        if m.len() != v.len() {
            return Err(MocError::Argument(format!(
                "optimizer moments for one parameter must match in length, got {} and {}",
                m.len(),
                v.len()
            )));
        }
        let idx = id.index();
        if self.m.len() <= idx {
            self.m.resize_with(idx + 1, || None);
            self.v.resize_with(idx + 1, || None);
        }
        self.m[idx] = Some(m);
        self.v[idx] = Some(v);
        Ok(())
    }

    /// Applies one update from a set of gradients.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Grads<F>) -> Result<()> {
        self.step += 1;
        if self.m.len() < grads.by_param.len() {
            self.m.resize_with(grads.by_param.len(), || None);
            self.v.resize_with(grads.by_param.len(), || None);
        }
        let bc1 = F::one() - self.beta1.powi(self.step as i32);
        let bc2 = F::one() - self.beta2.powi(self.step as i32);
        let one = F::one();
        for (idx, grad) in grads.by_param.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let id = ParamId::from_index(idx);
            let param = store.value_mut(id);
            if param.len() != grad.len() {
                return Err(MocError::Shape(format!(
                    "gradient for parameter {idx} has {} elements, parameter has {}",
                    grad.len(),
                    param.len()
                )));
            }
            let m = self.m[idx].get_or_insert_with(|| vec![F::zero(); grad.len()]);
            let v = self.v[idx].get_or_insert_with(|| vec![F::zero(); grad.len()]);
            let gd = grad.data();
            let pd = param.data_mut();
            for i in 0..gd.len() {
                let g = gd[i];
                m[i] = self.beta1 * m[i] + (one - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (one - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let p = pd[i];
                pd[i] = p - self.lr * self.weight_decay * p - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            param.check_finite("optimizer update")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Grads;
    use crate::nn::tensor::Tensor;

    fn grads_for(store: &ParamStore<f64>, entries: Vec<Option<Tensor<f64>>>) -> Grads<f64> {
        assert_eq!(entries.len(), store.len());
        Grads { by_param: entries }
    }

    #[test]
    fn first_step_moves_by_lr_for_unit_gradient() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", Tensor::new(&[1], vec![1.0]).unwrap());
        let mut opt = AdamW::new(5e-5, 1e-4);
        let grads = grads_for(&store, vec![Some(Tensor::new(&[1], vec![1.0]).unwrap())]);
        opt.step(&mut store, &grads).unwrap();
        // With bias correction the first update is -lr * g/(|g| + eps) plus
        // the decay term -lr * wd * p.
        let expected = 1.0 - 5e-5 * 1e-4 - 5e-5 * (1.0 / (1.0 + 1e-8));
        let got = store.get(p).data()[0];
        assert!((got - expected).abs() < 1e-12, "got {got}, want {expected}");
        assert!((got - 0.99995).abs() < 1e-7);
    }

    #[test]
    fn absent_gradient_means_no_update_at_all() {
        let mut store = ParamStore::<f64>::new();
        let frozen = store.add("frozen", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let active = store.add("active", Tensor::new(&[1], vec![1.0]).unwrap());
        let mut opt = AdamW::new(1e-2, 1e-1);
        let grads = grads_for(
            &store,
            vec![None, Some(Tensor::new(&[1], vec![0.5]).unwrap())],
        );
        opt.step(&mut store, &grads).unwrap();
        assert_eq!(store.get(frozen).data(), &[3.0, -2.0]);
        assert!(store.get(active).data()[0] < 1.0);
        assert!(opt.moments(frozen).is_none());
        assert!(opt.moments(active).is_some());
    }

    #[test]
    fn zero_gradient_still_applies_decoupled_decay() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", Tensor::new(&[1], vec![2.0]).unwrap());
        let mut opt = AdamW::new(1e-3, 1e-2);
        let grads = grads_for(&store, vec![Some(Tensor::new(&[1], vec![0.0]).unwrap())]);
        opt.step(&mut store, &grads).unwrap();
        let expected = 2.0 - 1e-3 * 1e-2 * 2.0;
        let got = store.get(p).data()[0];
        assert!((got - expected).abs() < 1e-15, "got {got}, want {expected}");
    }

    #[test]
    fn moments_round_trip_for_resume() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let mut opt = AdamW::new(1e-3, 0.0);
        let grads = grads_for(&store, vec![Some(Tensor::new(&[2], vec![0.1, -0.2]).unwrap())]);
        opt.step(&mut store, &grads).unwrap();
        let (m, v) = opt.moments(p).expect("moments exist after a step");
        let (m, v) = (m.to_vec(), v.to_vec());

        let mut fresh = AdamW::new(1e-3, 0.0);
        fresh.set_step_count(opt.step_count());
        fresh.set_moments(p, m.clone(), v.clone()).unwrap();
        assert_eq!(fresh.step_count(), 1);
        let (m2, v2) = fresh.moments(p).unwrap();
        assert_eq!(m2, &m[..]);
        assert_eq!(v2, &v[..]);

        // Both optimizers take the same second step.
        let grads2 = grads_for(&store, vec![Some(Tensor::new(&[2], vec![0.3, 0.3]).unwrap())]);
        let mut store2 = store.clone();
        opt.step(&mut store, &grads2).unwrap();
        fresh.step(&mut store2, &grads2).unwrap();
        assert_eq!(store.get(p).data(), store2.get(p).data());
    }

    #[test]
    fn mismatched_gradient_shape_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let _ = store.add("p", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let mut opt = AdamW::new(1e-3, 0.0);
        let grads = grads_for(&store, vec![Some(Tensor::new(&[3], vec![0.0; 3]).unwrap())]);
        assert!(matches!(opt.step(&mut store, &grads).unwrap_err(), MocError::Shape(_)));
    }
}
