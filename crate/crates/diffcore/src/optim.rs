use crate::array::{Array, Real};
use crate::error::{DiffError, Result};
use crate::params::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Bias-corrected Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    first: Vec<Array<T>>,
    second: Vec<Array<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Array<T>> = params.iter().map(|(_, a)| Array::zeros(a.shape())).collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update of every parameter in `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(DiffError::Shape {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        for id in params.ids() {
            if grads.get(id).shape() != params.get(id).shape()
                || self.first[id.0].shape() != params.get(id).shape()
            {
                return Err(DiffError::Shape {
                    op: "adam_step",
                    lhs: params.get(id).shape().to_vec(),
                    rhs: grads.get(id).shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps, wd) = (T::of(c.lr), T::of(c.eps), T::of(c.weight_decay));
        for id in params.ids() {
            let g = grads.get(id).data();
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * (mh / (vh.sqrt() + eps) + wd * p[i]);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `gamma` every `step_size` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLr {
    pub gamma: f64,
    pub step_size: usize,
}

impl Default for StepLr {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            step_size: 20,
        }
    }
}

impl StepLr {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        base * self.gamma.powi((epoch / self.step_size.max(1)) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Array::from_f64(&[1], &[v]).unwrap());
        s
    }

    #[test]
    fn zero_grad_without_decay_is_noop() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Array::from_f64(&[2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap());
        let before = s.clone();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamState::new(&s, cfg);
        let g = Gradients::zeros_like(&s);
        for _ in 0..3 {
            st.step(&mut s, &g).unwrap();
        }
        assert_eq!(s, before);
        assert_eq!(st.step_count(), 3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_store(0.0);
        let alpha = 1e-3;
        let mut st = AdamState::new(
            &s,
            AdamConfig {
                lr: alpha,
                ..Default::default()
            },
        );
        let mut g = Gradients::zeros_like(&s);
        g.accumulate(crate::ParamId(0), &[1.0]);
        st.step(&mut s, &g).unwrap();
        let p = s.get(crate::ParamId(0)).item();
        assert!((p + alpha).abs() < 1e-10, "{p}");
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let mut s = scalar_store(0.0);
        let mut other = ParamStore::new();
        other.add("p", Array::<f64>::zeros(&[2]));
        let g = Gradients::zeros_like(&other);
        let mut st = AdamState::new(&s, AdamConfig::default());
        assert!(st.step(&mut s, &g).is_err());
    }

    #[test]
    fn step_lr_halves_every_step_size() {
        let s = StepLr::default();
        assert_eq!(s.lr_at(1.0, 0), 1.0);
        assert_eq!(s.lr_at(1.0, 19), 1.0);
        assert_eq!(s.lr_at(1.0, 20), 0.5);
        assert_eq!(s.lr_at(1.0, 45), 0.25);
    }
}
