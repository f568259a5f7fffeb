//! Adam with bias correction, step-decay schedule and global-norm clipping.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: zeros(),
            second: zeros(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    /// One update of every parameter; `grads` is indexed like the store.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::shape("adam step", &[grads.len()], &[store.len()]));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id);
            let g = &grads[k];
            if g.shape() != p.shape() {
                return Err(Error::shape("adam gradient", g.shape(), p.shape()));
            }
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `lr₀ · decay^⌊(epoch − 1) / period⌋` for 1-based epochs.
pub fn learning_rate(lr0: f64, decay: f64, period: usize, epoch: usize) -> f64 {
    let k = epoch.saturating_sub(1) / period.max(1);
    lr0 * decay.powi(k as i32)
}

/// Rescales `grads` so their joint norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::vector(values));
        s
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut s = store_with(vec![1.0, -2.0]);
        let mut adam = Adam::new(&s);
        adam.step(&mut s, &[Tensor::zeros(vec![2])], 0.1).unwrap();
        assert_eq!(s.get(s.find("theta").unwrap()).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut s = store_with(vec![0.0, 0.0]);
        let mut adam = Adam::new(&s);
        adam.step(&mut s, &[Tensor::vector(vec![3.0, -0.2])], 0.01).unwrap();
        let p = s.get(s.find("theta").unwrap()).data().to_vec();
        assert!((p[0] + 0.01).abs() < 1e-8);
        assert!((p[1] - 0.01).abs() < 1e-8);
    }

    #[test]
    fn schedule_steps_down() {
        assert_eq!(learning_rate(1e-3, 0.98, 700, 1), 1e-3);
        assert_eq!(learning_rate(1e-3, 0.98, 700, 700), 1e-3);
        assert!((learning_rate(1e-3, 0.98, 700, 701) - 0.98e-3).abs() < 1e-18);
    }

    #[test]
    fn clipping_preserves_direction() {
        let mut g = vec![Tensor::vector(vec![30.0, 40.0])];
        assert_eq!(clip_global_norm(&mut g, 10.0), 50.0);
        assert!((g[0].data()[0] - 6.0).abs() < 1e-12);
        assert!((g[0].data()[1] - 8.0).abs() < 1e-12);
    }
}
