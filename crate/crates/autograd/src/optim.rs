use crate::params::ParamStore;
use crate::Tensor;

/// Adam with bias correction. Learning rate is supplied per step so a
/// schedule can drive it.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self::with_betas(store, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` of `None` leaves parameter `i` untouched
    /// apart from decaying its moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = &grads[id.0] else { continue };
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.push("x", Tensor::new(&[2], vec![1.0, -1.0]), true);
        let mut adam = Adam::new(&store);
        let g = vec![Some(Tensor::new(&[2], vec![0.5, -3.0]))];
        adam.step(&mut store, &g, 0.1);
        let x = store.get(id).data();
        assert!((x[0] - 0.9).abs() < 1e-6);
        assert!((x[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_are_not_updated() {
        let mut store = ParamStore::new();
        let id = store.push("buf", Tensor::ones(&[3]), false);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &[Some(Tensor::ones(&[3]))], 1.0);
        assert_eq!(store.get(id).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.push("x", Tensor::new(&[1], vec![5.0]), true);
        let mut adam = Adam::new(&store);
        for _ in 0..2000 {
            let x = store.get(id).item();
            adam.step(&mut store, &[Some(Tensor::scalar(2.0 * (x - 2.0)))], 0.05);
        }
        assert!((store.get(id).item() - 2.0).abs() < 1e-3);
    }
}
