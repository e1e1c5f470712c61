//! SGD with momentum and decoupled-from-routers weight decay.

use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Element> SgdMomentum<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        SgdMomentum { momentum, weight_decay, velocity }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Vec<T>>) {
        self.velocity = velocity;
    }

    /// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`. A missing gradient counts as zero;
    /// decay only touches parameters flagged for it.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        let mu = T::from_f64_lossy(self.momentum);
        let lr = T::from_f64_lossy(lr);
        for ((param, grad), vel) in store.iter_mut().zip(grads).zip(&mut self.velocity) {
            let wd = T::from_f64_lossy(if param.decay { self.weight_decay } else { 0.0 });
            let data = param.value.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g.data()[i]);
                vel[i] = mu * vel[i] + (g + wd * data[i]);
                data[i] = data[i] - lr * vel[i];
            }
        }
    }
}
