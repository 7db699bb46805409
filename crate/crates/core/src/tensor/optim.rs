use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};

/// Exponentially decayed learning rate, `initial_rate * decay^epoch`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_rate: f64,
    pub decay: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial_rate: 1e-3,
            decay: 0.995,
        }
    }
}

impl LrSchedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        self.initial_rate * self.decay.powi(epoch as i32)
    }
}

/// Adam moments for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Parameters without a gradient are left
    /// untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.params() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for i in 0..g.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::Graph;
    use super::*;

    #[test]
    fn decay_schedule() {
        let s = LrSchedule::default();
        assert_eq!(s.rate(0), 1e-3);
        assert!((s.rate(1) - 9.95e-4).abs() < 1e-15);
        assert!((s.rate(100) - 1e-3 * 0.995f64.powi(100)).abs() < 1e-15);
        assert!((s.rate(100) - 6.058e-4).abs() < 1e-6);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0));
        let mut adam = AdamState::new(&store);
        let g = Graph::new();
        let w = g.param(&store, id);
        let y = g.scale(w, 3.0);
        let grads = g.backward(y).unwrap();
        adam.step(&mut store, &grads, 0.1);
        assert!((store.get(id).item() - 0.9).abs() < 1e-9);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(0.0));
        let mut adam = AdamState::new(&store);
        for _ in 0..100 {
            let g = Graph::new();
            let w = g.param(&store, id);
            let d = g.add_scalar(w, -2.0);
            let loss = g.square(d);
            let grads = g.backward(loss).unwrap();
            adam.step(&mut store, &grads, 0.1);
        }
        assert!((store.get(id).item() - 2.0).abs() < 0.1);
    }
}
