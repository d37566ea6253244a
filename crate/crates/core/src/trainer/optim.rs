//! Adam with bias correction, and cosine annealing with warm restarts.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state for every parameter of one store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    steps: i32,
    /// Steps skipped because a gradient was non-finite.
    pub skipped: usize,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![T::zero(); p.tensor.len()]).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            steps: 0,
            skipped: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// Updates every trainable, unfrozen parameter. Parameters without a
    /// gradient entry are treated as having a zero gradient. Returns `false`
    /// (and leaves everything untouched) when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> bool {
        if !grads.all_finite() {
            self.skipped += 1;
            return false;
        }
        self.steps += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        let (tb1, tb2) = (T::lit(b1), T::lit(b2));
        let (ob1, ob2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let step = T::lit(lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(self.cfg.eps);
        for id in store.trainable() {
            let i = id.0;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads.param(id);
            let theta = store.get_mut(id).data_mut();
            for k in 0..theta.len() {
                let gk = g.map_or(T::zero(), |g| g[k]);
                m[k] = tb1 * m[k] + ob1 * gk;
                v[k] = tb2 * v[k] + ob2 * gk * gk;
                theta[k] -= step * m[k] / ((v[k] * inv_c2).sqrt() + eps);
            }
        }
        true
    }
}

/// Learning rate at `epoch` of `total` under cosine annealing with `cycles`
/// warm restarts (to zero within each cycle). Falls back to a constant
/// `lr_max` when there are fewer than three epochs per cycle.
pub fn lr_at(epoch: usize, total: usize, cycles: usize, lr_max: f64) -> f64 {
    if cycles == 0 || total == 0 || cycles * 3 > total {
        return lr_max;
    }
    // Cycles differ in length by at most one epoch; earlier ones are longer.
    let base = total / cycles;
    let extra = total % cycles;
    let mut start = 0;
    for c in 0..cycles {
        let len = base + usize::from(c < extra);
        if epoch < start + len || c + 1 == cycles {
            let t = (epoch - start) as f64;
            return 0.5 * lr_max * (1.0 + (std::f64::consts::PI * t / len as f64).cos());
        }
        start += len;
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Tensor};

    fn store_with(values: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let n = values.len();
        s.add("theta", Tensor::new(1, n, values).unwrap()).unwrap();
        s
    }

    /// Gradient of `sum(c ⊙ θ)` is `c`.
    fn linear_grads(store: &ParamStore<f64>, c: &[f64]) -> Gradients<f64> {
        let mut g = Graph::new(true);
        let theta = g.param(store, store.id("theta").unwrap());
        let coef = g.constant(Tensor::new(1, c.len(), c.to_vec()).unwrap());
        let y = g.hadamard(theta, coef).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = store_with(vec![0.0]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let grads = linear_grads(&store, &[1.0]);
        assert!(adam.step(&mut store, &grads, 1e-3));
        let theta = store.get(store.id("theta").unwrap()).data()[0];
        // m̂ = 1, v̂ = 1, so Δ = −lr·1/(1 + ε).
        assert!((theta - -1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let mut store = store_with(vec![0.5, -0.5]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let grads = linear_grads(&store, &[1.0, 1.0]);
        adam.step(&mut store, &grads, 1e-2);
        let before = store.get(store.id("theta").unwrap()).clone();
        let m_before = adam.m[0].clone();
        let grads = linear_grads(&store, &[0.0, 0.0]);
        adam.step(&mut store, &grads, 0.0);
        assert_eq!(store.get(store.id("theta").unwrap()), &before);
        for (a, b) in adam.m[0].iter().zip(&m_before) {
            assert!((a - 0.9 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradients_are_skipped() {
        let mut store = store_with(vec![1.0]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let grads = linear_grads(&store, &[f64::NAN]);
        assert!(!adam.step(&mut store, &grads, 1e-3));
        assert_eq!(adam.skipped, 1);
        assert_eq!(adam.steps(), 0);
        assert_eq!(store.get(store.id("theta").unwrap()).data(), &[1.0]);
    }

    #[test]
    fn trajectories_are_reproducible() {
        let run = || {
            let mut store = store_with(vec![0.3, -0.2, 1.0]);
            let mut adam = Adam::new(&store, AdamConfig::default());
            for k in 0..50 {
                let c: Vec<f64> = (0..3).map(|j| ((k * 3 + j) as f64).sin()).collect();
                let grads = linear_grads(&store, &c);
                adam.step(&mut store, &grads, 1e-2);
            }
            store.get(store.id("theta").unwrap()).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = store_with(vec![2.0]);
        store.set_frozen("theta", true);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let grads = linear_grads(&store, &[1.0]);
        adam.step(&mut store, &grads, 1.0);
        assert_eq!(store.get(store.id("theta").unwrap()).data(), &[2.0]);
    }

    #[test]
    fn schedule_restarts() {
        let (total, lr) = (30, 1e-4);
        assert_eq!(lr_at(0, total, 3, lr), 1e-4);
        assert_eq!(lr_at(10, total, 3, lr), 1e-4);
        assert_eq!(lr_at(20, total, 3, lr), 1e-4);
        assert!((lr_at(5, total, 3, lr) - 0.5e-4).abs() < 1e-18);
        assert!(lr_at(9, total, 3, lr) < lr_at(8, total, 3, lr));
        // Uneven split of 500 epochs: 167, 167, 166.
        assert_eq!(lr_at(167, 500, 3, lr), 1e-4);
        assert_eq!(lr_at(334, 500, 3, lr), 1e-4);
        assert!(lr_at(499, 500, 3, lr) > 0.0);
    }

    #[test]
    fn short_runs_use_a_constant_rate() {
        assert_eq!(lr_at(3, 8, 3, 1e-3), 1e-3);
        assert!(lr_at(4, 9, 3, 1e-3) < 1e-3);
    }
}
