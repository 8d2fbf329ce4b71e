//! First-order optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Scalar};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// `theta <- theta - lr g` for every trainable parameter with a gradient.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, grads: &[(ParamId, Vec<T>)], lr: f64) {
    let lr = T::of(lr);
    for (id, g) in grads {
        let p = store.get_mut(*id);
        if !p.trainable {
            continue;
        }
        for (v, &gv) in p.value.iter_mut().zip(g) {
            *v -= lr * gv;
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, grads: &[(ParamId, Vec<T>)], lr: f64, state: &mut AdamState<T>) {
    if state.m.len() < store.len() {
        state.m.resize(store.len(), Vec::new());
        state.v.resize(store.len(), Vec::new());
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::of(lr), T::of(ADAM_EPS));
    for (id, g) in grads {
        let p = store.get_mut(*id);
        if !p.trainable {
            continue;
        }
        let m = &mut state.m[id.0];
        let v = &mut state.v[id.0];
        if m.is_empty() {
            *m = vec![T::zero(); g.len()];
            *v = vec![T::zero(); g.len()];
        }
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p.value[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Optimizer choice plus its state.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    adam: AdamState<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {lr}")));
        }
        Ok(Self { kind, lr, adam: AdamState { m: Vec::new(), v: Vec::new(), t: 0 } })
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Vec<T>)]) {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(store, grads, self.lr),
            OptimizerKind::Adam => adam_step(store, grads, self.lr, &mut self.adam),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn bowl_grad(store: &ParamStore<f64>, id: ParamId) -> Vec<(ParamId, Vec<f64>)> {
        let mut g = Graph::new();
        let th = g.param(store, id);
        let sq = g.mul(th, th).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        g.param_grads()
    }

    #[test]
    fn sgd_on_quadratic_bowl() {
        let mut s = ParamStore::new();
        let id = s.add("theta", &[1], vec![1.0], true).unwrap();
        let grads = bowl_grad(&s, id);
        sgd_step(&mut s, &grads, 0.1);
        assert!((s.get(id).value[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_params() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut s = ParamStore::new();
            let id = s.add("theta", &[1], vec![0.7], true).unwrap();
            let mut opt = Optimizer::new(kind, 0.0).unwrap();
            let grads = bowl_grad(&s, id);
            opt.step(&mut s, &grads);
            assert_eq!(s.get(id).value[0], 0.7);
        }
    }

    #[test]
    fn non_trainable_untouched() {
        let mut s = ParamStore::new();
        let id = s.add("running", &[1], vec![1.0], false).unwrap();
        sgd_step(&mut s, &[(id, vec![5.0])], 1.0);
        assert_eq!(s.get(id).value[0], 1.0);
    }

    #[test]
    fn linear_model_loss_decreases_monotonically() {
        // least squares y = a x + b on four points, two parameters
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [1.0, 3.0, 5.0, 7.0];
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", &[1, 1], vec![0.0], true).unwrap();
        let b = s.add("b", &[1], vec![0.0], true).unwrap();
        let mut prev = f64::INFINITY;
        for _ in 0..200 {
            let mut g = Graph::new();
            let x = g.input(&[4, 1], xs.to_vec()).unwrap();
            let y = g.input(&[4, 1], ys.to_vec()).unwrap();
            let (av, bv) = (g.param(&s, a), g.param(&s, b));
            let p = g.dense(x, av, Some(bv)).unwrap();
            let ny = g.scale(y, -1.0);
            let r = g.add(p, ny).unwrap();
            let r2 = g.mul(r, r).unwrap();
            let l = g.sum(r2);
            let loss = g.value(l)[0];
            assert!(loss <= prev + 1e-12);
            prev = loss;
            g.backward(l).unwrap();
            sgd_step(&mut s, &g.param_grads(), 0.01);
        }
        assert!(prev < 1e-2);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut s = ParamStore::new();
        let id = s.add("theta", &[1], vec![1.0], true).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01).unwrap();
        let grads = bowl_grad(&s, id);
        opt.step(&mut s, &grads);
        assert!((s.get(id).value[0] - 0.99).abs() < 1e-6);
    }
}
