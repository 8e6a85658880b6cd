use ndarray::{Array2, Zip};

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Optimizer hyper-parameters and per-parameter moment buffers.
///
/// Weight decay is classic L2: `wd * param` is added to the gradient of every
/// decaying parameter before the update.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl OptimizerState {
    pub fn adam(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros = || {
            (0..store.len())
                .map(|i| Array2::zeros(store.get(super::ParamId(i)).value.raw_dim()))
                .collect()
        };
        OptimizerState {
            kind: OptimizerKind::Adam,
            lr,
            weight_decay,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn sgd(lr: f64, weight_decay: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::Sgd,
            lr,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update from the accumulated gradients, then zero them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if !store.has_grads() {
            return Err(Error::State(
                "optimizer step without a completed backward pass".into(),
            ));
        }
        if self.kind == OptimizerKind::Adam && self.first.len() != store.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let lr = self.lr;
        let correction1 = 1.0 - ADAM_BETA1.powi(t);
        let correction2 = 1.0 - ADAM_BETA2.powi(t);

        for id in store.ids() {
            let p = store.get_mut(id);
            let wd = if p.kind.decays() {
                self.weight_decay
            } else {
                0.0
            };
            match self.kind {
                OptimizerKind::Sgd => {
                    Zip::from(&mut p.value).and(&p.grad).for_each(|w, &g| {
                        *w -= lr * (g + wd * *w);
                    });
                }
                OptimizerKind::Adam => {
                    let m = &mut self.first[id.index()];
                    let v = &mut self.second[id.index()];
                    Zip::from(&mut p.value)
                        .and(&p.grad)
                        .and(m)
                        .and(v)
                        .for_each(|w, &g, m, v| {
                            let g = g + wd * *w;
                            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                            let m_hat = *m / correction1;
                            let v_hat = *v / correction2;
                            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                        });
                }
            }
        }
        store.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;
    use crate::nn::ParamKind;

    fn scalar_store(kind: ParamKind, value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.insert("p", kind, array![[value]]).unwrap();
        s.get_mut(id).grad[[0, 0]] = grad;
        s.accumulate(&Default::default());
        s
    }

    #[test]
    fn zero_learning_rate_is_a_null_step() {
        let mut s = scalar_store(ParamKind::Weight, 0.7, 3.0);
        let mut opt = OptimizerState::adam(&s, 0.0, 1e-6);
        opt.step(&mut s).unwrap();
        assert_eq!(s.by_name("p").unwrap().value[[0, 0]], 0.7);
        assert_eq!(s.by_name("p").unwrap().grad[[0, 0]], 0.0);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let mut s = scalar_store(ParamKind::Weight, 1.0, 1.0);
        let mut opt = OptimizerState::adam(&s, 1e-3, 0.0);
        opt.step(&mut s).unwrap();
        let want = 1.0 - 1e-3 / (1.0 + ADAM_EPS);
        assert!((s.by_name("p").unwrap().value[[0, 0]] - want).abs() < 1e-15);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn l2_decay_under_sgd() {
        let mut s = scalar_store(ParamKind::Weight, 1.0, 0.0);
        let mut opt = OptimizerState::sgd(1e-3, 1e-6);
        opt.step(&mut s).unwrap();
        assert!((s.by_name("p").unwrap().value[[0, 0]] - (1.0 - 1e-9)).abs() < 1e-16);
    }

    #[test]
    fn biases_do_not_decay() {
        let mut s = scalar_store(ParamKind::Bias, 1.0, 0.0);
        let mut opt = OptimizerState::sgd(1e-3, 0.5);
        opt.step(&mut s).unwrap();
        assert_eq!(s.by_name("p").unwrap().value[[0, 0]], 1.0);
    }

    #[test]
    fn step_needs_gradients() {
        let mut s = ParamStore::new();
        s.insert("p", ParamKind::Weight, array![[1.0]]).unwrap();
        let mut opt = OptimizerState::adam(&s, 1e-3, 0.0);
        assert!(matches!(opt.step(&mut s), Err(Error::State(_))));
    }
}
