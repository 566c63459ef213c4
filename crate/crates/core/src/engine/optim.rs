use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore};

use super::EngineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(EngineError::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// Adam (no weight decay) or plain gradient descent.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .slots()
                .iter()
                .map(|s| Array2::zeros(s.value.dim()))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c = self.config;
        match c.kind {
            OptimizerKind::Sgd => {
                for (slot, g) in params.slots_mut().iter_mut().zip(grads.iter()) {
                    slot.value.scaled_add(-c.lr, g);
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for (((slot, g), m), v) in params
                    .slots_mut()
                    .iter_mut()
                    .zip(grads.iter())
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    Zip::from(&mut slot.value)
                        .and(g)
                        .and(m)
                        .and(v)
                        .for_each(|p, &g, m, v| {
                            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                            let m_hat = *m / bc1;
                            let v_hat = *v / bc2;
                            *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                        });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Array2::from_elem((1, 1), v));
        s
    }

    fn grad_of(store: &ParamStore, f: impl Fn(f64) -> f64) -> Gradients {
        let mut g = store.zeros_like();
        let x = store.slots()[0].value[[0, 0]];
        g.grads[0][[0, 0]] = f(x);
        g
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = store(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::default(), &p);
        let g = grad_of(&p, |x| 2.0 * x);
        opt.apply(&mut p, &g);
        assert!((p.slots()[0].value[[0, 0]] - (1.0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = store(3.0);
        let cfg = OptimizerConfig {
            lr: 0.05,
            ..Default::default()
        };
        let mut opt = Optimizer::new(cfg, &p);
        for _ in 0..2000 {
            let g = grad_of(&p, |x| 2.0 * (x - 1.5));
            opt.apply(&mut p, &g);
        }
        assert!((p.slots()[0].value[[0, 0]] - 1.5).abs() < 1e-3);
    }

    #[test]
    fn sgd_step() {
        let mut p = store(1.0);
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.1,
            ..Default::default()
        };
        let mut opt = Optimizer::new(cfg, &p);
        let g = grad_of(&p, |_| 2.0);
        opt.apply(&mut p, &g);
        assert!((p.slots()[0].value[[0, 0]] - 0.8).abs() < 1e-15);
    }
}
