//! Deterministic first-order optimizers over named parameter lists.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Update rule. Plain SGD is the default; momentum and Adam are options
/// for runs where convergence speed matters more than simplicity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

const MOMENTUM: f64 = 0.9;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Slot {
    tensor: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Applies gradient updates to a fixed parameter list in a fixed order.
/// A parameter whose gradient is absent in a step is treated as having a
/// zero gradient.
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    slots: Vec<Slot>,
    steps: usize,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &[(String, Tensor)]) -> Optimizer {
        let slots = params
            .iter()
            .map(|(_, t)| {
                let n = t.numel();
                let state = matches!(kind, OptimizerKind::Momentum | OptimizerKind::Adam);
                Slot {
                    tensor: t.clone(),
                    m: if state { vec![0.0; n] } else { Vec::new() },
                    v: if matches!(kind, OptimizerKind::Adam) { vec![0.0; n] } else { Vec::new() },
                }
            })
            .collect();
        Optimizer { kind, learning_rate, slots, steps: 0 }
    }

    /// Apply one update from the gradients currently attached to the
    /// parameters. Returns the global L2 norm of the gradient.
    pub fn step(&mut self) -> f64 {
        self.steps += 1;
        let lr = self.learning_rate;
        let mut norm_sq = 0.0;
        for slot in &mut self.slots {
            let grad = slot.tensor.grad_or_zeros();
            norm_sq += grad.iter().map(|&g| g * g).sum::<f64>();
            match self.kind {
                OptimizerKind::Sgd => {
                    slot.tensor.data_mut(|d| {
                        for (w, &g) in d.iter_mut().zip(&grad) {
                            *w -= lr * g;
                        }
                    });
                }
                OptimizerKind::Momentum => {
                    for (m, &g) in slot.m.iter_mut().zip(&grad) {
                        *m = MOMENTUM * *m + g;
                    }
                    let m = &slot.m;
                    slot.tensor.data_mut(|d| {
                        for (w, &mv) in d.iter_mut().zip(m) {
                            *w -= lr * mv;
                        }
                    });
                }
                OptimizerKind::Adam => {
                    let t = self.steps as i32;
                    let bc1 = 1.0 - ADAM_BETA1.powi(t);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t);
                    for ((m, v), &g) in slot.m.iter_mut().zip(slot.v.iter_mut()).zip(&grad) {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    }
                    let (m, v) = (&slot.m, &slot.v);
                    slot.tensor.data_mut(|d| {
                        for ((w, &mv), &vv) in d.iter_mut().zip(m).zip(v) {
                            let m_hat = mv / bc1;
                            let v_hat = vv / bc2;
                            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                        }
                    });
                }
            }
            slot.tensor.clear_grad();
        }
        norm_sq.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn quadratic_step(kind: OptimizerKind, lr: f64) -> (f64, f64) {
        // minimize x^2 from x=3 for a few steps
        let x = Tensor::param(vec![3.0], &[1]).unwrap();
        let mut opt = Optimizer::new(kind, lr, &[("x".into(), x.clone())]);
        let mut last_norm = 0.0;
        for _ in 0..50 {
            let tape = Tape::new();
            let loss = tape.mul(&x, &x).unwrap();
            let loss = tape.sum(&loss).unwrap();
            tape.backward(&loss).unwrap();
            last_norm = opt.step();
        }
        (x.value()[0].abs(), last_norm)
    }

    #[test]
    fn all_kinds_descend_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Momentum, OptimizerKind::Adam] {
            let (dist, _) = quadratic_step(kind, 0.05);
            assert!(dist < 1.0, "{kind:?} did not descend: |x| = {dist}");
        }
    }

    #[test]
    fn sgd_single_step_is_exact() {
        let x = Tensor::param(vec![2.0], &[1]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, &[("x".into(), x.clone())]);
        let tape = Tape::new();
        let loss = tape.sum(&tape.mul(&x, &x).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        let norm = opt.step();
        assert!((norm - 4.0).abs() < 1e-15); // d(x^2)/dx at 2 is 4
        assert!((x.value()[0] - 1.6).abs() < 1e-15); // 2 - 0.1*4
    }

    #[test]
    fn missing_gradient_means_no_update() {
        let x = Tensor::param(vec![1.5], &[1]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, &[("x".into(), x.clone())]);
        let norm = opt.step(); // no backward ran
        assert_eq!(norm, 0.0);
        assert_eq!(x.value()[0], 1.5);
    }
}
