use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::tensor::Parameter;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct SlotState<T> {
    first: Vec<T>,
    second: Vec<T>,
    steps: i32,
}

/// First-order optimizer with per-parameter state keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    state: HashMap<String, SlotState<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        Self {
            kind,
            learning_rate,
            state: HashMap::new(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd { momentum: 0.0 }, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::adam(), learning_rate)
    }

    /// Applies one update to every parameter and clears its gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter<T>>) {
        let lr = self.learning_rate;
        for p in params {
            let n = p.value.len();
            let slot = self.state.entry(p.name.clone()).or_insert_with(|| SlotState {
                first: vec![T::zero(); n],
                second: vec![T::zero(); n],
                steps: 0,
            });
            slot.steps += 1;
            let grad = p.grad.data().to_vec();
            let value = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    if momentum == 0.0 {
                        let lr = T::from_f64_lossy(lr);
                        for (w, &g) in value.iter_mut().zip(&grad) {
                            *w = *w - lr * g;
                        }
                    } else {
                        let mu = T::from_f64_lossy(momentum);
                        let lr = T::from_f64_lossy(lr);
                        for ((w, &g), v) in value.iter_mut().zip(&grad).zip(slot.first.iter_mut()) {
                            *v = mu * *v + g;
                            *w = *w - lr * *v;
                        }
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let b1 = T::from_f64_lossy(beta1);
                    let b2 = T::from_f64_lossy(beta2);
                    let c1 = 1.0 - beta1.powi(slot.steps);
                    let c2 = 1.0 - beta2.powi(slot.steps);
                    let step = T::from_f64_lossy(lr * c2.sqrt() / c1);
                    let eps = T::from_f64_lossy(eps * c2.sqrt());
                    for (((w, &g), m), v) in value
                        .iter_mut()
                        .zip(&grad)
                        .zip(slot.first.iter_mut())
                        .zip(slot.second.iter_mut())
                    {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        *w = *w - step * *m / (v.sqrt() + eps);
                    }
                }
            }
            p.zero_grad();
        }
    }
}

/// Rescales gradients so their joint L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm<'a, T: Scalar>(
    params: impl IntoIterator<Item = &'a mut Parameter<T>>,
    max_norm: f64,
) -> f64 {
    let params: Vec<&mut Parameter<T>> = params.into_iter().collect();
    let norm = params
        .iter()
        .map(|p| p.grad.sum_squares().as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = T::from_f64_lossy(max_norm / norm);
        for p in params {
            p.grad.scale(k);
        }
    }
    norm
}
