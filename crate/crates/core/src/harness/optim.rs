//! SGD with momentum and coupled weight decay:
//! `g = grad + wd * p`, `v = mu * v + g` (`v = g` on the first step),
//! `p -= lr * v`.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::io::TensorMap;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Sgd {
        Sgd { lr, momentum, weight_decay, velocity: BTreeMap::new(), frozen: BTreeSet::new() }
    }

    /// Gradients for `name` are ignored from now on.
    pub fn freeze(&mut self, name: impl Into<String>) {
        self.frozen.insert(name.into());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Drops momentum state, e.g. after the parameters were rewritten.
    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut TensorMap, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, grad) in grads {
            if self.frozen.contains(name) {
                continue;
            }
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Ingestion { missing: vec![name.clone()] })?;
            let g = if self.weight_decay != 0.0 { grad.add(&p.scale(self.weight_decay))? } else { grad.clone() };
            let v = match self.velocity.get(name) {
                Some(v) if self.momentum != 0.0 => v.scale(self.momentum).add(&g)?,
                _ => g,
            };
            *p = p.sub(&v.scale(self.lr))?;
            self.velocity.insert(name.clone(), v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    #[test]
    fn matches_hand_computed_steps() {
        let mut params = TensorMap::new();
        params.insert("w".into(), Tensor::from_f64([1], vec![1.0]).unwrap());
        let grads: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::from_f64([1], vec![0.5]).unwrap())].into();
        let mut sgd = Sgd::new(0.1, 0.9, 0.01);
        sgd.step(&mut params, &grads).unwrap();
        // g = 0.5 + 0.01 = 0.51, v = 0.51, p = 1 - 0.051
        let p1 = 1.0 - 0.1 * 0.51;
        assert!((params["w"].data()[0] - p1).abs() < 1e-15);
        sgd.step(&mut params, &grads).unwrap();
        let v2 = 0.9 * 0.51 + (0.5 + 0.01 * p1);
        assert!((params["w"].data()[0] - (p1 - 0.1 * v2)).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_and_frozen_are_bit_stable() {
        let mut params = TensorMap::new();
        params.insert("a".into(), Tensor::full(DType::F32, [3], 0.3));
        params.insert("b".into(), Tensor::full(DType::F64, [2], -1.7));
        let before = params.clone();
        let grads: BTreeMap<String, Tensor> =
            [("a".to_string(), Tensor::full(DType::F32, [3], 2.0)), ("b".to_string(), Tensor::full(DType::F64, [2], 1.0))].into();
        let mut sgd = Sgd::new(0.0, 0.9, 5e-4);
        for _ in 0..3 {
            sgd.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params, before);
        let mut sgd = Sgd::new(0.5, 0.9, 0.0);
        sgd.freeze("b");
        sgd.step(&mut params, &grads).unwrap();
        assert_eq!(params["b"], before["b"]);
        assert_ne!(params["a"], before["a"]);
    }
}
