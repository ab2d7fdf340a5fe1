//! Adam optimizer with externally supplied (e.g. decayed) learning rate.

use std::collections::HashMap;

use crate::tensor::Tensor;

/// Per-parameter first/second moment estimates plus the update count.
#[derive(Clone)]
pub struct AdamSlot {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

/// Adam with bias-corrected moments. State is keyed by parameter name so it
/// can be checkpointed and restored exactly.
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    slots: HashMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32) -> Adam {
        Adam { beta1, beta2, eps: 1e-8, slots: HashMap::new() }
    }

    /// Apply one update to `param` in place.
    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f32) {
        assert_eq!(param.shape(), grad.shape(), "adam grad shape mismatch for {}", name);
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
            m: Tensor::zeros(param.shape()),
            v: Tensor::zeros(param.shape()),
            t: 0,
        });
        slot.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        slot.m = slot.m.zip(grad, |m, g| b1 * m + (1.0 - b1) * g);
        slot.v = slot.v.zip(grad, |v, g| b2 * v + (1.0 - b2) * g * g);
        let c1 = 1.0 - b1.powi(slot.t as i32);
        let c2 = 1.0 - b2.powi(slot.t as i32);
        let eps = self.eps;
        let update = slot.m.zip(&slot.v, |m, v| {
            let mh = m / c1;
            let vh = v / c2;
            lr * mh / (vh.sqrt() + eps)
        });
        *param = param.zip(&update, |p, u| p - u);
    }

    /// Iterate slots in deterministic (sorted-name) order, for checkpointing.
    pub fn slots_sorted(&self) -> Vec<(&str, &AdamSlot)> {
        let mut v: Vec<_> = self.slots.iter().map(|(k, s)| (k.as_str(), s)).collect();
        v.sort_by_key(|&(k, _)| k);
        v
    }

    pub fn restore_slot(&mut self, name: &str, slot: AdamSlot) {
        self.slots.insert(name.to_string(), slot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_param_by_lr_in_sign_direction() {
        // With bias correction the very first Adam update is
        // lr * g / (|g| + eps'), i.e. almost exactly lr * sign(g).
        let mut opt = Adam::new(0.0, 0.9);
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]);
        let g = Tensor::new(vec![2], vec![0.5, -2.0]);
        opt.step("p", &mut p, &g, 0.1);
        assert!((p.data()[0] - 0.9).abs() < 1e-4, "{:?}", p.data());
        assert!((p.data()[1] + 0.9).abs() < 1e-4, "{:?}", p.data());
    }

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let mut opt = Adam::new(0.0, 0.9);
        let mut p = Tensor::new(vec![1], vec![3.0]);
        let g = Tensor::zeros(&[1]);
        opt.step("p", &mut p, &g, 0.1);
        assert_eq!(p.data()[0], 3.0);
    }
}
