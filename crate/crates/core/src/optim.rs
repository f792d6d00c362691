//! Adam with optional per-tensor freezing.

use crate::tensor::Mat;
use crate::towers::TowerParams;

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &TowerParams, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Tensors with `frozen[id]` set are left untouched and keep
    /// no moment state.
    pub fn step(&mut self, params: &mut TowerParams, grads: &[Mat], frozen: &[bool]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        for (id, g) in grads.iter().enumerate() {
            if frozen[id] {
                continue;
            }
            let p = params.get_mut(id);
            let m = &mut self.m[id].data;
            let v = &mut self.v[id].data;
            for (k, &gk) in g.data.iter().enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p.data[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::towers::TowerConfig;

    #[test]
    fn first_step_moves_by_learning_rate_and_respects_freeze() {
        let mut p = TowerParams::init(&TowerConfig {
            embed_dim: 4,
            attention_heads: 2,
            num_reps: 2,
            ffn_dim: 4,
            ..TowerConfig::new(3)
        })
        .unwrap();
        let before = p.clone();
        let mut grads = p.zeros_like();
        for g in &mut grads {
            for x in &mut g.data {
                *x = 0.5;
            }
        }
        let frozen: Vec<bool> = (0..p.len()).map(|id| p.is_item_tower(id)).collect();
        let mut opt = Adam::new(&p, 0.01);
        opt.step(&mut p, &grads, &frozen);
        for id in 0..p.len() {
            for (a, b) in p.get(id).data.iter().zip(&before.get(id).data) {
                if frozen[id] {
                    assert_eq!(a, b);
                } else {
                    assert!((b - a - 0.01).abs() < 1e-9);
                }
            }
        }
    }
}
