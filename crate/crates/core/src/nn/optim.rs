use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// Per-tensor Adam moments. Each tensor keeps its own step count so that a
/// tensor released from a freeze starts with a fresh bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub steps: u64,
    pub m: Array2<f64>,
    pub v: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self {
            config,
            slots: shapes
                .into_iter()
                .map(|s| AdamSlot {
                    steps: 0,
                    m: Array2::zeros(s),
                    v: Array2::zeros(s),
                })
                .collect(),
        }
    }

    pub fn update(&mut self, slot: usize, param: &mut Array2<f64>, grad: &Array2<f64>, lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        let s = &mut self.slots[slot];
        s.steps += 1;
        let bc1 = 1.0 - beta1.powi(s.steps as i32);
        let bc2 = 1.0 - beta2.powi(s.steps as i32);
        ndarray::Zip::from(param)
            .and(&mut s.m)
            .and(&mut s.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut adam = Adam::new(AdamConfig::default(), [(1, 2)]);
        let mut p = array![[1.0, -1.0]];
        adam.update(0, &mut p, &array![[0.3, -5.0]], 0.01);
        assert!((p[[0, 0]] - 0.99).abs() < 1e-6);
        assert!((p[[0, 1]] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut adam = Adam::new(AdamConfig::default(), [(1, 1)]);
        let mut p = array![[3.0]];
        for _ in 0..2000 {
            let g = &p * 2.0;
            adam.update(0, &mut p, &g, 0.05);
        }
        assert!(p[[0, 0]].abs() < 1e-2);
    }
}
