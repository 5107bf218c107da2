use std::collections::BTreeMap;

use crate::nn::ParamStore;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    /// Learning rate for parameters under `text.`; `None` uses `lr`.
    pub text_lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
    /// Step count after which both rates are multiplied by `decay_factor`.
    pub decay_after: Option<u64>,
    pub decay_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            text_lr: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: Some(1.0),
            decay_after: None,
            decay_factor: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters absent from `grads` are left alone.
    pub fn step(&mut self, ps: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) {
        self.step += 1;
        let c = &self.cfg;
        let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let clip = match c.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = match c.decay_after {
            Some(n) if self.step > n => c.decay_factor,
            _ => 1.0,
        };
        for (name, g) in grads {
            let Some(p) = ps.get_mut(name) else { continue };
            let lr = decay * if name.starts_with("text.") { c.text_lr.unwrap_or(c.lr) } else { c.lr };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, w) in p.values_mut().iter_mut().enumerate() {
                let gi = g[i] * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DiffArray;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut ps = ParamStore::new();
        ps.insert("w", DiffArray::vector(vec![1.0, -1.0, 0.0]));
        ps.insert("text.e", DiffArray::vector(vec![0.0]));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            text_lr: Some(0.01),
            weight_decay: 0.0,
            clip_norm: None,
            ..AdamConfig::default()
        });
        let grads = BTreeMap::from([("w".to_string(), vec![2.0, -3.0, 0.0]), ("text.e".to_string(), vec![5.0])]);
        opt.step(&mut ps, &grads);
        let w = ps.get("w").unwrap().values();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 0.9).abs() < 1e-7 && w[2] == 0.0);
        assert!((ps.get("text.e").unwrap().values()[0] + 0.01).abs() < 1e-8);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamStore::new();
        ps.insert("x", DiffArray::vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        for _ in 0..2000 {
            let x = ps.get("x").unwrap().values().to_vec();
            let g = BTreeMap::from([("x".to_string(), x.iter().map(|v| 2.0 * v).collect())]);
            opt.step(&mut ps, &g);
        }
        assert!(ps.get("x").unwrap().values().iter().all(|v| v.abs() < 1e-2));
    }
}
