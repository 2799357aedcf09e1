use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Adam without weight decay. Moments are keyed by parameter name so they
/// can be checkpointed alongside the weights.
pub struct Adam {
    config: AdamConfig,
    vars: BTreeMap<String, Var>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(vars: &BTreeMap<String, Var>, config: AdamConfig) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in vars {
            m.insert(name.clone(), var.zeros_like()?);
            v.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Self {
            config,
            vars: vars.clone(),
            m,
            v,
            t: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr`. Parameters without a gradient keep
    /// their value and moments.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = self.m.get_mut(name).expect("moment per var");
            let v = self.v.get_mut(name).expect("moment per var");
            *m = ((&*m * beta1)? + (g * (1.0 - beta1))?)?;
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&*m / bc1)?;
            let denom = ((&*v / bc2)?.sqrt()? + eps)?;
            let update = (m_hat.div(&denom)? * lr)?;
            var.set(&var.as_tensor().sub(&update)?)?;
        }
        Ok(())
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.m.iter().map(|(k, m)| (k.as_str(), m, &self.v[k]))
    }

    pub fn restore(&mut self, t: u64, m: BTreeMap<String, Tensor>, v: BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            for (kind, store) in [("m", &m), ("v", &v)] {
                let t = store
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment {kind}.{name}")))?;
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer moment {kind}.{name}: expected shape {:?}, found {:?}",
                        var.dims(),
                        t.dims()
                    )));
                }
            }
        }
        let dtype = self.vars.values().next().map(|v| v.dtype());
        let cast = |mut map: BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Tensor>> {
            if let Some(dt) = dtype {
                for t in map.values_mut() {
                    *t = t.to_dtype(dt)?;
                }
            }
            Ok(map)
        };
        self.m = cast(m)?;
        self.v = cast(v)?;
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let w = Var::from_vec(vec![1.0f64, -2.0, 0.5], 3, &Device::Cpu).unwrap();
        let mut vars = BTreeMap::new();
        vars.insert("w".to_string(), w.clone());
        let mut opt = Adam::new(&vars, AdamConfig::default()).unwrap();
        let loss = (w.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        opt.step(&loss.backward().unwrap(), 0.1).unwrap();
        let after: Vec<f64> = w.as_tensor().to_vec1().unwrap();
        for (a, b) in after.iter().zip([0.9, -1.9, 0.4]) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let w = Var::from_vec(vec![3.0f32, -4.0], 2, &Device::Cpu).unwrap();
        let mut vars = BTreeMap::new();
        vars.insert("w".to_string(), w.clone());
        let mut opt = Adam::new(&vars, AdamConfig::default()).unwrap();
        for _ in 0..500 {
            let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap(), 0.05).unwrap();
        }
        let n: f32 = w.as_tensor().sqr().unwrap().sum_all().unwrap().to_dtype(DType::F32).unwrap().to_scalar().unwrap();
        assert!(n < 1e-3, "{n}");
    }
}
