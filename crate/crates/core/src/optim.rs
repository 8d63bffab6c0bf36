use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    cfg: AdamWConfig,
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(params: impl IntoIterator<Item = (String, Var)>, cfg: AdamWConfig) -> Result<Self> {
        let params: Vec<(String, Var)> = params.into_iter().collect();
        let m = params
            .iter()
            .map(|(_, p)| p.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            cfg,
            params,
            m,
            v,
            step: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, (_, var)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = ((&self.m[i] * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((&self.v[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + eps)?)?;
            let theta = var.as_tensor();
            let next = ((theta * (1.0 - lr * weight_decay))? - (update * lr)?)?;
            var.set(&next)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// First and second moments keyed by parameter name.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.params
            .iter()
            .zip(self.m.iter().zip(&self.v))
            .map(|((n, _), (m, v))| (n.as_str(), m, v))
    }

    pub fn restore(&mut self, step: u64, mut lookup: impl FnMut(&str) -> Option<(Tensor, Tensor)>) -> Result<()> {
        for (i, (name, var)) in self.params.iter().enumerate() {
            let (m, v) = lookup(name).ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for `{name}`")))?;
            if m.dims() != var.dims() || v.dims() != var.dims() {
                return Err(Error::Checkpoint(format!("optimizer state for `{name}` has the wrong shape")));
            }
            self.m[i] = m.to_dtype(var.dtype())?;
            self.v[i] = v.to_dtype(var.dtype())?;
        }
        self.step = step;
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has gone
/// `patience` consecutive epochs without a new best.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    /// Minimum absolute decrease counted as an improvement.
    pub threshold: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Result<Self> {
        if !(lr > 0.0) || patience == 0 || !(factor > 0.0 && factor <= 1.0) {
            return Err(Error::Config(format!(
                "bad schedule: lr {lr}, patience {patience}, factor {factor}"
            )));
        }
        Ok(Self {
            lr,
            patience,
            factor,
            threshold: 1e-4,
            best: None,
            bad_epochs: 0,
        })
    }

    /// Feeds one epoch's loss and returns the learning rate for the next epoch.
    pub fn step(&mut self, loss: f64) -> f64 {
        match self.best {
            Some(best) if loss >= best - self.threshold => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.lr *= self.factor;
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use candle_core::{DType, Device};

    #[test]
    fn plateau_decays_after_eight_flat_epochs() {
        let mut s = PlateauScheduler::new(0.01, 8, 0.9).unwrap();
        s.step(1.0);
        for i in 0..7 {
            assert_eq!(s.step(1.0), 0.01, "epoch {i}");
        }
        assert_relative_eq!(s.step(1.0), 0.009, max_relative = 1e-12);
        for _ in 0..8 {
            s.step(1.0);
        }
        assert_relative_eq!(s.lr, 0.0081, max_relative = 1e-12);
    }

    #[test]
    fn improving_loss_keeps_lr() {
        let mut s = PlateauScheduler::new(0.01, 8, 0.9).unwrap();
        for e in 0..50 {
            assert_eq!(s.step(10.0 - e as f64 * 0.1), 0.01);
        }
    }

    #[test]
    fn tiny_improvements_do_not_count() {
        let mut s = PlateauScheduler::new(0.01, 8, 0.9).unwrap();
        s.step(1.0);
        for e in 1..=8 {
            s.step(1.0 - e as f64 * 1e-6);
        }
        assert!(s.lr < 0.01);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let v = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = AdamW::new([("w".to_string(), v.clone())], AdamWConfig::default()).unwrap();
        let loss = (v.as_tensor() * 3.0).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let got: Vec<f64> = v.as_tensor().to_vec1().unwrap();
        // bias-corrected first step is lr * sign(g), plus decay lr*wd*theta
        assert_relative_eq!(got[0], 1.0 * (1.0 - 1e-4) - 0.01, max_relative = 1e-6);
        assert_relative_eq!(got[1], -2.0 * (1.0 - 1e-4) - 0.01, max_relative = 1e-6);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let v = Var::from_tensor(&Tensor::new(&[3.0f32, -4.0], &Device::Cpu).unwrap()).unwrap();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new([("w".to_string(), v.clone())], cfg).unwrap();
        for _ in 0..300 {
            let loss = v.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let n: f32 = v.as_tensor().sqr().unwrap().sum_all().unwrap().to_dtype(DType::F32).unwrap().to_scalar().unwrap();
        assert!(n < 1e-2, "{n}");
    }
}
