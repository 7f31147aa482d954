//! AdamW with decoupled weight decay, and learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    /// `lr0 · (½(1 + cos(π t / T)))^power`.
    CosinePower,
    /// `lr0 · (1 − t / T)^power`.
    Poly,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::CosinePower),
            "poly" => Ok(Self::Poly),
            other => Err(Error::InvalidArgument(format!("unknown schedule '{other}' (expected cosine or poly)"))),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CosinePower => "cosine",
            Self::Poly => "poly",
        })
    }
}

/// Learning rate at `step` of `total`; steps past the end clamp to zero.
pub fn learning_rate(schedule: Schedule, lr0: f64, power: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    let base = match schedule {
        Schedule::CosinePower => 0.5 * (1.0 + (PI * frac).cos()),
        Schedule::Poly => 1.0 - frac,
    };
    lr0 * base.max(0.0).powf(power)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Moment estimates per parameter path.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

const STEP_RECORD: &str = "optim.step";

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update from the gradients stored in `store`. Weight decay applies
    /// to matrices only; vectors (biases, norm gains) are not decayed.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (path, p) in store.iter_mut() {
            let m = self.m.entry(path.to_string()).or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = self.v.entry(path.to_string()).or_insert_with(|| Tensor::zeros(p.value.shape()));
            let decay = if p.value.ndim() >= 2 { c.weight_decay } else { 0.0 };
            let grads = p.grad.data();
            let (ms, vs) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = grads[i];
                ms[i] = c.beta1 * ms[i] + (1.0 - c.beta1) * gi;
                vs[i] = c.beta2 * vs[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * *w);
            }
        }
    }

    /// State as named tensors for a checkpoint.
    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![(STEP_RECORD.to_string(), Tensor::scalar(self.step as f64))];
        out.extend(self.m.iter().map(|(k, t)| (format!("optim.m.{k}"), t.clone())));
        out.extend(self.v.iter().map(|(k, t)| (format!("optim.v.{k}"), t.clone())));
        out
    }

    /// Restore from records written by [`AdamW::to_records`]; records with
    /// other prefixes are ignored.
    pub fn from_records(cfg: AdamWConfig, records: &[(String, Tensor)]) -> Result<Self> {
        let mut out = Self::new(cfg);
        let mut seen_step = false;
        for (name, t) in records {
            if name == STEP_RECORD {
                out.step = t.item()? as u64;
                seen_step = true;
            } else if let Some(p) = name.strip_prefix("optim.m.") {
                out.m.insert(p.to_string(), t.clone());
            } else if let Some(p) = name.strip_prefix("optim.v.") {
                out.v.insert(p.to_string(), t.clone());
            }
        }
        if !seen_step {
            return Err(Error::Format("checkpoint has no optimizer step".into()));
        }
        Ok(out)
    }
}
