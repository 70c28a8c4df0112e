use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// How per-instance losses are combined into a mini-batch loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Linear learning-rate warmup over the first `warmup_fraction` of training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupSchedule {
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
}

impl WarmupSchedule {
    pub fn new(base_lr: f64, warmup_fraction: f64, total_steps: u64) -> Result<Self> {
        if !(base_lr > 0.0) || !(0.0..=1.0).contains(&warmup_fraction) || total_steps == 0 {
            return Err(Error::Config(format!(
                "invalid warmup schedule: lr {base_lr}, fraction {warmup_fraction}, steps {total_steps}"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_fraction,
            total_steps,
        })
    }

    pub fn lr(&self, step: u64) -> f64 {
        let warm = self.warmup_fraction * self.total_steps as f64;
        if warm <= 0.0 {
            return self.base_lr;
        }
        self.base_lr * (step as f64 / warm).min(1.0)
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    schedule: Option<WarmupSchedule>,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            kind,
            lr,
            weight_decay: 0.0,
            schedule: None,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::adam(), lr)
    }

    /// L2 penalty coefficient; `weight_decay * θ` is added to each gradient.
    pub fn with_weight_decay(mut self, wd: f64) -> Result<Self> {
        if !(wd >= 0.0) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {wd}")));
        }
        self.weight_decay = wd;
        Ok(self)
    }

    /// Replaces the fixed learning rate by `schedule`.
    pub fn with_schedule(mut self, schedule: WarmupSchedule) -> Self {
        self.schedule = Some(schedule);
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate that the next call to [`Self::step`] will use.
    pub fn current_lr(&self) -> f64 {
        match &self.schedule {
            Some(s) => s.lr(self.step + 1),
            None => self.lr,
        }
    }

    /// Applies one update. Parameters without a gradient are left alone.
    /// A non-finite gradient aborts the step before anything changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {}", store.name(id))));
            }
            if g.shape() != store.get(id).shape() {
                return Err(Error::shape(
                    "optimizer step",
                    format!("{}: grad {:?} vs param {:?}", store.name(id), g.shape(), store.get(id).shape()),
                ));
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        for (id, g) in grads.iter() {
            let wd = self.weight_decay;
            let param = store.get_mut(id);
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, &gi) in param.data_mut().iter_mut().zip(g.data()) {
                        *p -= lr * (gi + wd * *p);
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (m, v) = self
                        .moments
                        .entry(id)
                        .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (md, vd) = (m.data_mut(), v.data_mut());
                    for (i, p) in param.data_mut().iter_mut().enumerate() {
                        let gi = g.data()[i] + wd * *p;
                        md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                        vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                        let mhat = md[i] / c1;
                        let vhat = vd[i] / c2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
