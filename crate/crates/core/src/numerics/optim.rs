//! Parameters, AdamW, and the warmup + cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::rng::SeededRng;
use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Named trainable tensors together with their AdamW moments.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S = f32> {
    params: BTreeMap<String, Tensor<S>>,
    first_moment: BTreeMap<String, Tensor<S>>,
    second_moment: BTreeMap<String, Tensor<S>>,
    step: u64,
}

/// Parameter handles bound onto one tape.
pub struct Bound(BTreeMap<String, Var>);

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .0
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        let name = name.into();
        self.first_moment
            .insert(name.clone(), Tensor::zeros(value.shape()));
        self.second_moment
            .insert(name.clone(), Tensor::zeros(value.shape()));
        self.params.insert(name, value);
    }

    /// Xavier-uniform `[fan_in, fan_out]` weight.
    pub fn insert_xavier(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut SeededRng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-limit, limit))
            .collect();
        self.insert(name, Tensor::from_f64(&[fan_in, fan_out], &data));
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Registers every parameter as a named leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<S>) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|(name, t)| (name.clone(), tape.param(name.clone(), t.clone())))
                .collect(),
        )
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape<S>) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|(name, t)| (name.clone(), tape.constant(t.clone())))
                .collect(),
        )
    }
}

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

impl AdamW {
    /// One decoupled-weight-decay Adam update with bias-corrected moments.
    pub fn step<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        grads: &BTreeMap<String, Tensor<S>>,
        lr: f64,
    ) -> Result<()> {
        for (name, p) in &store.params {
            match grads.get(name) {
                Some(g) if g.shape() == p.shape() => {}
                Some(g) => {
                    return Err(Error::Shape(format!(
                        "gradient for {name} has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )))
                }
                None => return Err(Error::Shape(format!("missing gradient for {name}"))),
            }
        }
        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in store.params.iter_mut() {
            let g = &grads[name];
            let m = store.first_moment.get_mut(name).expect("moment");
            let v = store.second_moment.get_mut(name).expect("moment");
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let gf = gi.to_f64();
                let mf = self.beta1 * mi.to_f64() + (1.0 - self.beta1) * gf;
                let vf = self.beta2 * vi.to_f64() + (1.0 - self.beta2) * gf * gf;
                *mi = S::from_f64(mf);
                *vi = S::from_f64(vf);
                let m_hat = mf / bc1;
                let v_hat = vf / bc2;
                let pf = pi.to_f64();
                let updated =
                    pf - lr * self.weight_decay * pf - lr * m_hat / (v_hat.sqrt() + self.eps);
                *pi = S::from_f64(updated);
            }
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1.5e-4,
            warmup_steps: 500,
            total_steps: 3000,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "schedule needs warmup_steps ({}) < total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let progress =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// AdamW driven by a schedule; the learning rate follows the store's step
/// counter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Optimizer {
    #[serde(default)]
    pub adamw: AdamW,
    #[serde(default)]
    pub schedule: LrSchedule,
}

impl Optimizer {
    pub fn with_schedule(schedule: LrSchedule) -> Self {
        Self {
            adamw: AdamW::default(),
            schedule,
        }
    }

    /// Applies one update and returns the learning rate used.
    pub fn update<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        grads: &BTreeMap<String, Tensor<S>>,
    ) -> Result<f64> {
        let lr = self.schedule.lr_at(store.step() + 1);
        self.adamw.step(store, grads, lr)?;
        Ok(lr)
    }
}
