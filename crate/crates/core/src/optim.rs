//! Adaptive-moment optimiser and the divergence monitor shared by both
//! training stages.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "AdamConfig::default_beta1")]
    pub beta1: f64,
    #[serde(default = "AdamConfig::default_beta2")]
    pub beta2: f64,
    #[serde(default = "AdamConfig::default_eps")]
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: Self::default_beta1(),
            beta2: Self::default_beta2(),
            eps: Self::default_eps(),
        }
    }

    fn default_beta1() -> f64 {
        0.9
    }

    fn default_beta2() -> f64 {
        0.999
    }

    fn default_eps() -> f64 {
        1e-8
    }
}

pub struct Adam<T: Real> {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of `params` in place; `grads` must line up with `params`.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) {
        assert_eq!(params.len(), grads.len(), "contract violation: parameter/gradient count");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::one() - T::of(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::of(c.beta2.powi(self.step as i32));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.shape(), g.shape(), "contract violation: gradient shape");
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x = *x - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Aborts training when the loss stays above `factor` times the running
/// median of the preceding `window` losses for `patience` consecutive steps.
/// Losses flagged as outliers do not enter the median window.
#[derive(Clone, Debug)]
pub struct DivergenceMonitor {
    history: VecDeque<f64>,
    window: usize,
    factor: f64,
    patience: usize,
    run: usize,
}

impl Default for DivergenceMonitor {
    fn default() -> Self {
        Self::new(100, 10.0, 50)
    }
}

impl DivergenceMonitor {
    pub fn new(window: usize, factor: f64, patience: usize) -> Self {
        DivergenceMonitor {
            history: VecDeque::with_capacity(window),
            window,
            factor,
            patience,
            run: 0,
        }
    }

    pub fn median(&self) -> Option<f64> {
        if self.history.is_empty() {
            return None;
        }
        let mut v: Vec<f64> = self.history.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }

    pub fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        let median = self.median();
        let above = match median {
            Some(m) => !loss.is_finite() || loss > self.factor * m,
            None => !loss.is_finite(),
        };
        self.run = if above { self.run + 1 } else { 0 };
        if self.run >= self.patience {
            return Err(Error::Diverged {
                step,
                loss,
                median: median.unwrap_or(f64::NAN),
                run: self.run,
            });
        }
        if !above {
            if self.history.len() == self.window {
                self.history.pop_front();
            }
            self.history.push_back(loss);
        }
        Ok(())
    }
}
