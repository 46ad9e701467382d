//! MetaSGD meta-training of the shared network, the latent initialisation
//! `phi0` and per-dimension inner-loop step sizes `alpha`.
//!
//! The inner loop adapts `phi <- phi - alpha ⊙ ∇phi MSE` starting from
//! `phi0`. The outer loop differentiates the post-adaptation MSE through the
//! whole inner loop (second order by default) and updates `theta`, `phi0`
//! and `alpha` with Adam, clamping `alpha` afterwards.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::binio::{Reader, Writer};
use crate::data::{FeatureNorm, PatchSet};
use crate::error::{Error, Result};
use crate::inr::{BoundInr, InrConfig, InrParams};
use crate::nn::{seeded_rng, Parameters};
use crate::optim::{Adam, AdamConfig, DivergenceMonitor};
use crate::par::Pool;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaTrainConfig {
    pub inner_steps: usize,
    pub outer: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub alpha_init: f64,
    /// Step sizes are clamped to `[-alpha_limit, alpha_limit]`.
    pub alpha_limit: f64,
    /// Standard deviation of the Gaussian draw for `phi0`; zero starts from
    /// the origin.
    pub phi0_init_std: f64,
    /// Treat inner-loop gradients as constants in the outer update.
    pub first_order: bool,
    pub threads: usize,
    pub log_every: usize,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            inner_steps: 3,
            outer: AdamConfig::with_lr(3e-6),
            batch_size: 32,
            steps: 1000,
            seed: 0,
            alpha_init: 1.0,
            alpha_limit: 5.0,
            phi0_init_std: 0.0,
            first_order: false,
            threads: 1,
            log_every: 0,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps < 1 {
            return Err(Error::Config("inner_steps must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.alpha_limit > 0.0) {
            return Err(Error::Config("alpha_limit must be positive".into()));
        }
        if !(self.phi0_init_std >= 0.0) {
            return Err(Error::Config("phi0_init_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// Everything needed to encode new items: shared network, `phi0`, `alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaModel<T: Real = f64> {
    pub inr: InrParams<T>,
    /// `[1, latent_dim]`
    pub phi0: Tensor<T>,
    /// `[1, latent_dim]`
    pub alpha: Tensor<T>,
}

const CKPT_MAGIC: &[u8; 4] = b"VCMC";
const CKPT_VERSION: u8 = 1;

impl<T: Real> MetaModel<T> {
    pub fn init(config: &InrConfig, train: &MetaTrainConfig) -> Result<Self> {
        let inr = InrParams::init(config, train.seed)?;
        let mut rng = seeded_rng(train.seed ^ 0x9e37_79b9_7f4a_7c15);
        let n = config.latent_dim;
        let phi0 = if train.phi0_init_std > 0.0 {
            let normal = Normal::new(0.0, train.phi0_init_std)
                .map_err(|e| Error::Config(format!("phi0_init_std: {e}")))?;
            (0..n).map(|_| T::of(normal.sample(&mut rng))).collect()
        } else {
            vec![T::zero(); n]
        };
        Ok(MetaModel {
            inr,
            phi0: Tensor::new([1, n], phi0),
            alpha: Tensor::full([1, n], T::of(train.alpha_init)),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.inr.config.latent_dim
    }

    /// Hash of the shared network record; this is what bitstreams pair with.
    pub fn hash(&self) -> u64 {
        self.inr.hash()
    }

    pub fn clamp_alpha(&mut self, limit: f64) {
        let lim = T::of(limit);
        for a in self.alpha.data_mut() {
            *a = a.max(-lim).min(lim);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CKPT_MAGIC)
            .u8(CKPT_VERSION)
            .bytes(&self.inr.to_bytes())
            .tensor(&self.phi0)
            .tensor(&self.alpha);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(CKPT_MAGIC)?;
        let version = r.u8()?;
        if version != CKPT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let (inr, used) = InrParams::from_bytes(&bytes[r.position()..])?;
        r.take(used)?;
        let phi0: Tensor<T> = r.tensor()?;
        let alpha: Tensor<T> = r.tensor()?;
        let n = inr.config.latent_dim;
        if phi0.shape() != [1, n] || alpha.shape() != [1, n] {
            return Err(Error::format("latent init / step size shapes do not match the model"));
        }
        Ok(MetaModel { inr, phi0, alpha })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.inr.tensors_mut();
        v.push(&mut self.phi0);
        v.push(&mut self.alpha);
        v
    }
}

/// Runs `steps` inner updates on `tape`. With `differentiable` set the
/// inner gradients stay on the tape so an outer gradient can flow through
/// them. Returns the adapted latent and `MSE(phi_k)` for `k < steps`.
pub fn inner_adapt<'t, T: Real>(
    net: &BoundInr<'t, T>,
    coords: Var<'t, T>,
    target: Var<'t, T>,
    phi0: Var<'t, T>,
    alpha: Var<'t, T>,
    steps: usize,
    differentiable: bool,
) -> Result<(Var<'t, T>, Vec<f64>)> {
    let tape = coords.tape();
    let mut phi = phi0;
    let mut losses = Vec::with_capacity(steps);
    for k in 0..steps {
        let loss = net
            .forward(coords, phi)
            .map_err(|e| e.at(format!("inner step {k}")))?
            .mse(target);
        let value = loss.item().as_f64();
        if !value.is_finite() {
            return Err(Error::NumericFault {
                op: "mse".into(),
                location: format!("inner step {k}"),
            });
        }
        losses.push(value);
        let g = if differentiable {
            tape.grad(loss, &[phi])?[0]
        } else {
            let g = tape.gradients(loss, &[phi])?;
            tape.constant(g.into_iter().next().expect("one gradient"))
        };
        phi = phi - alpha * g;
    }
    Ok((phi, losses))
}

/// Latent for one item: `steps` first-order adaptation steps from `phi0`.
pub fn encode_latent<T: Real>(model: &MetaModel<T>, coords: &Tensor<T>, features: &Tensor<T>, steps: usize) -> Result<Tensor<T>> {
    Ok(adaptation_trace(model, coords, features, steps)?.0)
}

/// Adapted latent `[latent_dim]` and `MSE(phi_k)` for `k = 0..=steps`.
pub fn adaptation_trace<T: Real>(
    model: &MetaModel<T>,
    coords: &Tensor<T>,
    features: &Tensor<T>,
    steps: usize,
) -> Result<(Tensor<T>, Vec<f64>)> {
    let tape = Tape::new();
    let net = model.inr.bind(&tape, false);
    let coords = tape.constant(coords.clone());
    let target = tape.constant(features.clone());
    // A leaf, so the inner gradients have something to differentiate.
    let phi0 = tape.var(model.phi0.clone());
    let alpha = tape.constant(model.alpha.clone());
    let (phi, mut losses) = inner_adapt(&net, coords, target, phi0, alpha, steps, false)?;
    let last = net.forward(coords, phi)?.mse(target);
    tape.check()?;
    losses.push(last.item().as_f64());
    let n = model.latent_dim();
    Ok(((*phi.value()).clone().reshaped([n]), losses))
}

/// Post-adaptation loss of one item and its gradient with respect to every
/// trainable tensor (`theta` in canonical order, then `phi0`, then `alpha`).
pub fn outer_gradient<T: Real>(
    model: &MetaModel<T>,
    coords: &Tensor<T>,
    features: &Tensor<T>,
    config: &MetaTrainConfig,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let tape = Tape::with_max_depth(config.inner_steps as u32 + 2);
    let net = model.inr.bind(&tape, true);
    let coords = tape.constant(coords.clone());
    let target = tape.constant(features.clone());
    let phi0 = tape.var(model.phi0.clone());
    let alpha = tape.var(model.alpha.clone());
    let (phi, _) = inner_adapt(&net, coords, target, phi0, alpha, config.inner_steps, !config.first_order)?;
    let loss = net.forward(coords, phi).map_err(|e| e.at("outer loss"))?.mse(target);
    let mut wrt = net.vars();
    wrt.push(phi0);
    wrt.push(alpha);
    let grads = tape.gradients(loss, &wrt)?;
    Ok((loss.item().as_f64(), grads))
}

/// One meta-update on the items `batch` of `data`. Per-item gradients are
/// averaged in batch order. Returns the mean post-adaptation loss.
pub fn outer_step<T: Real>(
    model: &mut MetaModel<T>,
    optimizer: &mut Adam<T>,
    data: &PatchSet<T>,
    batch: &[usize],
    config: &MetaTrainConfig,
    pool: &Pool,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("outer_step needs a non-empty batch"));
    }
    let snapshot = &*model;
    let results = pool.map(batch, |i| outer_gradient(snapshot, &data.coords, &data.features[i], config));
    let scale = T::one() / T::of(batch.len() as f64);
    let mut loss = 0.0;
    let mut total: Option<Vec<Tensor<T>>> = None;
    for r in results {
        let (l, grads) = r?;
        loss += l;
        total = Some(match total {
            None => grads,
            Some(acc) => acc.iter().zip(&grads).map(|(a, g)| a.zip_map(g, |x, y| x + y)).collect(),
        });
    }
    let grads: Vec<Tensor<T>> = total.expect("non-empty batch").into_iter().map(|g| g.map(|x| x * scale)).collect();
    optimizer.step(model.tensors_mut(), &grads);
    model.clamp_alpha(config.alpha_limit);
    Ok(loss / batch.len() as f64)
}

/// Per-dimension statistics of the emitted latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    /// Population statistics; a zero spread is floored so that normalising
    /// stays invertible.
    pub fn from_latents<T: Real>(latents: &[Tensor<T>]) -> Self {
        assert!(!latents.is_empty(), "contract violation: no latents");
        let n = latents[0].len();
        let count = latents.len() as f64;
        let mut mean = vec![0.0; n];
        for l in latents {
            for (m, x) in mean.iter_mut().zip(l.data()) {
                *m += x.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n];
        for l in latents {
            for ((v, x), m) in var.iter_mut().zip(l.data()).zip(&mean) {
                let d = x.as_f64() - m;
                *v += d * d;
            }
        }
        let std = var.iter().map(|v| (v / count).sqrt().max(1e-8)).collect();
        LatentStats { mean, std }
    }
}

/// Sidecar written next to a meta-training checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingStats {
    pub latent: LatentStats,
    pub features: FeatureNorm,
}

impl TrainingStats {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(format!("stats sidecar: {e}")))
    }
}

pub struct MetaTrainOutput<T: Real> {
    pub model: MetaModel<T>,
    /// One `[latent_dim]` latent per training item, in dataset order.
    pub latents: Vec<Tensor<T>>,
    pub stats: LatentStats,
    pub losses: Vec<f64>,
}

/// Meta-trains from scratch and emits one adapted latent per item.
pub fn meta_train<T: Real>(data: &PatchSet<T>, inr: &InrConfig, config: &MetaTrainConfig) -> Result<MetaTrainOutput<T>> {
    config.validate()?;
    let model = MetaModel::init(inr, config)?;
    meta_train_from(model, data, config)
}

pub fn meta_train_from<T: Real>(mut model: MetaModel<T>, data: &PatchSet<T>, config: &MetaTrainConfig) -> Result<MetaTrainOutput<T>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::contract("meta_train needs at least one item"));
    }
    let pool = Pool::new(config.threads);
    let mut optimizer = Adam::new(config.outer);
    let mut monitor = DivergenceMonitor::default();
    let mut rng = seeded_rng(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(config.steps);
    let bs = config.batch_size.min(data.len());
    for step in 0..config.steps {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = &order[cursor..cursor + bs];
        cursor += bs;
        let loss = outer_step(&mut model, &mut optimizer, data, batch, config, &pool)
            .map_err(|e| e.at(format!("outer step {step}")))?;
        monitor.observe(step, loss)?;
        if config.log_every > 0 && step % config.log_every == 0 {
            log::info!("meta step {step}: loss {loss:.6e}");
        }
        losses.push(loss);
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let latents = pool
        .map(&all, |i| encode_latent(&model, &data.coords, &data.features[i], config.inner_steps))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let stats = LatentStats::from_latents(&latents);
    Ok(MetaTrainOutput {
        model,
        latents,
        stats,
        losses,
    })
}

/// Post-adaptation latents for `data`, in order.
pub fn encode_all<T: Real>(model: &MetaModel<T>, data: &PatchSet<T>, steps: usize, threads: usize) -> Result<Vec<Tensor<T>>> {
    let all: Vec<usize> = (0..data.len()).collect();
    Pool::new(threads)
        .map(&all, |i| encode_latent(model, &data.coords, &data.features[i], steps))
        .into_iter()
        .collect()
}
