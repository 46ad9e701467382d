#![allow(dead_code)]

use inrcodec::inr::InrConfig;
use inrcodec::nn::{seeded_rng, uniform_tensor};
use inrcodec::Tensor;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// Central differences of `f` with respect to every entry of `params`.
pub fn fd_grad(params: &[Tensor], f: impl Fn(&[Tensor]) -> f64) -> Vec<Tensor> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut g = vec![0.0; params[t].len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let x = params[t].data()[i];
            work[t].data_mut()[i] = x + FD_STEP;
            let up = f(&work);
            work[t].data_mut()[i] = x - FD_STEP;
            let down = f(&work);
            work[t].data_mut()[i] = x;
            *gi = (up - down) / (2.0 * FD_STEP);
        }
        out.push(Tensor::new(params[t].shape().to_vec(), g));
    }
    out
}

/// `|a - b| / |b|` over all entries taken together.
pub fn rel_err(a: &[Tensor], b: &[Tensor]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.shape(), y.shape());
        for (p, q) in x.data().iter().zip(y.data()) {
            diff += (p - q) * (p - q);
            norm += q * q;
        }
    }
    diff.sqrt() / norm.sqrt().max(1e-300)
}

pub fn random_tensor(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    uniform_tensor(shape, bound, rng)
}

/// A small random gated-SIREN configuration.
pub fn small_inr_config(seed: u64) -> InrConfig {
    let mut rng = seeded_rng(seed);
    let depth = rng.random_range(2..=4);
    let width = 4 * rng.random_range(1..=2);
    InrConfig {
        coord_dim: rng.random_range(1..=2),
        feature_dim: rng.random_range(1..=3),
        depth,
        width,
        omega0: [1.0, 5.0, 30.0][rng.random_range(0..3)],
        gate_rank: rng.random_range(1..=width / 4),
        gate_first_layer: rng.random_bool(0.5),
        gate_output_layer: rng.random_bool(0.3),
        latent_dim: rng.random_range(2..=6),
        predictor_width: rng.random_range(4..=8),
        predictor_blocks: rng.random_range(0..=2),
        layer_norm: rng.random_bool(0.7),
    }
}

/// Toy image set shared by the trend checks.
pub fn toy_inr_config() -> InrConfig {
    InrConfig {
        coord_dim: 2,
        feature_dim: 3,
        depth: 4,
        width: 32,
        omega0: 30.0,
        gate_rank: 1,
        gate_first_layer: false,
        gate_output_layer: false,
        latent_dim: 64,
        predictor_width: 64,
        predictor_blocks: 1,
        layer_norm: true,
    }
}

/// Five-point central differences with step `h`; truncation error is
/// fourth order, which keeps high-frequency networks within reach.
pub fn fd_grad_5pt(params: &[Tensor], h: f64, f: impl Fn(&[Tensor]) -> f64) -> Vec<Tensor> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut g = vec![0.0; params[t].len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let x = params[t].data()[i];
            let mut at = |d: f64| {
                work[t].data_mut()[i] = x + d;
                f(&work)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
            work[t].data_mut()[i] = x;
            *gi = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
        }
        out.push(Tensor::new(params[t].shape().to_vec(), g));
    }
    out
}
