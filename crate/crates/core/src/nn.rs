//! Affine layers and parameter plumbing shared by the networks.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::binio::{Reader, Writer};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor<T: Real>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if bound > 0.0 {
                T::of(rng.random_range(-bound..=bound))
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// `y = x Wᵀ + b` with `W: [out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Real = f64> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn uniform(fan_out: usize, fan_in: usize, w_bound: f64, b_bound: f64, rng: &mut impl Rng) -> Self {
        Linear {
            weight: uniform_tensor(&[fan_out, fan_in], w_bound, rng),
            bias: uniform_tensor(&[fan_out], b_bound, rng),
        }
    }

    /// Default fan-in scaled initialisation.
    pub fn fan_in(fan_out: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let b = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self::uniform(fan_out, fan_in, b, b, rng)
    }

    pub fn zeros(fan_out: usize, fan_in: usize) -> Self {
        Linear {
            weight: Tensor::zeros([fan_out, fan_in]),
            bias: Tensor::zeros([fan_out]),
        }
    }

    pub fn fan_in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> BoundLinear<'t, T> {
        let leaf = |t: &Tensor<T>| if trainable { tape.var(t.clone()) } else { tape.constant(t.clone()) };
        BoundLinear {
            weight: leaf(&self.weight),
            bias: leaf(&self.bias),
        }
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.tensor(&self.weight).tensor(&self.bias);
    }

    pub(crate) fn read(r: &mut Reader) -> Result<Self> {
        Ok(Linear {
            weight: r.tensor()?,
            bias: r.tensor()?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear<'t, T: Real> {
    pub weight: Var<'t, T>,
    pub bias: Var<'t, T>,
}

impl<'t, T: Real> BoundLinear<'t, T> {
    pub fn forward(&self, x: Var<'t, T>) -> Var<'t, T> {
        x.matmul_t(self.weight, false, true).add_bias(self.bias)
    }
}

/// Fixed-order access to every trainable tensor of a model, used by the
/// optimiser and by gradient bookkeeping.
pub trait Parameters<T: Real> {
    fn tensors(&self) -> Vec<&Tensor<T>>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}
