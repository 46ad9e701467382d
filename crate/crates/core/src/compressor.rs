//! Transform coding of latent modulations: residual SeLU analysis and
//! synthesis networks, a factorized cumulative entropy model, and the
//! rate-distortion training loop with a frozen INR.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::binio::{content_hash, Reader, Writer};
use crate::coder::{quantize, PmfTable};
use crate::data::PatchSet;
use crate::error::{Error, Result};
use crate::meta::{LatentStats, MetaModel};
use crate::nn::{seeded_rng, uniform_tensor, BoundLinear, Linear, Parameters};
use crate::optim::{Adam, AdamConfig, DivergenceMonitor};
use crate::par::Pool;
use crate::tensor::Tensor;

/// Probabilities inside the rate term are floored here.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;
/// Margin added on both sides of the observed code range.
pub const SUPPORT_MARGIN: i32 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RdConfig {
    pub lambda: f64,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Hidden width of both transforms.
    pub width: usize,
    pub blocks: usize,
    pub code_dim: usize,
    /// Hidden units per stage of the cumulative model.
    pub filters: Vec<usize>,
    pub init_scale: f64,
    pub threads: usize,
    pub log_every: usize,
}

impl Default for RdConfig {
    fn default() -> Self {
        RdConfig {
            lambda: 1.0,
            optimizer: AdamConfig::with_lr(1e-4),
            batch_size: 32,
            steps: 1000,
            seed: 0,
            width: 2048,
            blocks: 1,
            code_dim: 1024,
            filters: vec![3, 3, 3],
            init_scale: 10.0,
            threads: 1,
            log_every: 0,
        }
    }
}

impl RdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.batch_size == 0 || self.width == 0 || self.code_dim == 0 {
            return Err(Error::Config("batch_size, width and code_dim must be positive".into()));
        }
        if self.filters.contains(&0) {
            return Err(Error::Config("entropy model filters must be positive".into()));
        }
        Ok(())
    }
}

pub fn normalize_phi(phi: &[f64], stats: &LatentStats) -> Vec<f64> {
    assert_eq!(phi.len(), stats.mean.len(), "contract violation: latent/stat dims");
    phi.iter().zip(&stats.mean).zip(&stats.std).map(|((x, m), s)| (x - m) / s).collect()
}

pub fn denormalize_phi(phi_n: &[f64], stats: &LatentStats) -> Vec<f64> {
    assert_eq!(phi_n.len(), stats.mean.len(), "contract violation: latent/stat dims");
    phi_n.iter().zip(&stats.mean).zip(&stats.std).map(|((x, m), s)| x * s + m).collect()
}

/// `x -> selu(in(x))`, residual blocks `h + selu(l2(selu(l1(h))))`, then a
/// linear read-out.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMlp {
    pub input: Linear,
    pub blocks: Vec<[Linear; 2]>,
    pub output: Linear,
}

impl ResidualMlp {
    pub fn init(fan_in: usize, width: usize, blocks: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        ResidualMlp {
            input: Linear::fan_in(width, fan_in, rng),
            blocks: (0..blocks)
                .map(|_| [Linear::fan_in(width, width, rng), Linear::fan_in(width, width, rng)])
                .collect(),
            output: Linear::fan_in(fan_out, width, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.input.fan_in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.output.fan_out_dim()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        BoundMlp {
            input: self.input.bind(tape, trainable),
            blocks: self
                .blocks
                .iter()
                .map(|[a, b]| [a.bind(tape, trainable), b.bind(tape, trainable)])
                .collect(),
            output: self.output.bind(tape, trainable),
        }
    }

    /// Row-wise evaluation of `x: [B, in]`.
    pub fn eval(&self, x: &Tensor) -> Tensor {
        let tape = Tape::new();
        let net = self.bind(&tape, false);
        let y = net.forward(tape.constant(x.clone()));
        (*y.value()).clone()
    }

}

impl Parameters<f64> for ResidualMlp {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.input.weight, &self.input.bias];
        for [a, b] in &self.blocks {
            v.extend([&a.weight, &a.bias, &b.weight, &b.bias]);
        }
        v.extend([&self.output.weight, &self.output.bias]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.input.weight, &mut self.input.bias];
        for [a, b] in &mut self.blocks {
            v.extend([&mut a.weight, &mut a.bias, &mut b.weight, &mut b.bias]);
        }
        v.extend([&mut self.output.weight, &mut self.output.bias]);
        v
    }
}

impl ResidualMlp {
    fn write(&self, w: &mut Writer) {
        self.input.write(w);
        w.usize32(self.blocks.len());
        for [a, b] in &self.blocks {
            a.write(w);
            b.write(w);
        }
        self.output.write(w);
    }

    fn read(r: &mut Reader) -> Result<Self> {
        let input = Linear::read(r)?;
        let n = r.u32()? as usize;
        let blocks = (0..n)
            .map(|_| Ok([Linear::read(r)?, Linear::read(r)?]))
            .collect::<Result<Vec<_>>>()?;
        let output = Linear::read(r)?;
        let width = input.fan_out_dim();
        let all: Vec<&Linear> = std::iter::once(&input)
            .chain(blocks.iter().flatten())
            .chain(std::iter::once(&output))
            .collect();
        let chain_ok = all[1..].iter().all(|l| l.fan_in_dim() == width)
            && all[..all.len() - 1].iter().all(|l| l.fan_out_dim() == width)
            && all.iter().all(|l| l.bias.shape() == [l.fan_out_dim()]);
        if !chain_ok {
            return Err(Error::format("residual MLP layer shapes do not chain"));
        }
        Ok(ResidualMlp { input, blocks, output })
    }
}

pub struct BoundMlp<'t> {
    input: BoundLinear<'t, f64>,
    blocks: Vec<[BoundLinear<'t, f64>; 2]>,
    output: BoundLinear<'t, f64>,
}

impl<'t> BoundMlp<'t> {
    pub fn forward(&self, x: Var<'t>) -> Var<'t> {
        let mut h = self.input.forward(x).selu();
        for [a, b] in &self.blocks {
            h = h + b.forward(a.forward(h).selu()).selu();
        }
        self.output.forward(h)
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut v = vec![self.input.weight, self.input.bias];
        for [a, b] in &self.blocks {
            v.extend([a.weight, a.bias, b.weight, b.bias]);
        }
        v.extend([self.output.weight, self.output.bias]);
        v
    }
}

/// Per-dimension monotone cumulative model. Stage `k` maps the unit vector
/// `x` to `softplus(H_k) x + b_k`, followed by `u + tanh(a_k) tanh(u)` on all
/// stages but the last; the last stage yields one logit per dimension.
///
/// `matrices[k]` is `[out * in, D]` (row `i * in + j` holds `H_k[i, j]` for
/// every dimension), `biases[k]` is `[out, D]`, `factors[k]` is `[out, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyModel {
    pub dims: usize,
    /// Stage widths including the scalar input and output: `1, f.., 1`.
    pub filters: Vec<usize>,
    pub matrices: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub factors: Vec<Tensor>,
}

impl EntropyModel {
    pub fn init(dims: usize, hidden: &[usize], init_scale: f64, rng: &mut impl Rng) -> Self {
        let mut filters = vec![1];
        filters.extend_from_slice(hidden);
        filters.push(1);
        let stages = filters.len() - 1;
        let scale = init_scale.powf(1.0 / stages as f64);
        let mut m = EntropyModel {
            dims,
            filters: filters.clone(),
            matrices: Vec::new(),
            biases: Vec::new(),
            factors: Vec::new(),
        };
        for k in 0..stages {
            let (fi, fo) = (filters[k], filters[k + 1]);
            let h0 = (1.0 / scale / fo as f64).exp_m1().ln();
            m.matrices.push(Tensor::full([fo * fi, dims], h0));
            m.biases.push(uniform_tensor(&[fo, dims], 0.5, rng));
            if k + 1 < stages {
                m.factors.push(Tensor::zeros([fo, dims]));
            }
        }
        m
    }

    /// `c(x) = sigmoid(x / scale)` on every dimension.
    pub fn logistic(dims: usize, scale: f64) -> Self {
        assert!(scale > 0.0, "contract violation: logistic scale must be positive");
        let h = (1.0 / scale).exp_m1().ln();
        EntropyModel {
            dims,
            filters: vec![1, 1],
            matrices: vec![Tensor::full([1, dims], h)],
            biases: vec![Tensor::zeros([1, dims])],
            factors: vec![],
        }
    }

    fn stages(&self) -> usize {
        self.matrices.len()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundEntropy<'t> {
        let leaf = |t: &Tensor| if trainable { tape.var(t.clone()) } else { tape.constant(t.clone()) };
        BoundEntropy {
            dims: self.dims,
            filters: self.filters.clone(),
            matrices: self.matrices.iter().map(leaf).collect(),
            biases: self.biases.iter().map(leaf).collect(),
            factors: self.factors.iter().map(leaf).collect(),
        }
    }

    /// Cumulative logit of dimension `d` at `x`, evaluated in a fixed order.
    pub fn logit(&self, d: usize, x: f64) -> f64 {
        let sp = crate::autodiff::softplus::<f64>;
        let mut units = vec![x];
        let stages = self.stages();
        for k in 0..stages {
            let (fi, fo) = (self.filters[k], self.filters[k + 1]);
            let h = self.matrices[k].data();
            let b = self.biases[k].data();
            let mut next = Vec::with_capacity(fo);
            for i in 0..fo {
                let mut u = b[i * self.dims + d];
                for (j, &xj) in units.iter().enumerate() {
                    u += sp(h[(i * fi + j) * self.dims + d]) * xj;
                }
                if k + 1 < stages {
                    u += self.factors[k].data()[i * self.dims + d].tanh() * u.tanh();
                }
                next.push(u);
            }
            units = next;
        }
        units[0]
    }

    pub fn cdf(&self, d: usize, x: f64) -> f64 {
        crate::autodiff::sigmoid(self.logit(d, x))
    }

    /// Mass of `[v - 1/2, v + 1/2]` on dimension `d`, computed on the side of
    /// the median where the sigmoid does not saturate.
    pub fn pmf(&self, d: usize, v: f64) -> f64 {
        let lo = self.logit(d, v - 0.5);
        let hi = self.logit(d, v + 0.5);
        let s = if lo + hi > 0.0 { -1.0 } else { 1.0 };
        let sig = crate::autodiff::sigmoid::<f64>;
        (s * (sig(s * hi) - sig(s * lo))).abs()
    }

    fn write(&self, w: &mut Writer) {
        w.usize32(self.dims).usize32(self.filters.len());
        for &f in &self.filters {
            w.usize32(f);
        }
        for t in self.tensors() {
            w.tensor(t);
        }
    }

    fn read(r: &mut Reader) -> Result<Self> {
        let dims = r.u32()? as usize;
        let n = r.u32()? as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::format(format!("entropy model with {n} stage widths")));
        }
        let filters = (0..n).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let stages = n - 1;
        let mut read_n = |count: usize| (0..count).map(|_| r.tensor()).collect::<Result<Vec<Tensor>>>();
        let matrices = read_n(stages)?;
        let biases = read_n(stages)?;
        let factors = read_n(stages - 1)?;
        let m = EntropyModel {
            dims,
            filters,
            matrices,
            biases,
            factors,
        };
        for k in 0..stages {
            let (fi, fo) = (m.filters[k], m.filters[k + 1]);
            let ok = m.matrices[k].shape() == [fo * fi, dims]
                && m.biases[k].shape() == [fo, dims]
                && (k + 1 == stages || m.factors[k].shape() == [fo, dims]);
            if !ok {
                return Err(Error::format(format!("entropy model stage {k} has wrong shapes")));
            }
        }
        if m.filters[0] != 1 || m.filters[n - 1] != 1 {
            return Err(Error::format("entropy model must map scalars to scalars"));
        }
        Ok(m)
    }
}

impl Parameters<f64> for EntropyModel {
    /// Matrices, biases, then factors, each in stage order.
    fn tensors(&self) -> Vec<&Tensor> {
        self.matrices.iter().chain(&self.biases).chain(&self.factors).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.matrices.iter_mut().chain(&mut self.biases).chain(&mut self.factors).collect()
    }
}

pub struct BoundEntropy<'t> {
    dims: usize,
    filters: Vec<usize>,
    matrices: Vec<Var<'t>>,
    biases: Vec<Var<'t>>,
    factors: Vec<Var<'t>>,
}

impl<'t> BoundEntropy<'t> {
    /// Cumulative logits of `v: [B, D]`.
    pub fn logits(&self, v: Var<'t>) -> Var<'t> {
        let (b, d) = v.value().dims2();
        assert_eq!(d, self.dims, "contract violation: entropy model has {} dims, got {d}", self.dims);
        let stages = self.matrices.len();
        let mut units = vec![v];
        for k in 0..stages {
            let (fi, fo) = (self.filters[k], self.filters[k + 1]);
            let h = self.matrices[k].softplus();
            let mut next = Vec::with_capacity(fo);
            for i in 0..fo {
                let mut u = self.biases[k].slice(i * d, &[d]).broadcast_rows(b);
                for (j, &xj) in units.iter().enumerate() {
                    u = u + h.slice((i * fi + j) * d, &[d]).broadcast_rows(b) * xj;
                }
                if k + 1 < stages {
                    let a = self.factors[k].slice(i * d, &[d]).tanh().broadcast_rows(b);
                    u = u + a * u.tanh();
                }
                next.push(u);
            }
            units = next;
        }
        units[0]
    }

    /// `c(v + 1/2) - c(v - 1/2)`, floored at [`LIKELIHOOD_FLOOR`].
    pub fn likelihood(&self, v: Var<'t>) -> Var<'t> {
        let tape = v.tape();
        let lo = self.logits(v.shift(-0.5));
        let hi = self.logits(v.shift(0.5));
        let sign = lo.value().zip_map(&hi.value(), |a, b| if a + b > 0.0 { -1.0 } else { 1.0 });
        let s = tape.constant(sign);
        let p = s * ((s * hi).sigmoid() - (s * lo).sigmoid());
        p.clamp_min(LIKELIHOOD_FLOOR)
    }

    /// `sum(-log2 p(v))` over every entry.
    pub fn rate_bits(&self, v: Var<'t>) -> Var<'t> {
        self.likelihood(v).ln().sum().scale(-1.0 / std::f64::consts::LN_2)
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        self.matrices.iter().chain(&self.biases).chain(&self.factors).copied().collect()
    }
}

/// Trained transforms, entropy model and the tables derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Compressor {
    pub inr_hash: u64,
    pub lambda: f64,
    pub stats: LatentStats,
    pub analysis: ResidualMlp,
    pub synthesis: ResidualMlp,
    pub entropy: EntropyModel,
    /// Inclusive code range per dimension; empty until fitted.
    pub supports: Vec<(i32, i32)>,
}

const QZ_MAGIC: &[u8; 4] = b"VCQZ";
const QZ_VERSION: u8 = 1;

impl Compressor {
    pub fn init(latent_dim: usize, stats: LatentStats, inr_hash: u64, config: &RdConfig) -> Result<Self> {
        config.validate()?;
        if stats.mean.len() != latent_dim || stats.std.len() != latent_dim {
            return Err(Error::Config("latent statistics do not match the latent dimension".into()));
        }
        if stats.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("latent statistics need positive spreads".into()));
        }
        let mut rng = seeded_rng(config.seed ^ 0x5eed_c0de);
        let analysis = ResidualMlp::init(latent_dim, config.width, config.blocks, config.code_dim, &mut rng);
        let synthesis = ResidualMlp::init(config.code_dim, config.width, config.blocks, latent_dim, &mut rng);
        let entropy = EntropyModel::init(config.code_dim, &config.filters, config.init_scale, &mut rng);
        Ok(Compressor {
            inr_hash,
            lambda: config.lambda,
            stats,
            analysis,
            synthesis,
            entropy,
            supports: Vec::new(),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.analysis.in_dim()
    }

    pub fn code_dim(&self) -> usize {
        self.analysis.out_dim()
    }

    /// Continuous code for one latent.
    pub fn analyse(&self, phi: &[f64]) -> Vec<f64> {
        let x = Tensor::new([1, phi.len()], normalize_phi(phi, &self.stats));
        self.analysis.eval(&x).into_data()
    }

    /// Latent reconstructed from a (quantised or noisy) code.
    pub fn synthesise(&self, code: &[f64]) -> Vec<f64> {
        let z = Tensor::new([1, code.len()], code.to_vec());
        denormalize_phi(self.synthesis.eval(&z).data(), &self.stats)
    }

    pub fn encode_code(&self, phi: &[f64]) -> Vec<i32> {
        self.analyse(phi).into_iter().map(quantize).collect()
    }

    pub fn decode_code(&self, code: &[i32]) -> Vec<f64> {
        let z: Vec<f64> = code.iter().map(|&c| c as f64).collect();
        self.synthesise(&z)
    }

    /// Sets each support to the observed code range widened by the margin.
    pub fn fit_supports(&mut self, latents: &[Tensor]) {
        let d = self.code_dim();
        let mut lo = vec![i32::MAX; d];
        let mut hi = vec![i32::MIN; d];
        for phi in latents {
            for (k, c) in self.encode_code(phi.data()).into_iter().enumerate() {
                lo[k] = lo[k].min(c);
                hi[k] = hi[k].max(c);
            }
        }
        self.supports = lo
            .into_iter()
            .zip(hi)
            .map(|(l, h)| {
                if l > h {
                    (-SUPPORT_MARGIN, SUPPORT_MARGIN)
                } else {
                    (l.saturating_sub(SUPPORT_MARGIN), h.saturating_add(SUPPORT_MARGIN))
                }
            })
            .collect();
    }

    /// One escape-capable table per code dimension.
    pub fn tables(&self) -> Result<Vec<PmfTable>> {
        if self.supports.len() != self.code_dim() {
            return Err(Error::contract("code supports have not been fitted"));
        }
        self.supports
            .iter()
            .enumerate()
            .map(|(d, &(lo, hi))| PmfTable::from_pmf(lo, hi, |v| self.entropy.pmf(d, v as f64)))
            .collect()
    }

    pub fn body_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.inr_hash).f64(self.lambda);
        let n = self.stats.mean.len();
        w.tensor(&Tensor::new([n], self.stats.mean.clone()))
            .tensor(&Tensor::new([n], self.stats.std.clone()));
        self.analysis.write(&mut w);
        self.synthesis.write(&mut w);
        self.entropy.write(&mut w);
        w.usize32(self.supports.len());
        for &(lo, hi) in &self.supports {
            w.i32(lo).i32(hi);
        }
        w.finish()
    }

    pub fn hash(&self) -> u64 {
        content_hash(&self.body_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let body = self.body_bytes();
        let mut w = Writer::new();
        w.bytes(QZ_MAGIC)
            .u8(QZ_VERSION)
            .u64(content_hash(&body))
            .u64(body.len() as u64)
            .bytes(&body);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(QZ_MAGIC)?;
        let version = r.u8()?;
        if version != QZ_VERSION {
            return Err(Error::format(format!("unsupported quantizer version {version}")));
        }
        let expected = r.u64()?;
        let len = r.u64()? as usize;
        let body = r.take(len)?;
        let found = content_hash(body);
        if found != expected {
            return Err(Error::HashMismatch {
                what: "quantizer record",
                expected,
                found,
            });
        }
        let mut r = Reader::new(body);
        let inr_hash = r.u64()?;
        let lambda = r.f64()?;
        let mean: Tensor = r.tensor()?;
        let std: Tensor = r.tensor()?;
        let analysis = ResidualMlp::read(&mut r)?;
        let synthesis = ResidualMlp::read(&mut r)?;
        let entropy = EntropyModel::read(&mut r)?;
        let n = r.u32()? as usize;
        let supports = (0..n).map(|_| Ok((r.i32()?, r.i32()?))).collect::<Result<Vec<_>>>()?;
        let c = Compressor {
            inr_hash,
            lambda,
            stats: LatentStats {
                mean: mean.into_data(),
                std: std.into_data(),
            },
            analysis,
            synthesis,
            entropy,
            supports,
        };
        let d = c.code_dim();
        let consistent = c.stats.mean.len() == c.latent_dim()
            && c.stats.std.len() == c.latent_dim()
            && c.synthesis.in_dim() == d
            && c.synthesis.out_dim() == c.latent_dim()
            && c.entropy.dims == d
            && (c.supports.is_empty() || c.supports.len() == d)
            && c.supports.iter().all(|(lo, hi)| lo <= hi);
        if !consistent {
            return Err(Error::format("quantizer components have inconsistent dimensions"));
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl Parameters<f64> for Compressor {
    /// Analysis, synthesis, then entropy model.
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.analysis.tensors();
        v.extend(self.synthesis.tensors());
        v.extend(self.entropy.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.analysis.tensors_mut();
        v.extend(self.synthesis.tensors_mut());
        v.extend(self.entropy.tensors_mut());
        v
    }
}

/// Loss terms for one latent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdTerms {
    pub rate_bits: f64,
    pub distortion: f64,
    pub loss: f64,
}

/// `rate + lambda * distortion` for one item with the uniform `noise`
/// added to its code; the distortion is measured on the item's data through
/// the frozen INR. Gradients follow [`Compressor`]'s parameter order.
pub fn rd_item_gradient(
    comp: &Compressor,
    model: &MetaModel,
    coords: &Tensor,
    features: &Tensor,
    phi: &Tensor,
    noise: &Tensor,
    lambda: f64,
) -> Result<(RdTerms, Vec<Tensor>)> {
    let tape = Tape::new();
    let (terms, loss, vars) = rd_on_tape(&tape, comp, model, coords, features, phi, noise, lambda)?;
    let grads = tape.gradients(loss, &vars)?;
    Ok((terms, grads))
}

/// Same as [`rd_item_gradient`] without the backward pass.
pub fn rd_item_loss(
    comp: &Compressor,
    model: &MetaModel,
    coords: &Tensor,
    features: &Tensor,
    phi: &Tensor,
    noise: &Tensor,
    lambda: f64,
) -> Result<RdTerms> {
    let tape = Tape::new();
    Ok(rd_on_tape(&tape, comp, model, coords, features, phi, noise, lambda)?.0)
}

#[allow(clippy::too_many_arguments)]
fn rd_on_tape<'t>(
    tape: &'t Tape,
    comp: &Compressor,
    model: &MetaModel,
    coords: &Tensor,
    features: &Tensor,
    phi: &Tensor,
    noise: &Tensor,
    lambda: f64,
) -> Result<(RdTerms, Var<'t>, Vec<Var<'t>>)> {
    let n = comp.latent_dim();
    let d = comp.code_dim();
    if phi.len() != n || noise.len() != d {
        return Err(Error::contract("latent or noise length does not match the compressor"));
    }
    let ga = comp.analysis.bind(tape, true);
    let gs = comp.synthesis.bind(tape, true);
    let psi = comp.entropy.bind(tape, true);
    let inr = model.inr.bind(tape, false);

    let phi_n = tape.constant(Tensor::new([1, n], normalize_phi(phi.data(), &comp.stats)));
    let z = ga.forward(phi_n);
    let z_noisy = z + tape.constant(noise.clone().reshaped([1, d]));
    let rate = psi.rate_bits(z_noisy);
    let phi_hat_n = gs.forward(z_noisy);
    let std = tape.constant(Tensor::new([1, n], comp.stats.std.clone()));
    let mean = tape.constant(Tensor::new([1, n], comp.stats.mean.clone()));
    let phi_hat = phi_hat_n * std + mean;
    let recon = inr.forward(tape.constant(coords.clone()), phi_hat).map_err(|e| e.at("rate-distortion loss"))?;
    let distortion = recon.mse(tape.constant(features.clone()));
    let loss = rate + distortion.scale(lambda);
    tape.check().map_err(|e| e.at("rate-distortion loss"))?;
    let terms = RdTerms {
        rate_bits: rate.item(),
        distortion: distortion.item(),
        loss: loss.item(),
    };
    let mut vars = ga.vars();
    vars.extend(gs.vars());
    vars.extend(psi.vars());
    Ok((terms, loss, vars))
}

/// Training-time stand-in for rounding: i.i.d. draws from `[-1/2, 1/2)`.
pub fn uniform_noise(d: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::new([d], (0..d).map(|_| rng.random::<f64>() - 0.5).collect())
}

pub struct CompressorOutput {
    pub compressor: Compressor,
    /// Mean batch terms per step.
    pub history: Vec<RdTerms>,
}

/// Trains analysis, synthesis and entropy model jointly on `latents`
/// (paired with `data.features` by index); the INR is never updated.
pub fn train_compressor(
    model: &MetaModel,
    data: &PatchSet,
    latents: &[Tensor],
    stats: &LatentStats,
    config: &RdConfig,
) -> Result<CompressorOutput> {
    config.validate()?;
    if latents.len() != data.len() || latents.is_empty() {
        return Err(Error::contract("need one latent per data item"));
    }
    let mut comp = Compressor::init(model.latent_dim(), stats.clone(), model.hash(), config)?;
    let history = train_compressor_from(&mut comp, model, data, latents, config)?;
    comp.fit_supports(latents);
    Ok(CompressorOutput { compressor: comp, history })
}

pub fn train_compressor_from(
    comp: &mut Compressor,
    model: &MetaModel,
    data: &PatchSet,
    latents: &[Tensor],
    config: &RdConfig,
) -> Result<Vec<RdTerms>> {
    let pool = Pool::new(config.threads);
    let mut opt = Adam::new(config.optimizer);
    let mut monitor = DivergenceMonitor::default();
    let mut rng = seeded_rng(config.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..latents.len()).collect();
    let mut cursor = order.len();
    let bs = config.batch_size.min(latents.len());
    let d = comp.code_dim();
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<usize> = order[cursor..cursor + bs].to_vec();
        cursor += bs;
        let noise: Vec<Tensor> = (0..bs).map(|_| uniform_noise(d, &mut rng)).collect();
        let slots: Vec<usize> = (0..bs).collect();
        let snapshot = &*comp;
        let results = pool.map(&slots, |s| {
            let i = batch[s];
            rd_item_gradient(snapshot, model, &data.coords, &data.features[i], &latents[i], &noise[s], config.lambda)
        });
        let mut sum = RdTerms {
            rate_bits: 0.0,
            distortion: 0.0,
            loss: 0.0,
        };
        let mut acc: Option<Vec<Tensor>> = None;
        for r in results {
            let (t, g) = r.map_err(|e| e.at(format!("compressor step {step}")))?;
            sum.rate_bits += t.rate_bits;
            sum.distortion += t.distortion;
            sum.loss += t.loss;
            acc = Some(match acc {
                None => g,
                Some(a) => a.iter().zip(&g).map(|(x, y)| x.zip_map(y, |p, q| p + q)).collect(),
            });
        }
        let inv = 1.0 / bs as f64;
        let grads: Vec<Tensor> = acc.expect("non-empty batch").into_iter().map(|g| g.map(|x| x * inv)).collect();
        opt.step(comp.tensors_mut(), &grads);
        let mean = RdTerms {
            rate_bits: sum.rate_bits * inv,
            distortion: sum.distortion * inv,
            loss: sum.loss * inv,
        };
        monitor.observe(step, mean.loss)?;
        if config.log_every > 0 && step % config.log_every == 0 {
            log::info!(
                "rd step {step}: loss {:.4} rate {:.2} bits distortion {:.3e}",
                mean.loss,
                mean.rate_bits,
                mean.distortion
            );
        }
        history.push(mean);
    }
    Ok(history)
}

/// Per-dimension uniform quantiser over the training range, the
/// fixed-length baseline learned transform coding is compared against.
#[derive(Clone, Debug, PartialEq)]
pub struct UniformQuantizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub bits: u32,
}

impl UniformQuantizer {
    pub fn fit(latents: &[Tensor], bits: u32) -> Self {
        assert!(!latents.is_empty(), "contract violation: no latents");
        assert!(bits <= 24, "contract violation: {bits} bits per dimension");
        let n = latents[0].len();
        let mut min = vec![f64::INFINITY; n];
        let mut max = vec![f64::NEG_INFINITY; n];
        for l in latents {
            for (k, &x) in l.data().iter().enumerate() {
                min[k] = min[k].min(x);
                max[k] = max[k].max(x);
            }
        }
        UniformQuantizer { min, max, bits }
    }

    /// Fixed code length of one latent.
    pub fn bits_per_latent(&self) -> u64 {
        self.bits as u64 * self.min.len() as u64
    }

    pub fn levels(&self) -> u64 {
        1 << self.bits
    }

    pub fn encode(&self, phi: &[f64]) -> Vec<u32> {
        let top = (self.levels() - 1) as f64;
        phi.iter()
            .enumerate()
            .map(|(k, &x)| {
                let span = self.max[k] - self.min[k];
                if top == 0.0 || span <= 0.0 {
                    0
                } else {
                    ((x - self.min[k]) / span * top).round().clamp(0.0, top) as u32
                }
            })
            .collect()
    }

    /// Zero bits reconstruct the midpoint of the range.
    pub fn decode(&self, q: &[u32]) -> Vec<f64> {
        let top = (self.levels() - 1) as f64;
        q.iter()
            .enumerate()
            .map(|(k, &v)| {
                if top == 0.0 {
                    0.5 * (self.min[k] + self.max[k])
                } else {
                    self.min[k] + (self.max[k] - self.min[k]) * v as f64 / top
                }
            })
            .collect()
    }

    pub fn round_trip(&self, phi: &[f64]) -> Vec<f64> {
        self.decode(&self.encode(phi))
    }
}
