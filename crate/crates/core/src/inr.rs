//! Shared SIREN specialised per data item by low-rank soft gating masks.
//!
//! A latent modulation `phi` is layer-normalised and passed through a
//! residual leaky-ReLU predictor whose output is reshaped into low-rank
//! factors `U, V` for every gated layer. Each gated layer then computes
//! `sin(omega0 * ((sigmoid(U Vᵀ) ⊙ W) c + b))`. The final layer is affine.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::binio::{content_hash, Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::{seeded_rng, BoundLinear, Linear, Parameters};
use crate::tensor::{Real, Tensor};

const MODEL_MAGIC: &[u8; 4] = b"VCIM";
const MODEL_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InrConfig {
    pub coord_dim: usize,
    pub feature_dim: usize,
    /// Number of weight layers, output layer included.
    pub depth: usize,
    pub width: usize,
    pub omega0: f64,
    pub gate_rank: usize,
    pub gate_first_layer: bool,
    pub gate_output_layer: bool,
    pub latent_dim: usize,
    pub predictor_width: usize,
    pub predictor_blocks: usize,
    pub layer_norm: bool,
}

impl Default for InrConfig {
    fn default() -> Self {
        InrConfig {
            coord_dim: 2,
            feature_dim: 3,
            depth: 15,
            width: 512,
            omega0: 30.0,
            gate_rank: 1,
            gate_first_layer: false,
            gate_output_layer: false,
            latent_dim: 2048,
            predictor_width: 6144,
            predictor_blocks: 2,
            layer_norm: true,
        }
    }
}

impl InrConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth < 2 {
            return fail(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.gate_rank < 1 || self.gate_rank > self.width / 4 {
            return fail(format!(
                "gate_rank must lie in [1, width/4 = {}], got {}",
                self.width / 4,
                self.gate_rank
            ));
        }
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return fail(format!("omega0 must be positive, got {}", self.omega0));
        }
        for (name, v) in [
            ("coord_dim", self.coord_dim),
            ("feature_dim", self.feature_dim),
            ("width", self.width),
            ("latent_dim", self.latent_dim),
            ("predictor_width", self.predictor_width),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of weight layer `l`.
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        let fan_in = if l == 0 { self.coord_dim } else { self.width };
        let fan_out = if l + 1 == self.depth { self.feature_dim } else { self.width };
        (fan_in, fan_out)
    }

    pub fn is_gated(&self, l: usize) -> bool {
        if l == 0 {
            self.gate_first_layer
        } else if l + 1 == self.depth {
            self.gate_output_layer
        } else {
            true
        }
    }

    pub fn gated_layers(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.depth).filter(|&l| self.is_gated(l))
    }

    /// Length of the predictor output: `(fan_out + fan_in) * rank` per gated layer.
    pub fn gate_vector_len(&self) -> usize {
        self.gated_layers()
            .map(|l| {
                let (i, o) = self.layer_dims(l);
                (i + o) * self.gate_rank
            })
            .sum()
    }
}

/// Shared parameters: SIREN layers and the latent-to-gates predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct InrParams<T: Real = f64> {
    pub config: InrConfig,
    pub layers: Vec<Linear<T>>,
    pub predictor_in: Linear<T>,
    pub predictor_blocks: Vec<[Linear<T>; 2]>,
    pub predictor_out: Linear<T>,
}

impl<T: Real> Parameters<T> for InrParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        let linears = self
            .layers
            .iter()
            .chain(std::iter::once(&self.predictor_in))
            .chain(self.predictor_blocks.iter().flatten())
            .chain(std::iter::once(&self.predictor_out));
        for l in linears {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        let linears = self
            .layers
            .iter_mut()
            .chain(std::iter::once(&mut self.predictor_in))
            .chain(self.predictor_blocks.iter_mut().flatten())
            .chain(std::iter::once(&mut self.predictor_out));
        for l in linears {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }
}

impl<T: Real> InrParams<T> {
    /// SIREN initialisation: first layer weights uniform in `[-1/n, 1/n]`,
    /// deeper layers in `[-sqrt(6/n)/omega0, sqrt(6/n)/omega0]` with `n` the
    /// fan-in. The output bias starts at zero.
    pub fn init(config: &InrConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let layers = (0..config.depth)
            .map(|l| {
                let (fan_in, fan_out) = config.layer_dims(l);
                let n = fan_in as f64;
                let w_bound = if l == 0 {
                    1.0 / n
                } else {
                    (6.0 / n).sqrt() / config.omega0
                };
                let b_bound = if l + 1 == config.depth { 0.0 } else { 1.0 / n.sqrt() };
                Linear::uniform(fan_out, fan_in, w_bound, b_bound, &mut rng)
            })
            .collect();
        let pw = config.predictor_width;
        let predictor_in = Linear::fan_in(pw, config.latent_dim, &mut rng);
        let predictor_blocks = (0..config.predictor_blocks)
            .map(|_| [Linear::fan_in(pw, pw, &mut rng), Linear::fan_in(pw, pw, &mut rng)])
            .collect();
        let mut predictor_out = Linear::fan_in(config.gate_vector_len(), pw, &mut rng);
        predictor_out.bias = Tensor::zeros([config.gate_vector_len()]);
        Ok(InrParams {
            config: config.clone(),
            layers,
            predictor_in,
            predictor_blocks,
            predictor_out,
        })
    }

    /// Registers every tensor on `tape`, as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> BoundInr<'t, T> {
        BoundInr {
            config: self.config.clone(),
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
            predictor_in: self.predictor_in.bind(tape, trainable),
            predictor_blocks: self
                .predictor_blocks
                .iter()
                .map(|[a, b]| [a.bind(tape, trainable), b.bind(tape, trainable)])
                .collect(),
            predictor_out: self.predictor_out.bind(tape, trainable),
        }
    }

    /// Gates for one latent vector of shape `[1, latent_dim]` or `[latent_dim]`.
    pub fn gates(&self, phi: &Tensor<T>) -> Result<GateSet<T>> {
        let tape = Tape::new();
        let net = self.bind(&tape, false);
        let phi = tape.constant(as_row(phi));
        let gates = net.predict_gates(phi);
        tape.check()?;
        Ok(GateSet {
            layers: gates
                .layers
                .iter()
                .map(|g| {
                    g.map(|g| LayerGate {
                        u: (*g.u.value()).clone(),
                        v: (*g.v.value()).clone(),
                        mask: (*g.mask.value()).clone(),
                    })
                })
                .collect(),
        })
    }

    /// Features at `coords` for latent `phi`.
    pub fn render(&self, coords: &Tensor<T>, phi: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let net = self.bind(&tape, false);
        let out = net.forward(tape.constant(coords.clone()), tape.constant(as_row(phi)))?;
        Ok((*out.value()).clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let body = self.body_bytes();
        let mut w = Writer::new();
        w.bytes(MODEL_MAGIC)
            .u8(MODEL_VERSION)
            .u64(content_hash(&body))
            .u64(body.len() as u64)
            .bytes(&body);
        w.finish()
    }

    /// Content hash identifying this model inside bitstreams and quantizer
    /// checkpoints.
    pub fn hash(&self) -> u64 {
        content_hash(&self.body_bytes())
    }

    fn body_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::new();
        w.usize32(c.coord_dim)
            .usize32(c.feature_dim)
            .usize32(c.depth)
            .usize32(c.width)
            .f64(c.omega0)
            .usize32(c.gate_rank)
            .u8(c.gate_first_layer as u8)
            .u8(c.gate_output_layer as u8)
            .usize32(c.latent_dim)
            .usize32(c.predictor_width)
            .usize32(c.predictor_blocks)
            .u8(c.layer_norm as u8);
        for l in &self.layers {
            l.write(&mut w);
        }
        self.predictor_in.write(&mut w);
        for [a, b] in &self.predictor_blocks {
            a.write(&mut w);
            b.write(&mut w);
        }
        self.predictor_out.write(&mut w);
        w.finish()
    }

    /// Parses a model record; returns the model and the number of bytes used.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MODEL_MAGIC)?;
        let version = r.u8()?;
        if version != MODEL_VERSION {
            return Err(Error::format(format!("unsupported model version {version}")));
        }
        let hash = r.u64()?;
        let len = r.u64()? as usize;
        let body = r.take(len)?;
        let found = content_hash(body);
        if found != hash {
            return Err(Error::HashMismatch {
                what: "model content",
                expected: hash,
                found,
            });
        }
        let used = r.position();
        let mut r = Reader::new(body);
        let flag = |v: u8| v != 0;
        let config = InrConfig {
            coord_dim: r.u32()? as usize,
            feature_dim: r.u32()? as usize,
            depth: r.u32()? as usize,
            width: r.u32()? as usize,
            omega0: r.f64()?,
            gate_rank: r.u32()? as usize,
            gate_first_layer: flag(r.u8()?),
            gate_output_layer: flag(r.u8()?),
            latent_dim: r.u32()? as usize,
            predictor_width: r.u32()? as usize,
            predictor_blocks: r.u32()? as usize,
            layer_norm: flag(r.u8()?),
        };
        config.validate()?;
        let layers = (0..config.depth).map(|_| Linear::read(&mut r)).collect::<Result<Vec<_>>>()?;
        let predictor_in = Linear::read(&mut r)?;
        let predictor_blocks = (0..config.predictor_blocks)
            .map(|_| Ok([Linear::read(&mut r)?, Linear::read(&mut r)?]))
            .collect::<Result<Vec<_>>>()?;
        let predictor_out = Linear::read(&mut r)?;
        let params = InrParams {
            config,
            layers,
            predictor_in,
            predictor_blocks,
            predictor_out,
        };
        params.check_shapes()?;
        Ok((params, used))
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        for (l, lin) in self.layers.iter().enumerate() {
            let (i, o) = c.layer_dims(l);
            if lin.weight.shape() != [o, i] || lin.bias.shape() != [o] {
                return Err(Error::format(format!("layer {l} has shape {:?}", lin.weight.shape())));
            }
        }
        if self.predictor_in.weight.shape() != [c.predictor_width, c.latent_dim]
            || self.predictor_out.weight.shape() != [c.gate_vector_len(), c.predictor_width]
        {
            return Err(Error::format("predictor shapes do not match the config"));
        }
        Ok(())
    }
}

pub(crate) fn as_row<T: Real>(phi: &Tensor<T>) -> Tensor<T> {
    let n = phi.len();
    phi.clone().reshaped([1, n])
}

/// Low-rank factors and soft mask of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGate<T: Real = f64> {
    pub u: Tensor<T>,
    pub v: Tensor<T>,
    pub mask: Tensor<T>,
}

/// Gates for every layer; `None` for layers without gating.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSet<T: Real = f64> {
    pub layers: Vec<Option<LayerGate<T>>>,
}

impl<T: Real> GateSet<T> {
    pub fn masks(&self) -> Vec<Option<&Tensor<T>>> {
        self.layers.iter().map(|g| g.as_ref().map(|g| &g.mask)).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGate<'t, T: Real> {
    pub u: Var<'t, T>,
    pub v: Var<'t, T>,
    pub mask: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct BoundGates<'t, T: Real> {
    pub layers: Vec<Option<BoundGate<'t, T>>>,
}

impl<'t, T: Real> BoundGates<'t, T> {
    pub fn masks(&self) -> Vec<Option<Var<'t, T>>> {
        self.layers.iter().map(|g| g.map(|g| g.mask)).collect()
    }
}

/// [`InrParams`] registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundInr<'t, T: Real> {
    pub config: InrConfig,
    pub layers: Vec<BoundLinear<'t, T>>,
    pub predictor_in: BoundLinear<'t, T>,
    pub predictor_blocks: Vec<[BoundLinear<'t, T>; 2]>,
    pub predictor_out: BoundLinear<'t, T>,
}

impl<'t, T: Real> BoundInr<'t, T> {
    /// All leaves in the order of [`Parameters::tensors`].
    pub fn vars(&self) -> Vec<Var<'t, T>> {
        self.layers
            .iter()
            .chain(std::iter::once(&self.predictor_in))
            .chain(self.predictor_blocks.iter().flatten())
            .chain(std::iter::once(&self.predictor_out))
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    /// `phi: [1, latent_dim]` → per-layer `sigmoid(U Vᵀ)`.
    pub fn predict_gates(&self, phi: Var<'t, T>) -> BoundGates<'t, T> {
        let c = &self.config;
        assert_eq!(
            phi.shape(),
            [1, c.latent_dim],
            "contract violation: latent shape does not match the model"
        );
        let mut h = if c.layer_norm { phi.layer_norm() } else { phi };
        h = self.predictor_in.forward(h).leaky_relu();
        for [a, b] in &self.predictor_blocks {
            let r = b.forward(a.forward(h).leaky_relu()).leaky_relu();
            h = h + r;
        }
        let packed = self.predictor_out.forward(h);

        let d = c.gate_rank;
        let mut offset = 0;
        let layers = (0..c.depth)
            .map(|l| {
                if !c.is_gated(l) {
                    return None;
                }
                let (fan_in, fan_out) = c.layer_dims(l);
                let u = packed.slice(offset, &[fan_out, d]);
                offset += fan_out * d;
                let v = packed.slice(offset, &[fan_in, d]);
                offset += fan_in * d;
                let mask = u.matmul_t(v, false, true).sigmoid();
                Some(BoundGate { u, v, mask })
            })
            .collect();
        BoundGates { layers }
    }

    /// Evaluates the network at `coords: [M, coord_dim]`. `masks[l]` gates
    /// layer `l` when present.
    pub fn siren_forward(&self, coords: Var<'t, T>, masks: &[Option<Var<'t, T>>]) -> Result<Var<'t, T>> {
        let c = &self.config;
        assert_eq!(masks.len(), c.depth, "contract violation: one mask slot per layer");
        let tape = coords.tape();
        let omega = T::of(c.omega0);
        let mut h = coords;
        for (l, (layer, mask)) in self.layers.iter().zip(masks).enumerate() {
            let w = match mask {
                Some(g) => *g * layer.weight,
                None => layer.weight,
            };
            let pre = h.matmul_t(w, false, true).add_bias(layer.bias);
            h = if l + 1 < c.depth { pre.scale(omega).sin() } else { pre };
            tape.check().map_err(|e| e.at(format!("siren layer {l}")))?;
        }
        Ok(h)
    }

    pub fn forward(&self, coords: Var<'t, T>, phi: Var<'t, T>) -> Result<Var<'t, T>> {
        let gates = self.predict_gates(phi);
        self.siren_forward(coords, &gates.masks())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSparsity {
    pub layer: usize,
    pub gated: bool,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityReport {
    pub layers: Vec<LayerSparsity>,
    /// Pooled fraction over gated layers, or over all layers when none are gated.
    pub overall: f64,
}

impl SparsityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,gated,fraction\n");
        for l in &self.layers {
            s.push_str(&format!("{},{},{}\n", l.layer, l.gated, l.fraction));
        }
        s.push_str(&format!("overall,,{}\n", self.overall));
        s
    }
}

/// Fraction of entries of `G ⊙ W` with magnitude below `threshold`, per layer.
/// Ungated layers are measured on `W` alone.
pub fn gating_sparsity<T: Real>(params: &InrParams<T>, gates: &GateSet<T>, threshold: f64) -> Result<SparsityReport> {
    if !(threshold > 0.0) {
        return Err(Error::contract("sparsity threshold must be positive"));
    }
    let mut layers = Vec::new();
    let (mut below_g, mut total_g, mut below_all, mut total_all) = (0usize, 0usize, 0usize, 0usize);
    for (l, lin) in params.layers.iter().enumerate() {
        let mask = gates.layers.get(l).and_then(|g| g.as_ref()).map(|g| &g.mask);
        let below = match mask {
            Some(m) => lin
                .weight
                .data()
                .iter()
                .zip(m.data())
                .filter(|(&w, &g)| (g * w).as_f64().abs() < threshold)
                .count(),
            None => lin.weight.data().iter().filter(|w| w.as_f64().abs() < threshold).count(),
        };
        let n = lin.weight.len();
        if mask.is_some() {
            below_g += below;
            total_g += n;
        }
        below_all += below;
        total_all += n;
        layers.push(LayerSparsity {
            layer: l,
            gated: mask.is_some(),
            fraction: below as f64 / n as f64,
        });
    }
    let overall = if total_g > 0 {
        below_g as f64 / total_g as f64
    } else {
        below_all as f64 / total_all as f64
    };
    Ok(SparsityReport { layers, overall })
}
