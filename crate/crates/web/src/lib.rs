//! WebAssembly bindings for the static demo page in `www/`.
//!
//! A randomly initialised gated SIREN is rendered for a random latent, its
//! soft gates can be inspected layer by layer, and a list of integers can be
//! range coded under a discretised logistic table.

use inrcodec::coder::{estimated_bits, rc_decode, rc_encode, PmfTable};
use inrcodec::data::grid_coords;
use inrcodec::inr::{gating_sparsity, GateSet, InrConfig, InrParams};
use inrcodec::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

const LATENT_DIM: usize = 16;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    params: InrParams,
    phi: Tensor,
    gates: GateSet,
}

#[wasm_bindgen]
impl Demo {
    /// Network weights come from `seed`; `omega0` scales every sine argument.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, omega0: f64, gate_rank: usize) -> Result<Demo, JsError> {
        let config = InrConfig {
            depth: 4,
            width: 32,
            omega0,
            gate_rank,
            latent_dim: LATENT_DIM,
            predictor_width: 32,
            predictor_blocks: 1,
            ..InrConfig::default()
        };
        let params = InrParams::init(&config, seed as u64).map_err(js)?;
        let phi = Tensor::zeros([LATENT_DIM]);
        let gates = params.gates(&phi).map_err(js)?;
        Ok(Demo { params, phi, gates })
    }

    /// Draws `phi ~ scale * N(0, I)` from `seed` and recomputes the gates.
    pub fn set_latent(&mut self, seed: u32, scale: f64) -> Result<(), JsError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let data = (0..LATENT_DIM)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        self.phi = Tensor::new([LATENT_DIM], data);
        self.gates = self.params.gates(&self.phi).map_err(js)?;
        Ok(())
    }

    /// RGBA pixels of a `size` x `size` render over `[-1, 1]^2`, stretched
    /// to the full intensity range since an untrained network has no scale.
    pub fn render(&self, size: usize) -> Result<Vec<u8>, JsError> {
        let coords = grid_coords(&[size, size], (-1.0, 1.0));
        let out = self.params.render(&coords, &self.phi).map_err(js)?;
        let (lo, hi) = out
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut rgba = Vec::with_capacity(size * size * 4);
        for px in out.data().chunks(3) {
            for &c in px {
                rgba.push(((c - lo) / span * 255.0).round() as u8);
            }
            rgba.push(255);
        }
        Ok(rgba)
    }

    /// Layers that carry a gate.
    pub fn gated_layers(&self) -> Vec<usize> {
        self.params.config.gated_layers().collect()
    }

    /// `[rows, cols, g_00, g_01, ...]` for the gate of `layer`.
    pub fn gate_mask(&self, layer: usize) -> Result<Vec<f64>, JsError> {
        let gate = self
            .gates
            .layers
            .get(layer)
            .and_then(|g| g.as_ref())
            .ok_or_else(|| JsError::new(&format!("layer {layer} is not gated")))?;
        let shape = gate.mask.shape();
        let mut out = vec![shape[0] as f64, shape[1] as f64];
        out.extend_from_slice(gate.mask.data());
        Ok(out)
    }

    /// Fraction of gated weights below `threshold` in magnitude.
    pub fn sparsity(&self, threshold: f64) -> Result<f64, JsError> {
        Ok(gating_sparsity(&self.params, &self.gates, threshold).map_err(js)?.overall)
    }
}

/// Range codes whitespace- or comma-separated integers under a logistic
/// table of `scale` over `[-support, support]` with an escape slot.
/// Returns a JSON summary.
#[wasm_bindgen]
pub fn code_integers(text: &str, scale: f64, support: i32) -> Result<String, JsError> {
    let symbols = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<i32>().map_err(|e| JsError::new(&format!("{s:?}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if !(scale > 0.0) || support < 0 {
        return Err(JsError::new("scale must be positive and support non-negative"));
    }
    let cdf = |x: f64| 1.0 / (1.0 + (-x / scale).exp());
    let table = PmfTable::from_pmf(-support, support, |v| cdf(v as f64 + 0.5) - cdf(v as f64 - 0.5)).map_err(js)?;
    let tables = std::slice::from_ref(&table);
    let bytes = rc_encode(&symbols, tables).map_err(js)?;
    let decoded = rc_decode(&bytes, tables, symbols.len()).map_err(js)?;
    let escapes = symbols.iter().filter(|s| s.abs() > support).count();
    Ok(serde_json::json!({
        "symbols": symbols.len(),
        "escapes": escapes,
        "bytes": bytes.len(),
        "estimated_bits": estimated_bits(&symbols, tables),
        "lossless": decoded == symbols,
        "hex": bytes.iter().map(|b| format!("{b:02x}")).collect::<String>(),
    })
    .to_string())
}
