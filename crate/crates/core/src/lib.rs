//! Compression of coordinate data through latent modulations of a shared,
//! soft-gated SIREN.
//!
//! The pipeline has two training stages. [`meta`] meta-learns the shared
//! network, a latent initialisation and per-dimension step sizes so that a
//! few gradient steps fit a latent vector to a new data item. [`compressor`]
//! then learns an analysis/synthesis transform pair and a factorised entropy
//! model over those latents, trading rate against distortion measured on the
//! data itself. [`coder`] turns quantised codes into bytes.

pub mod autodiff;
pub mod binio;
pub mod codec;
pub mod coder;
pub mod compressor;
pub mod data;
pub mod error;
pub mod inr;
pub mod meta;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod par;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
