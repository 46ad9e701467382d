//! End-to-end inference path: item → patches → latents → codes → bytes,
//! and back.

use crate::coder::{rc_decode, rc_encode, Bitstream, BitstreamHeader, ItemRecord, PmfTable};
use crate::compressor::Compressor;
use crate::data::{depatchify, prepare, FeatureNorm, ModalitySpec, Patches};
use crate::error::{Error, Result};
use crate::meta::{encode_latent, MetaModel};
use crate::par::Pool;
use crate::tensor::Tensor;

pub struct Codec<'a> {
    pub model: &'a MetaModel,
    pub compressor: &'a Compressor,
    pub spec: ModalitySpec,
    pub norm: FeatureNorm,
    /// Inner adaptation steps used to fit each latent.
    pub steps: usize,
    tables: Vec<PmfTable>,
}

/// Codes of one item, patch by patch.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedItem {
    pub record: ItemRecord,
    pub codes: Vec<Vec<i32>>,
}

impl<'a> Codec<'a> {
    pub fn new(
        model: &'a MetaModel,
        compressor: &'a Compressor,
        spec: ModalitySpec,
        norm: FeatureNorm,
        steps: usize,
    ) -> Result<Self> {
        if compressor.inr_hash != model.hash() {
            return Err(Error::HashMismatch {
                what: "INR",
                expected: model.hash(),
                found: compressor.inr_hash,
            });
        }
        if compressor.latent_dim() != model.latent_dim() {
            return Err(Error::Config("quantizer latent size differs from the model".into()));
        }
        let tables = compressor.tables()?;
        Ok(Codec {
            model,
            compressor,
            spec,
            norm,
            steps,
            tables,
        })
    }

    pub fn tables(&self) -> &[PmfTable] {
        &self.tables
    }

    pub fn header(&self) -> BitstreamHeader {
        BitstreamHeader {
            inr_hash: self.model.hash(),
            quantizer_hash: self.compressor.hash(),
            lambda_tag: BitstreamHeader::lambda_tag_for(self.compressor.lambda),
        }
    }

    /// `item` has spatial axes followed by one channel axis.
    pub fn encode_item(&self, item: &Tensor) -> Result<EncodedItem> {
        let channels = *item.shape().last().ok_or_else(|| Error::contract("scalar item"))?;
        if channels != self.model.inr.config.feature_dim {
            return Err(Error::Config(format!(
                "item has {channels} channels, the model expects {}",
                self.model.inr.config.feature_dim
            )));
        }
        let (set, _) = prepare(std::slice::from_ref(item), &self.spec, &self.norm)?;
        let mut codes = Vec::with_capacity(set.len());
        for f in &set.features {
            let phi = encode_latent(self.model, &set.coords, f, self.steps)?;
            codes.push(self.compressor.encode_code(phi.data()));
        }
        let flat: Vec<i32> = codes.iter().flatten().copied().collect();
        let payload = rc_encode(&flat, &self.tables)?;
        let dims = item.shape()[..item.rank() - 1]
            .iter()
            .map(|&d| u32::try_from(d).map_err(|_| Error::contract("axis longer than u32")))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedItem {
            record: ItemRecord { dims, payload },
            codes,
        })
    }

    pub fn compress(&self, items: &[Tensor], threads: usize) -> Result<Bitstream> {
        let idx: Vec<usize> = (0..items.len()).collect();
        let records = Pool::new(threads)
            .map(&idx, |i| self.encode_item(&items[i]).map(|e| e.record))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Bitstream {
            header: self.header(),
            items: records,
        })
    }

    /// Codes of every patch of a record, patch-major.
    pub fn decode_codes(&self, record: &ItemRecord) -> Result<Vec<Vec<i32>>> {
        let (_, _, grid) = self.layout(record)?;
        let d = self.compressor.code_dim();
        let n_patches: usize = grid.iter().product();
        let flat = rc_decode(&record.payload, &self.tables, n_patches * d)?;
        Ok(flat.chunks(d).map(|c| c.to_vec()).collect())
    }

    fn layout(&self, record: &ItemRecord) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        let full: Vec<usize> = record.dims.iter().map(|&d| d as usize).collect();
        if full.is_empty() || full.contains(&0) {
            return Err(Error::format(format!("invalid item extent {full:?}")));
        }
        let patch_shape = self.spec.patch_shape_for(&full);
        if patch_shape.len() != full.len() {
            return Err(Error::format(format!(
                "item extent {full:?} does not match patch shape {patch_shape:?}"
            )));
        }
        let grid = full.iter().zip(&patch_shape).map(|(&n, &p)| n.div_ceil(p)).collect();
        Ok((full, patch_shape, grid))
    }

    pub fn decode_item(&self, record: &ItemRecord) -> Result<Tensor> {
        let (full, patch_shape, grid) = self.layout(record)?;
        let coords = self.spec.coords_for(&patch_shape)?;
        let c = self.model.inr.config.feature_dim;
        let mut shape = patch_shape.clone();
        shape.push(c);
        let codes = self.decode_codes(record)?;
        let patches = codes
            .iter()
            .map(|code| {
                let phi = self.compressor.decode_code(code);
                let n = phi.len();
                let out = self.model.inr.render(&coords, &Tensor::new([1, n], phi))?;
                Ok(out.reshaped(shape.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let tiled = Patches {
            grid,
            full_shape: full,
            patch_shape,
            channels: c,
            patches,
        };
        Ok(self.norm.invert(&depatchify(&tiled)))
    }

    /// Validates both hashes before decoding any payload.
    pub fn decompress(&self, bytes: &[u8], threads: usize) -> Result<Vec<Tensor>> {
        let stream = Bitstream::unpack_checked(bytes, self.model.hash(), self.compressor.hash())?;
        let idx: Vec<usize> = (0..stream.items.len()).collect();
        Pool::new(threads)
            .map(&idx, |i| self.decode_item(&stream.items[i]))
            .into_iter()
            .collect()
    }
}
