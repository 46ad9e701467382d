//! Coordinate grids, patching and the NTF tensor file format.
//!
//! Data items are stored channel-last: an RGB image is `[H, W, 3]`, a mono
//! audio clip `[T, 1]`. Every patch of a dataset shares one coordinate grid,
//! so a [`PatchSet`] keeps a single coordinate tensor next to the per-patch
//! features.

use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::seeded_rng;
use crate::tensor::{Real, Tensor};

/// Evenly spaced, endpoint-inclusive grid over `range` on every axis,
/// flattened row-major into `[prod(shape), shape.len()]`.
pub fn grid_coords(shape: &[usize], range: (f64, f64)) -> Tensor {
    assert!(!shape.is_empty() && shape.iter().all(|&n| n > 0), "contract violation: empty grid shape");
    let axes: Vec<Vec<f64>> = shape
        .iter()
        .map(|&n| {
            (0..n)
                .map(|i| {
                    if n == 1 {
                        range.0
                    } else {
                        range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64
                    }
                })
                .collect()
        })
        .collect();
    let total: usize = shape.iter().product();
    let rank = shape.len();
    let mut data = Vec::with_capacity(total * rank);
    for flat in 0..total {
        let mut rem = flat;
        let mut idx = vec![0; rank];
        for a in (0..rank).rev() {
            idx[a] = rem % shape[a];
            rem /= shape[a];
        }
        for a in 0..rank {
            data.push(axes[a][idx[a]]);
        }
    }
    Tensor::new([total, rank], data)
}

/// Latitudes equally spaced in `[-π/2, π/2]`, longitudes `2πj/n` for
/// `j < n`, mapped to unit-sphere points, latitude-major.
pub fn era5_coords(n_lat: usize, n_lon: usize) -> Tensor {
    assert!(n_lat > 0 && n_lon > 0, "contract violation: empty latitude/longitude grid");
    let mut data = Vec::with_capacity(n_lat * n_lon * 3);
    for i in 0..n_lat {
        let lat = if n_lat == 1 {
            0.0
        } else {
            -PI / 2.0 + PI * i as f64 / (n_lat - 1) as f64
        };
        for j in 0..n_lon {
            let lon = 2.0 * PI * j as f64 / n_lon as f64;
            data.extend_from_slice(&sphere_point(lat, lon));
        }
    }
    Tensor::new([n_lat * n_lon, 3], data)
}

pub fn sphere_point(lat: f64, lon: f64) -> [f64; 3] {
    [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
}

/// Non-overlapping tiling of one data item.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches<T: Real = f64> {
    /// Number of patches along each spatial axis.
    pub grid: Vec<usize>,
    /// Unpadded spatial extent.
    pub full_shape: Vec<usize>,
    pub patch_shape: Vec<usize>,
    pub channels: usize,
    /// Row-major patch order, each `patch_shape ++ [channels]`.
    pub patches: Vec<Tensor<T>>,
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

fn unravel(mut flat: usize, shape: &[usize], out: &mut [usize]) {
    for a in (0..shape.len()).rev() {
        out[a] = flat % shape[a];
        flat /= shape[a];
    }
}

fn ravel(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (&i, &n)| acc * n + i)
}

/// Splits `data` (spatial axes followed by one channel axis) into patches.
/// Axes that are not multiples of the patch size are reflection-padded at
/// the far end.
pub fn patchify<T: Real>(data: &Tensor<T>, patch_shape: &[usize]) -> Patches<T> {
    let shape = data.shape();
    assert_eq!(
        shape.len(),
        patch_shape.len() + 1,
        "contract violation: data {shape:?} needs spatial axes matching patch {patch_shape:?} plus a channel axis"
    );
    assert!(patch_shape.iter().all(|&p| p > 0), "contract violation: zero patch size");
    let rank = patch_shape.len();
    let full_shape = shape[..rank].to_vec();
    let channels = shape[rank];
    let grid: Vec<usize> = full_shape.iter().zip(patch_shape).map(|(&n, &p)| n.div_ceil(p)).collect();
    let n_patches: usize = grid.iter().product();
    let patch_len: usize = patch_shape.iter().product();

    let mut gidx = vec![0; rank];
    let mut pidx = vec![0; rank];
    let mut src = vec![0; rank];
    let patches = (0..n_patches)
        .map(|p| {
            unravel(p, &grid, &mut gidx);
            let mut out = Vec::with_capacity(patch_len * channels);
            for q in 0..patch_len {
                unravel(q, patch_shape, &mut pidx);
                for a in 0..rank {
                    src[a] = reflect(gidx[a] * patch_shape[a] + pidx[a], full_shape[a]);
                }
                let base = ravel(&src, &full_shape) * channels;
                out.extend_from_slice(&data.data()[base..base + channels]);
            }
            let mut s = patch_shape.to_vec();
            s.push(channels);
            Tensor::new(s, out)
        })
        .collect();
    Patches {
        grid,
        full_shape,
        patch_shape: patch_shape.to_vec(),
        channels,
        patches,
    }
}

/// Inverse of [`patchify`], cropping any padding.
pub fn depatchify<T: Real>(patches: &Patches<T>) -> Tensor<T> {
    let rank = patches.patch_shape.len();
    let c = patches.channels;
    let total: usize = patches.full_shape.iter().product();
    let mut out = vec![T::zero(); total * c];
    let mut idx = vec![0; rank];
    let mut gidx = vec![0; rank];
    let mut pidx = vec![0; rank];
    for flat in 0..total {
        unravel(flat, &patches.full_shape, &mut idx);
        for a in 0..rank {
            gidx[a] = idx[a] / patches.patch_shape[a];
            pidx[a] = idx[a] % patches.patch_shape[a];
        }
        let p = ravel(&gidx, &patches.grid);
        let q = ravel(&pidx, &patches.patch_shape);
        out[flat * c..(flat + 1) * c].copy_from_slice(&patches.patches[p].data()[q * c..(q + 1) * c]);
    }
    let mut shape = patches.full_shape.clone();
    shape.push(c);
    Tensor::new(shape, out)
}

/// Coordinates shared by every patch plus per-patch features `[M, C]`.
#[derive(Clone, Debug)]
pub struct PatchSet<T: Real = f64> {
    pub coords: Tensor<T>,
    pub features: Vec<Tensor<T>>,
}

impl<T: Real> PatchSet<T> {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn points(&self) -> usize {
        self.coords.rows()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        PatchSet {
            coords: self.coords.clone(),
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CoordinateKind {
    /// Endpoint-inclusive grid over `[lo, hi]` on each spatial axis.
    Grid { lo: f64, hi: f64 },
    /// Two spatial axes read as (latitude, longitude) on the unit sphere.
    Sphere,
}

/// How raw items become coordinate/feature patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub coordinates: CoordinateKind,
    /// Spatial patch extent; `None` fits whole items.
    #[serde(default)]
    pub patch_shape: Option<Vec<usize>>,
    /// Divide u8 payloads by 255.
    #[serde(default = "default_true")]
    pub rescale_u8: bool,
    /// Standardise each feature channel with training-set statistics.
    #[serde(default)]
    pub standardize: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModalitySpec {
    fn default() -> Self {
        ModalitySpec {
            coordinates: CoordinateKind::Grid { lo: 0.0, hi: 1.0 },
            patch_shape: None,
            rescale_u8: true,
            standardize: false,
        }
    }
}

impl ModalitySpec {
    pub fn coord_dim(&self, spatial_rank: usize) -> usize {
        match self.coordinates {
            CoordinateKind::Grid { .. } => spatial_rank,
            CoordinateKind::Sphere => 3,
        }
    }

    pub fn patch_shape_for(&self, spatial: &[usize]) -> Vec<usize> {
        self.patch_shape.clone().unwrap_or_else(|| spatial.to_vec())
    }

    pub fn coords_for(&self, patch_shape: &[usize]) -> Result<Tensor> {
        match self.coordinates {
            CoordinateKind::Grid { lo, hi } => Ok(grid_coords(patch_shape, (lo, hi))),
            CoordinateKind::Sphere => {
                if patch_shape.len() != 2 {
                    return Err(Error::Config("sphere coordinates need (lat, lon) items".into()));
                }
                if self.patch_shape.is_some() {
                    return Err(Error::Config("sphere coordinates do not support patching".into()));
                }
                Ok(era5_coords(patch_shape[0], patch_shape[1]))
            }
        }
    }
}

/// Per-channel feature standardisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(channels: usize) -> Self {
        FeatureNorm {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn fit(items: &[Tensor]) -> Self {
        let c = *items[0].shape().last().expect("channel axis");
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0usize;
        for it in items {
            for px in it.data().chunks(c) {
                for k in 0..c {
                    sum[k] += px[k];
                    sq[k] += px[k] * px[k];
                }
                n += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-12))
            .collect();
        FeatureNorm { mean, std }
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        self.map(t, |x, m, s| (x - m) / s)
    }

    pub fn invert(&self, t: &Tensor) -> Tensor {
        self.map(t, |x, m, s| x * s + m)
    }

    fn map(&self, t: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let c = self.mean.len();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, self.mean[i % c], self.std[i % c]))
            .collect();
        Tensor::new(t.shape().to_vec(), data)
    }
}

/// A data item cut into patches together with the layout needed to put it
/// back together.
#[derive(Clone, Debug)]
pub struct PreparedItem {
    pub patches: Patches<f64>,
}

/// Turns raw items (all of one spatial shape) into a shared-coordinate patch
/// set. Features of every patch are flattened to `[M, C]`.
pub fn prepare(items: &[Tensor], spec: &ModalitySpec, norm: &FeatureNorm) -> Result<(PatchSet, Vec<PreparedItem>)> {
    let first = items.first().ok_or_else(|| Error::contract("no data items"))?;
    let spatial = &first.shape()[..first.rank() - 1];
    let patch_shape = spec.patch_shape_for(spatial);
    if patch_shape.len() != spatial.len() {
        return Err(Error::Config(format!(
            "patch shape {patch_shape:?} does not match item spatial shape {spatial:?}"
        )));
    }
    let coords = spec.coords_for(&patch_shape)?;
    let mut features = Vec::new();
    let mut prepared = Vec::with_capacity(items.len());
    for it in items {
        if it.shape() != first.shape() {
            return Err(Error::contract(format!(
                "items must share one shape: {:?} vs {:?}",
                it.shape(),
                first.shape()
            )));
        }
        let patches = patchify(&norm.apply(it), &patch_shape);
        for p in &patches.patches {
            let m = p.len() / patches.channels;
            features.push(p.clone().reshaped([m, patches.channels]));
        }
        prepared.push(PreparedItem { patches });
    }
    Ok((PatchSet { coords, features }, prepared))
}

/// Element type of an NTF payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

impl DType {
    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U8),
            _ => Err(Error::format(format!("unknown NTF dtype code {c}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

const NTF_MAGIC: &[u8; 4] = b"NTF1";

/// In-memory NTF file: `"NTF1"`, dtype u8, rank u8, dims u64 x rank, then the
/// row-major little-endian payload.
#[derive(Clone, Debug, PartialEq)]
pub struct NtfArray {
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Raw little-endian payload bytes.
    pub payload: Vec<u8>,
}

impl NtfArray {
    pub fn from_f64(t: &Tensor) -> Self {
        NtfArray {
            dtype: DType::F64,
            shape: t.shape().to_vec(),
            payload: t.data().iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn from_f32(t: &Tensor<f32>) -> Self {
        NtfArray {
            dtype: DType::F32,
            shape: t.shape().to_vec(),
            payload: t.data().iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn from_u8(shape: &[usize], data: Vec<u8>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "contract violation: u8 payload length");
        NtfArray {
            dtype: DType::U8,
            shape: shape.to_vec(),
            payload: data,
        }
    }

    /// Values as `f64`; u8 payloads are divided by 255 when `rescale_u8`.
    pub fn to_tensor(&self, rescale_u8: bool) -> Tensor {
        let data: Vec<f64> = match self.dtype {
            DType::F64 => self
                .payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            DType::F32 => self
                .payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            DType::U8 => self
                .payload
                .iter()
                .map(|&b| if rescale_u8 { b as f64 / 255.0 } else { b as f64 })
                .collect(),
        };
        Tensor::new(self.shape.clone(), data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(NTF_MAGIC).u8(self.dtype as u8).u8(self.shape.len() as u8);
        for &d in &self.shape {
            w.u64(d as u64);
        }
        w.bytes(&self.payload);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(NTF_MAGIC)?;
        let dtype = DType::from_code(r.u8()?)?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let want = shape
            .iter()
            .try_fold(dtype.size(), |acc: usize, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("NTF dims overflow"))?;
        if r.remaining() != want {
            return Err(Error::format(format!(
                "NTF payload has {} bytes, dims {shape:?} need {want}",
                r.remaining()
            )));
        }
        let payload = r.take(want)?.to_vec();
        Ok(NtfArray { dtype, shape, payload })
    }
}

pub fn save_ntf(path: impl AsRef<Path>, array: &NtfArray) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&array.to_bytes())?;
    Ok(())
}

pub fn load_ntf(path: impl AsRef<Path>) -> Result<NtfArray> {
    NtfArray::from_bytes(&fs::read(path)?)
}

pub const MANIFEST: &str = "manifest.txt";

/// Paths listed in `dir/manifest.txt`, one relative path per line.
pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| dir.join(l))
        .collect())
}

pub fn load_dataset(dir: impl AsRef<Path>, rescale_u8: bool) -> Result<Vec<Tensor>> {
    read_manifest(dir)?
        .iter()
        .map(|p| Ok(load_ntf(p)?.to_tensor(rescale_u8)))
        .collect()
}

/// Writes `items` as `item_00000.ntf, ...` plus a manifest.
pub fn write_dataset(dir: impl AsRef<Path>, items: &[NtfArray]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, it) in items.iter().enumerate() {
        let name = format!("item_{i:05}.ntf");
        save_ntf(dir.join(&name), it)?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Smooth synthetic RGB images `[size, size, 3]` in `[0, 1]`: a colour
/// gradient background with two soft coloured blobs.
pub fn synthetic_images(count: usize, size: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = seeded_rng(seed);
    (0..count)
        .map(|_| {
            let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
            let grad: [[f64; 2]; 3] = std::array::from_fn(|_| [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)]);
            let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..2)
                .map(|_| {
                    (
                        [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)],
                        rng.random_range(0.08..0.25),
                        std::array::from_fn(|_| rng.random_range(-0.5..0.5)),
                    )
                })
                .collect();
            let mut data = Vec::with_capacity(size * size * 3);
            for i in 0..size {
                for j in 0..size {
                    let y = i as f64 / (size - 1).max(1) as f64;
                    let x = j as f64 / (size - 1).max(1) as f64;
                    for c in 0..3 {
                        let mut v = base[c] + grad[c][0] * (y - 0.5) + grad[c][1] * (x - 0.5);
                        for (centre, radius, colour) in &blobs {
                            let d2 = (y - centre[0]).powi(2) + (x - centre[1]).powi(2);
                            v += colour[c] * (-d2 / (2.0 * radius * radius)).exp();
                        }
                        data.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            Tensor::new([size, size, 3], data)
        })
        .collect()
}
