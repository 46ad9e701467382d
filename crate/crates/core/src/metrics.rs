//! Rate and distortion measures.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// PSNR values written to CSV are capped here; a perfect reconstruction
/// would otherwise be infinite.
pub const PSNR_CAP_DB: f64 = 100.0;

/// `-10 log10(mse)` for signals with unit peak. Zero error gives `+inf`.
pub fn psnr(mse: f64) -> f64 {
    assert!(mse >= 0.0, "contract violation: negative mse {mse}");
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr_for_csv(mse: f64) -> f64 {
    psnr(mse).min(PSNR_CAP_DB)
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "contract violation: mse length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub fn bpp(total_bits: f64, num_pixels: usize) -> f64 {
    assert!(num_pixels > 0, "contract violation: zero pixels");
    total_bits / num_pixels as f64
}

pub fn kbps(total_bits: f64, seconds: f64) -> f64 {
    assert!(seconds > 0.0, "contract violation: non-positive duration");
    total_bits / seconds / 1000.0
}

/// Fraction of voxels where `pred > threshold` agrees with the binary target.
pub fn voxel_accuracy(pred: &[f64], target: &[f64], threshold: f64) -> f64 {
    assert_eq!(pred.len(), target.len(), "contract violation: voxel grids differ in size");
    assert!(!pred.is_empty(), "contract violation: empty voxel grid");
    let hits = pred
        .iter()
        .zip(target)
        .filter(|(&p, &t)| (p > threshold) == (t > 0.5))
        .count();
    hits as f64 / pred.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RateUnit {
    Bpp,
    Kbps,
}

impl RateUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            RateUnit::Bpp => "bpp",
            RateUnit::Kbps => "kbps",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdPoint {
    pub dataset: String,
    pub lambda: Option<f64>,
    pub rate: f64,
    pub unit: RateUnit,
    pub psnr_db: f64,
    pub items: usize,
}

pub const RD_CSV_HEADER: &str = "dataset,lambda,rate,rate_unit,psnr_db,items";

pub fn rd_csv(points: &[RdPoint]) -> String {
    let mut s = String::from(RD_CSV_HEADER);
    s.push('\n');
    for p in points {
        let lambda = p.lambda.map(|l| l.to_string()).unwrap_or_default();
        writeln!(
            s,
            "{},{},{},{},{},{}",
            p.dataset,
            lambda,
            p.rate,
            p.unit.as_str(),
            p.psnr_db.min(PSNR_CAP_DB),
            p.items
        )
        .unwrap();
    }
    s
}

/// `<stem>_reference.csv` next to `path`.
pub fn reference_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}_reference.csv"))
}

/// Writes `points` to `path` and the published reference points, byte for
/// byte, to the overlay file beside it. Returns the overlay path.
pub fn write_rd_csv(path: &Path, points: &[RdPoint]) -> std::io::Result<PathBuf> {
    std::fs::write(path, rd_csv(points))?;
    let overlay = reference_path(path);
    std::fs::write(&overlay, REFERENCE_RD_CSV)?;
    Ok(overlay)
}

/// Published rate/PSNR pairs used as plot overlays, one row per point.
pub const REFERENCE_RD_CSV: &str = include_str!("../data/reference_rd.csv");

pub fn reference_points() -> Vec<RdPoint> {
    REFERENCE_RD_CSV
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            RdPoint {
                dataset: f[0].to_string(),
                lambda: None,
                rate: f[2].parse().expect("reference rate"),
                unit: if f[3] == "kbps" { RateUnit::Kbps } else { RateUnit::Bpp },
                psnr_db: f[4].parse().expect("reference psnr"),
                items: f[5].parse().unwrap_or(0),
            }
        })
        .collect()
}
