//! PSNR / SSIM and paired-dataset evaluation reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::color_hvi::RgbImage;
use crate::error::{Error, Result};
use crate::image_io::load_png;
use crate::objectives::ssim_var;
use crate::pipeline::dataset::scan_pairs;
use crate::tensor::{Tensor, Var};

/// Reported for identical images (MSE = 0).
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricSpace {
    #[default]
    Rgb,
    /// BT.601 luma.
    Y,
}

impl std::str::FromStr for MetricSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Self::Rgb),
            "y" => Ok(Self::Y),
            other => Err(Error::config(format!("unknown metric space {other:?} (expected rgb or y)"))),
        }
    }
}

fn planes(img: &RgbImage, space: MetricSpace) -> Tensor<f64> {
    let t = img.to_tensor::<f64>();
    match space {
        MetricSpace::Rgb => t,
        MetricSpace::Y => {
            let hw = img.width() * img.height();
            let d = t.data();
            let y = (0..hw).map(|p| 0.299 * d[p] + 0.587 * d[hw + p] + 0.114 * d[2 * hw + p]).collect();
            Tensor::from_vec(&[1, 1, img.height(), img.width()], y)
        }
    }
}

fn same_size(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Shape(format!("{}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height())));
    }
    Ok(())
}

pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    psnr_in(a, b, MetricSpace::Rgb)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr_in(a: &RgbImage, b: &RgbImage, space: MetricSpace) -> Result<f64> {
    same_size(a, b)?;
    psnr_tensors(&planes(a, space), &planes(b, space))
}

/// PSNR on same-shaped f64 tensors with values in `[0, 1]`.
pub fn psnr_tensors(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64;
    Ok(if mse == 0.0 { PSNR_CAP } else { (-10.0 * mse.log10()).min(PSNR_CAP) })
}

pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    ssim_in(a, b, MetricSpace::Rgb)
}

/// Gaussian-window SSIM (11x11, sigma 1.5) averaged over channels and the
/// valid region. Images smaller than the window use the largest odd window
/// that fits.
pub fn ssim_in(a: &RgbImage, b: &RgbImage, space: MetricSpace) -> Result<f64> {
    same_size(a, b)?;
    ssim_tensors(&planes(a, space), &planes(b, space))
}

/// SSIM on same-shaped `[N, C, H, W]` f64 tensors.
pub fn ssim_tensors(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 4 {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (pa, pb) = (Var::constant(a.clone()), Var::constant(b.clone()));
    Ok(ssim_var(&pa, &pb, SSIM_WINDOW, SSIM_SIGMA).value().item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub config_hash: String,
    pub metric_space: MetricSpace,
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: Aggregate,
    /// Files without a counterpart (or unreadable); excluded from the aggregate.
    pub missing: Vec<String>,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn new(config_hash: &str, metric_space: MetricSpace, per_image: Vec<ImageMetrics>) -> Self {
        let count = per_image.len();
        let mean = |f: fn(&ImageMetrics) -> f64| if count == 0 { 0.0 } else { per_image.iter().map(f).sum::<f64>() / count as f64 };
        let aggregate = Aggregate { mean_psnr: mean(|m| m.psnr_db), mean_ssim: mean(|m| m.ssim), count };
        let warnings = if count == 0 { vec!["no image pairs evaluated".to_string()] } else { Vec::new() };
        Self {
            version: REPORT_VERSION,
            config_hash: config_hash.to_string(),
            metric_space,
            per_image,
            aggregate,
            missing: Vec::new(),
            warnings,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Dataset(format!("malformed report: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Runs `enhance` on every `low/` image that has a `high/` counterpart, in
/// lexicographic order, and scores the result against the reference.
pub fn evaluate_dataset(
    root: &Path,
    config_hash: &str,
    space: MetricSpace,
    mut enhance: impl FnMut(&RgbImage) -> Result<RgbImage>,
) -> Result<MetricReport> {
    let scan = if root.join("low").is_dir() || root.join("high").is_dir() {
        scan_pairs(root)?
    } else {
        Default::default()
    };
    let mut rows = Vec::new();
    let mut missing = scan.missing.clone();
    let mut warnings = Vec::new();
    for pair in &scan.pairs {
        let loaded = load_png(&pair.low).and_then(|low| Ok((low, load_png(&pair.high)?)));
        let (low, high) = match loaded {
            Ok(v) => v,
            Err(e) => {
                warnings.push(e.to_string());
                missing.push(pair.name.clone());
                continue;
            }
        };
        if let Err(e) = same_size(&low, &high) {
            warnings.push(format!("{}: {e}", pair.name));
            missing.push(pair.name.clone());
            continue;
        }
        let out = enhance(&low)?;
        rows.push(ImageMetrics { name: pair.name.clone(), psnr_db: psnr_in(&out, &high, space)?, ssim: ssim_in(&out, &high, space)? });
    }
    let mut report = MetricReport::new(config_hash, space, rows);
    missing.sort();
    report.missing = missing;
    report.warnings.extend(warnings);
    for name in &report.missing {
        log::warn!("{name}: no usable pair, excluded from aggregate");
    }
    Ok(report)
}
