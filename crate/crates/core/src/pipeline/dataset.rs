//! Paired `low/` + `high/` PNG datasets.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::color_hvi::RgbImage;
use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::image_io::load_png;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairPaths {
    pub name: String,
    pub low: PathBuf,
    pub high: PathBuf,
}

/// Matched pairs in lexicographic order plus names present on one side only.
#[derive(Clone, Debug, Default)]
pub struct PairScan {
    pub pairs: Vec<PairPaths>,
    pub missing: Vec<String>,
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.insert(name.to_string());
            }
        }
    }
    Ok(names)
}

pub fn scan_pairs(root: &Path) -> Result<PairScan> {
    let (low_dir, high_dir) = (root.join("low"), root.join("high"));
    for dir in [&low_dir, &high_dir] {
        if !dir.is_dir() {
            return Err(Error::Dataset(format!("missing directory {}", dir.display())));
        }
    }
    let low = png_names(&low_dir)?;
    let high = png_names(&high_dir)?;
    let pairs = low
        .intersection(&high)
        .map(|n| PairPaths { name: n.clone(), low: low_dir.join(n), high: high_dir.join(n) })
        .collect();
    let missing = low.symmetric_difference(&high).cloned().collect();
    Ok(PairScan { pairs, missing })
}

/// Fully loaded paired dataset with a deterministic tail validation split.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub root: PathBuf,
    pub names: Vec<String>,
    pub low: Vec<RgbImage>,
    pub high: Vec<RgbImage>,
}

impl PairedDataset {
    /// Strict load: unpaired files or size mismatches are errors naming the files.
    pub fn load(root: &Path) -> Result<Self> {
        let scan = scan_pairs(root)?;
        if !scan.missing.is_empty() {
            return Err(Error::Dataset(format!("unpaired files under {}: {}", root.display(), scan.missing.join(", "))));
        }
        if scan.pairs.is_empty() {
            return Err(Error::Dataset(format!("no PNG pairs under {}", root.display())));
        }
        let mut ds = Self { root: root.to_path_buf(), names: Vec::new(), low: Vec::new(), high: Vec::new() };
        for p in scan.pairs {
            let (low, high) = (load_png(&p.low)?, load_png(&p.high)?);
            if (low.width(), low.height()) != (high.width(), high.height()) {
                return Err(Error::Dataset(format!(
                    "{} is {}x{} but {} is {}x{}",
                    p.low.display(),
                    low.width(),
                    low.height(),
                    p.high.display(),
                    high.width(),
                    high.height()
                )));
            }
            ds.names.push(p.name);
            ds.low.push(low);
            ds.high.push(high);
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// `(train, validation)` indices; validation is the lexicographic tail,
    /// `round(n * fraction)` pairs but never the whole set.
    pub fn split(&self, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let n = self.len();
        let n_val = ((n as f64 * val_fraction).round() as usize).min(n.saturating_sub(1));
        ((0..n - n_val).collect(), (n - n_val..n).collect())
    }
}

/// Random aligned crop of side `crop` (or the largest multiple of 8 that fits)
/// plus optional flips, applied identically to both images.
pub fn random_crop_pair<R: Rng + ?Sized>(
    low: &RgbImage,
    high: &RgbImage,
    crop: usize,
    cfg: &DataConfig,
    rng: &mut R,
) -> (RgbImage, RgbImage) {
    let (w, h) = (low.width(), low.height());
    let side = crop.min(w).min(h);
    let side = if side >= 8 { side - side % 8 } else { side };
    let top = rng.random_range(0..=h - side);
    let left = rng.random_range(0..=w - side);
    let hflip = cfg.hflip && rng.random_bool(0.5);
    let vflip = cfg.vflip && rng.random_bool(0.5);
    let take = |img: &RgbImage| {
        RgbImage::from_fn(side, side, |x, y| {
            let sx = if hflip { side - 1 - x } else { x };
            let sy = if vflip { side - 1 - y } else { y };
            img.pixel(left + sx, top + sy)
        })
        .expect("crop of a valid image")
    };
    (take(low), take(high))
}

/// Crops the pairs at `indices` to a common square size and stacks them into
/// `[B, 3, S, S]` low and high tensors. `transform` may replace a low image
/// before it is cropped.
pub fn batch_from<T: Real, R: Rng + ?Sized>(
    ds: &PairedDataset,
    indices: &[usize],
    cfg: &DataConfig,
    rng: &mut R,
    mut transform: impl FnMut(&RgbImage, &mut R) -> Option<RgbImage>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if indices.is_empty() {
        return Err(Error::Dataset("empty batch".into()));
    }
    let crop = indices.iter().map(|&i| ds.low[i].width().min(ds.low[i].height())).min().unwrap_or(0).min(cfg.crop);
    let mut lows = Vec::with_capacity(indices.len());
    let mut highs = Vec::with_capacity(indices.len());
    for &i in indices {
        let src = transform(&ds.low[i], rng);
        let (l, h) = random_crop_pair(src.as_ref().unwrap_or(&ds.low[i]), &ds.high[i], crop, cfg, rng);
        lows.push(l);
        highs.push(h);
    }
    let lr: Vec<&RgbImage> = lows.iter().collect();
    let hr: Vec<&RgbImage> = highs.iter().collect();
    Ok((RgbImage::stack(&lr)?, RgbImage::stack(&hr)?))
}
