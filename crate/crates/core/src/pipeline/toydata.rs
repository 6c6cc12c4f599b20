//! Synthetic paired data: smooth colour fields with shapes, darkened by a
//! random gamma, per-channel gain and intensity-dependent noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::color_hvi::RgbImage;
use crate::error::Result;
use crate::image_io::save_png;

pub const TOY_SIZE: usize = 96;

#[derive(Clone, Debug)]
pub struct ToyPair {
    pub name: String,
    pub low: RgbImage,
    pub high: RgbImage,
    pub gamma: f64,
}

fn smooth_field(rng: &mut ChaCha8Rng, size: usize) -> Vec<[f64; 3]> {
    const GRID: usize = 4;
    let nodes: Vec<[f64; 3]> = (0..GRID * GRID).map(|_| [0; 3].map(|_| rng.random_range(0.15..0.95))).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let gx = x as f64 / (size - 1) as f64 * (GRID - 1) as f64;
            let gy = y as f64 / (size - 1) as f64 * (GRID - 1) as f64;
            let (x0, y0) = ((gx as usize).min(GRID - 2), (gy as usize).min(GRID - 2));
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            let at = |i: usize, j: usize| nodes[j * GRID + i];
            let mut px = [0.0; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let top = at(x0, y0)[c] * (1.0 - fx) + at(x0 + 1, y0)[c] * fx;
                let bottom = at(x0, y0 + 1)[c] * (1.0 - fx) + at(x0 + 1, y0 + 1)[c] * fx;
                *v = top * (1.0 - fy) + bottom * fy;
            }
            out.push(px);
        }
    }
    out
}

fn paint_shapes(rng: &mut ChaCha8Rng, field: &mut [[f64; 3]], size: usize) {
    for _ in 0..rng.random_range(2..6) {
        let colour = [0; 3].map(|_| rng.random_range(0.05..1.0));
        let (cx, cy) = (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64));
        let r = rng.random_range(size as f64 * 0.08..size as f64 * 0.3);
        let disc = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = if disc { dx * dx + dy * dy <= r * r } else { dx.abs() <= r && dy.abs() <= r * 0.6 };
                if inside {
                    field[y * size + x] = colour;
                }
            }
        }
    }
}

/// Generates pair `index` of the stream for `seed`; independent of `n`.
pub fn toy_pair(seed: u64, index: usize, size: usize) -> ToyPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let mut field = smooth_field(&mut rng, size);
    paint_shapes(&mut rng, &mut field, size);
    let gamma = rng.random_range(2.0..4.0);
    let gain = [0; 3].map(|_| rng.random_range(0.8..1.0));
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut high = Vec::with_capacity(size * size * 3);
    let mut low = Vec::with_capacity(size * size * 3);
    for px in &field {
        for c in 0..3 {
            let v = px[c];
            let dark = v.powf(gamma) * gain[c];
            // darker pixels carry relatively more noise
            let sigma = (0.002 / (dark + 0.05)).min(0.02);
            high.push(v as f32);
            low.push((dark + sigma * noise.sample(&mut rng)).clamp(0.0, 1.0) as f32);
        }
    }
    ToyPair {
        name: format!("{index:04}.png"),
        low: RgbImage::new(size, size, low).expect("valid synthetic image"),
        high: RgbImage::new(size, size, high).expect("valid synthetic image"),
        gamma,
    }
}

/// Writes `n` pairs under `out/low` and `out/high`.
pub fn make_toy_dataset(out: &Path, n: usize, seed: u64) -> Result<Vec<ToyPair>> {
    let pairs: Vec<ToyPair> = (0..n).map(|i| toy_pair(seed, i, TOY_SIZE)).collect();
    for p in &pairs {
        save_png(&p.low, &out.join("low").join(&p.name))?;
        save_png(&p.high, &out.join("high").join(&p.name))?;
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::dataset::PairedDataset;

    #[test]
    fn low_is_darker_and_paired() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = make_toy_dataset(dir.path(), 6, 7).unwrap();
        for p in &pairs {
            assert!(p.low.mean() < p.high.mean(), "{}", p.name);
            assert!((2.0..4.0).contains(&p.gamma));
        }
        let ds = PairedDataset::load(dir.path()).unwrap();
        assert_eq!(ds.len(), 6);
        for (l, h) in ds.low.iter().zip(&ds.high) {
            assert_eq!((l.width(), l.height()), (h.width(), h.height()));
            assert!(l.mean() < h.mean());
        }
    }

    #[test]
    fn generation_is_byte_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        make_toy_dataset(a.path(), 3, 11).unwrap();
        make_toy_dataset(b.path(), 3, 11).unwrap();
        for side in ["low", "high"] {
            for i in 0..3 {
                let name = format!("{i:04}.png");
                let x = std::fs::read(a.path().join(side).join(&name)).unwrap();
                let y = std::fs::read(b.path().join(side).join(&name)).unwrap();
                assert_eq!(x, y);
            }
        }
        assert_ne!(toy_pair(11, 0, 16).high, toy_pair(12, 0, 16).high);
    }
}
