//! WebAssembly bindings for the browser demo. Images cross the boundary as
//! RGBA bytes (canvas `ImageData` layout); alpha is ignored on input and
//! opaque on output.

use interlight::color_hvi::{hvi_to_rgb, rgb_to_hvi, RgbImage};
use interlight::icde::{apply_pga_with, smoothstep};
use interlight::lgim::gain;
use wasm_bindgen::prelude::*;

fn from_rgba(rgba: &[u8], width: usize, height: usize) -> Result<RgbImage, String> {
    if rgba.len() != width * height * 4 {
        return Err(format!("{} bytes for a {width}x{height} RGBA image", rgba.len()));
    }
    let data = rgba.chunks_exact(4).flat_map(|px| [px[0], px[1], px[2]].map(|v| v as f32 / 255.0)).collect();
    RgbImage::new(width, height, data).map_err(|e| e.to_string())
}

fn byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn push_rgba(out: &mut Vec<u8>, rgb: [f64; 3]) {
    out.extend(rgb.map(byte));
    out.push(255);
}

fn to_rgba(img: &RgbImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.width() * img.height() * 4);
    for px in img.data().chunks_exact(3) {
        push_rgba(&mut out, [px[0] as f64, px[1] as f64, px[2] as f64]);
    }
    out
}

/// Colour wheel rendering of a chroma point: angle -> hue, radius -> saturation.
fn chroma_colour(h: f64, v: f64) -> [f64; 3] {
    let r = (h * h + v * v).sqrt().min(1.0);
    let hue = (v.atan2(h) / std::f64::consts::TAU).rem_euclid(1.0) * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let base = match hue as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    };
    base.map(|c| 1.0 - r + r * c)
}

/// Four RGBA panels of the input size, concatenated: chroma plane (HV),
/// intensity, density `C_k`, and the inverse-transformed reconstruction.
pub fn hvi_panels(rgba: &[u8], width: usize, height: usize, k: f64) -> Result<Vec<u8>, String> {
    let img = from_rgba(rgba, width, height)?;
    let hvi = rgb_to_hvi(&img, k).map_err(|e| e.to_string())?;
    let back = hvi_to_rgb(&hvi).map_err(|e| e.to_string())?;
    let n = width * height;
    let mut out = Vec::with_capacity(4 * n * 4);
    for p in 0..n {
        push_rgba(&mut out, chroma_colour(hvi.h[p] as f64, hvi.v[p] as f64));
    }
    for p in 0..n {
        push_rgba(&mut out, [hvi.i[p] as f64; 3]);
    }
    for p in 0..n {
        push_rgba(&mut out, [hvi.c_k[p] as f64; 3]);
    }
    out.extend(to_rgba(&back));
    Ok(out)
}

/// Two RGBA panels: the gamma-perturbed image and the blend weight map.
pub fn pga_panels(rgba: &[u8], width: usize, height: usize, gammas: [f64; 3], tau: f64) -> Result<Vec<u8>, String> {
    if tau <= 0.0 {
        return Err("tau must be positive".into());
    }
    let img = from_rgba(rgba, width, height)?;
    let mut out = to_rgba(&apply_pga_with(&img, gammas, tau));
    for px in img.data().chunks_exact(3) {
        let pmax = px[0].max(px[1]).max(px[2]) as f64;
        push_rgba(&mut out, [smoothstep(pmax, tau); 3]);
    }
    Ok(out)
}

/// Memory fusion gain sampled at `samples` evenly spaced gate values in `[0, 1]`.
pub fn gain_samples(lambda: f64, eta: f64, samples: usize) -> Vec<f64> {
    let n = samples.max(2);
    (0..n).map(|i| gain(lambda, eta, i as f64 / (n - 1) as f64)).collect()
}

#[wasm_bindgen]
pub fn hvi_decompose(rgba: &[u8], width: usize, height: usize, k: f64) -> Result<Vec<u8>, JsError> {
    hvi_panels(rgba, width, height, k).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn pga_preview(rgba: &[u8], width: usize, height: usize, gamma_r: f64, gamma_g: f64, gamma_b: f64, tau: f64) -> Result<Vec<u8>, JsError> {
    pga_panels(rgba, width, height, [gamma_r, gamma_g, gamma_b], tau).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn gain_curve(lambda: f64, eta: f64, samples: usize) -> Vec<f64> {
    gain_samples(lambda, eta, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> Vec<u8> {
        (0..w * h).flat_map(|p| [(p * 7 % 256) as u8, (p * 13 % 256) as u8, (p * 29 % 256) as u8, 255]).collect()
    }

    #[test]
    fn hvi_panels_reconstruct_the_input() {
        let (w, h) = (8, 6);
        let rgba = gradient(w, h);
        let out = hvi_panels(&rgba, w, h, 0.2).unwrap();
        assert_eq!(out.len(), 4 * w * h * 4);
        let recon = &out[3 * w * h * 4..];
        for (a, b) in rgba.iter().zip(recon) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn unit_gamma_is_identity_and_weights_are_opaque() {
        let (w, h) = (5, 5);
        let rgba = gradient(w, h);
        let out = pga_panels(&rgba, w, h, [1.0; 3], 0.05).unwrap();
        assert_eq!(&out[..w * h * 4], &rgba[..]);
        assert!(out[w * h * 4..].chunks(4).all(|px| px[3] == 255));
        assert!(pga_panels(&rgba, w, h, [1.0; 3], 0.0).is_err());
        assert!(pga_panels(&rgba[1..], w, h, [1.0; 3], 0.05).is_err());
    }

    #[test]
    fn gain_curve_spans_the_expected_range() {
        let g = gain_samples(1.2, 0.0, 11);
        assert!((g[10] - 1.2).abs() < 1e-12);
        assert!((g[0] - 1.8).abs() < 1e-12);
        assert!(g.windows(2).all(|p| p[0] >= p[1]));
    }
}
