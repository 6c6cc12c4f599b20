//! HVI colour space: intensity plus a density-scaled polar chrominance plane.
//!
//! The per-pixel conversions are written once over [`Dual`] numbers so the
//! same code serves plain evaluation (`N = 0`) and the differentiable tensor
//! ops (`N = 4`: three colour channels plus `k`).

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::PathBuf;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::dual::Dual;
use crate::tensor::{Real, Tensor, Var};

pub const EPSILON: f64 = 1e-8;
pub const NORM_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ImageMeta {
    pub source: Option<PathBuf>,
    pub bit_depth: u8,
}

/// `H x W x 3` RGB image with values in `[0, 1]`, stored row-major, channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
    pub meta: ImageMeta,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("image must be non-empty, got {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!("{} values for a {width}x{height} RGB image", data.len())));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Domain(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, data, meta: ImageMeta { source: None, bit_depth: 32 } })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let hw = self.width * self.height;
        let mut out = vec![T::zero(); 3 * hw];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = T::c(px[c] as f64);
            }
        }
        Tensor::from_vec(&[1, 3, self.height, self.width], out)
    }

    /// Image `n` of an `[N, 3, H, W]` tensor; values are clamped into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let (nb, c, h, w) = t.dims4();
        if c != 3 || n >= nb {
            return Err(Error::Shape(format!("cannot take image {n} of a {:?} tensor", t.shape())));
        }
        let hw = h * w;
        let base = &t.data()[n * 3 * hw..(n + 1) * 3 * hw];
        if base.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image tensor"));
        }
        let mut data = Vec::with_capacity(3 * hw);
        for p in 0..hw {
            for c in 0..3 {
                data.push(base[c * hw + p].f64().clamp(0.0, 1.0) as f32);
            }
        }
        Self::new(w, h, data)
    }

    /// Stacks same-sized images into `[N, 3, H, W]`.
    pub fn stack<T: Real>(images: &[&RgbImage]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let parts: Vec<Tensor<T>> = images
            .iter()
            .map(|im| {
                if im.width != first.width || im.height != first.height {
                    Err(Error::Shape("batch images differ in size".into()))
                } else {
                    Ok(im.to_tensor())
                }
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Ok(Tensor::concat(&refs, 0))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Per-pixel HVI planes of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct HviImage {
    pub width: usize,
    pub height: usize,
    pub h: Vec<f32>,
    pub v: Vec<f32>,
    pub i: Vec<f32>,
    pub c_k: Vec<f32>,
    pub k: f64,
    pub epsilon: f64,
}

type D<T, const N: usize> = Dual<T, N>;

/// `(sin(pi p / 2) + eps)^k`.
fn density_px<T: Real, const N: usize>(p: D<T, N>, k: D<T, N>, eps: T) -> D<T, N> {
    (p.scale(T::c(FRAC_PI_2)).sin() + D::cst(eps)).pow(k)
}

/// RGB -> (h, v, i). Also returns the density used.
fn rgb_to_hvi_px<T: Real, const N: usize>(rgb: [D<T, N>; 3], k: D<T, N>, eps: T) -> ([D<T, N>; 3], D<T, N>) {
    let (mut hi, mut lo) = (0, 0);
    for c in 1..3 {
        if rgb[c].v > rgb[hi].v {
            hi = c;
        }
        if rgb[c].v < rgb[lo].v {
            lo = c;
        }
    }
    let max = rgb[hi];
    let ck = density_px(max, k, eps);
    let delta = max - rgb[lo];
    if delta.v <= T::zero() || max.v <= T::zero() {
        return ([D::cst(T::zero()), D::cst(T::zero()), max], ck);
    }
    let sat = delta / max;
    let [r, g, b] = rgb;
    let sector = match hi {
        0 => (g - b) / delta,
        1 => (b - r) / delta + D::cst(T::c(2.0)),
        _ => (r - g) / delta + D::cst(T::c(4.0)),
    };
    let theta = sector.scale(T::c(PI / 3.0));
    let radius = ck * sat;
    ([radius * theta.cos(), radius * theta.sin(), max], ck)
}

/// (h, v, i) -> RGB, normalising chrominance by the density of the given intensity.
fn hvi_to_rgb_px<T: Real, const N: usize>(hvi: [D<T, N>; 3], k: D<T, N>, eps: T, floor: T) -> [D<T, N>; 3] {
    let [h, v, i] = hvi;
    let i = if i.v < T::zero() {
        D::cst(T::zero())
    } else if i.v > T::one() {
        D::cst(T::one())
    } else {
        i
    };
    let r2 = h * h + v * v;
    if r2.v <= T::zero() {
        return [i, i, i];
    }
    let ck = density_px(i, k, eps);
    let norm = if ck.v < floor { D::cst(floor) } else { ck };
    let mut sat = r2.sqrt() / norm;
    if sat.v > T::one() {
        sat = D::cst(T::one());
    }
    let mut angle = v.atan2(h);
    if angle.v < T::zero() {
        angle = angle + D::cst(T::c(2.0 * PI));
    }
    let h6 = angle.scale(T::c(3.0 / PI));
    let sector = h6.v.floor().to_usize().unwrap_or(0).min(5);
    let f = h6 - D::cst(T::c(sector as f64));
    let one = D::cst(T::one());
    let p = i * (one - sat);
    let q = i * (one - sat * f);
    let t = i * (one - sat * (one - f));
    let rgb = match sector {
        0 => [i, t, p],
        1 => [q, i, p],
        2 => [p, i, t],
        3 => [p, q, i],
        4 => [t, p, i],
        _ => [i, p, q],
    };
    rgb.map(|c| {
        if c.v < T::zero() {
            D::cst(T::zero())
        } else if c.v > T::one() {
            D::cst(T::one())
        } else {
            c
        }
    })
}

fn check_k(k: f64) -> Result<()> {
    if !k.is_finite() || k <= 0.0 {
        return Err(Error::Domain(format!("density exponent k must be positive and finite, got {k}")));
    }
    Ok(())
}

/// Density map `C_k(p) = (sin(pi p / 2) + eps)^k`.
pub fn density<T: Real>(p: &Tensor<T>, k: f64, epsilon: f64) -> Result<Tensor<T>> {
    check_k(k)?;
    if !p.all_finite() {
        return Err(Error::Domain("density input contains non-finite values".into()));
    }
    let (kd, eps) = (D::<T, 0>::cst(T::c(k)), T::c(epsilon));
    Ok(p.map(|x| density_px(D::cst(x), kd, eps).v))
}

/// Scalar density, evaluated in `f64`.
pub fn density_scalar(p: f64, k: f64, epsilon: f64) -> f64 {
    ((p * FRAC_PI_2).sin() + epsilon).powf(k)
}

pub fn rgb_to_hvi(img: &RgbImage, k: f64) -> Result<HviImage> {
    rgb_to_hvi_eps(img, k, EPSILON)
}

pub fn rgb_to_hvi_eps(img: &RgbImage, k: f64, epsilon: f64) -> Result<HviImage> {
    check_k(k)?;
    let n = img.width * img.height;
    let mut out = HviImage {
        width: img.width,
        height: img.height,
        h: Vec::with_capacity(n),
        v: Vec::with_capacity(n),
        i: Vec::with_capacity(n),
        c_k: Vec::with_capacity(n),
        k,
        epsilon,
    };
    let kd = D::<f64, 0>::cst(k);
    for px in img.data.chunks_exact(3) {
        let rgb = [0, 1, 2].map(|c| D::cst(px[c] as f64));
        let ([h, v, i], ck) = rgb_to_hvi_px(rgb, kd, epsilon);
        out.h.push(h.v as f32);
        out.v.push(v.v as f32);
        out.i.push(i.v as f32);
        out.c_k.push(ck.v as f32);
    }
    Ok(out)
}

pub fn hvi_to_rgb(hvi: &HviImage) -> Result<RgbImage> {
    hvi_to_rgb_floor(hvi, hvi.k, NORM_FLOOR)
}

/// Inverse transform with an explicit exponent (which may differ from the forward one).
pub fn hvi_to_rgb_floor(hvi: &HviImage, k: f64, floor: f64) -> Result<RgbImage> {
    check_k(k)?;
    let n = hvi.width * hvi.height;
    if hvi.h.len() != n || hvi.v.len() != n || hvi.i.len() != n {
        return Err(Error::Shape("HVI planes do not match the image size".into()));
    }
    let kd = D::<f64, 0>::cst(k);
    let mut data = Vec::with_capacity(3 * n);
    for p in 0..n {
        let planes = [hvi.h[p], hvi.v[p], hvi.i[p]].map(|x| D::cst(x as f64));
        if planes.iter().any(|d| !d.v.is_finite()) {
            return Err(Error::Domain("HVI planes contain non-finite values".into()));
        }
        for c in hvi_to_rgb_px(planes, kd, hvi.epsilon, floor) {
            data.push(c.v as f32);
        }
    }
    RgbImage::new(hvi.width, hvi.height, data)
}

trait PixelMap<T: Real> {
    fn apply<const N: usize>(&self, px: [D<T, N>; 3], k: D<T, N>) -> [D<T, N>; 3];
}

struct Forward<T> {
    eps: T,
}

impl<T: Real> PixelMap<T> for Forward<T> {
    fn apply<const N: usize>(&self, px: [D<T, N>; 3], k: D<T, N>) -> [D<T, N>; 3] {
        rgb_to_hvi_px(px, k, self.eps).0
    }
}

struct Inverse<T> {
    eps: T,
    floor: T,
}

impl<T: Real> PixelMap<T> for Inverse<T> {
    fn apply<const N: usize>(&self, px: [D<T, N>; 3], k: D<T, N>) -> [D<T, N>; 3] {
        hvi_to_rgb_px(px, k, self.eps, self.floor)
    }
}

/// Applies a 3-in/3-out pixel map over `[N, 3, H, W]` with a scalar exponent,
/// recording the exact per-pixel Jacobian when gradients are needed.
fn pixelwise<'t, T: Real, M: PixelMap<T>>(x: &Var<'t, T>, k: &Var<'t, T>, map: M) -> Var<'t, T> {
    let (n, c, h, w) = x.dims4();
    assert_eq!(c, 3, "expected 3 channels, got {c}");
    assert_eq!(k.value().numel(), 1, "k must be a scalar");
    let hw = h * w;
    let kv = k.value().data()[0];
    let xd = x.value().data();
    let mut out = vec![T::zero(); xd.len()];
    if !(x.requires_grad() || k.requires_grad()) {
        let kd = D::<T, 0>::cst(kv);
        for b in 0..n {
            let base = b * 3 * hw;
            for p in 0..hw {
                let px = [0, 1, 2].map(|ch| D::cst(xd[base + ch * hw + p]));
                let r = map.apply(px, kd);
                for ch in 0..3 {
                    out[base + ch * hw + p] = r[ch].v;
                }
            }
        }
        return Var::constant(Tensor::from_vec(&[n, 3, h, w], out));
    }
    // jac[(b*hw + p)*12 + o*4 + j] = d out_o / d in_j  (j = 3 is k)
    let mut jac = vec![T::zero(); n * hw * 12];
    let kd = D::<T, 4>::var(kv, 3);
    for b in 0..n {
        let base = b * 3 * hw;
        for p in 0..hw {
            let px = [0, 1, 2].map(|ch| D::var(xd[base + ch * hw + p], ch));
            let r = map.apply(px, kd);
            let jo = (b * hw + p) * 12;
            for o in 0..3 {
                out[base + o * hw + p] = r[o].v;
                jac[jo + o * 4..jo + o * 4 + 4].copy_from_slice(&r[o].d);
            }
        }
    }
    let k_shape = k.shape().to_vec();
    let jac = Arc::new(jac);
    Var::from_op(&[x, k], Tensor::from_vec(&[n, 3, h, w], out), move |g| {
        let gd = g.data();
        let mut gx = vec![T::zero(); gd.len()];
        let mut gk = T::zero();
        for b in 0..n {
            let base = b * 3 * hw;
            for p in 0..hw {
                let jo = (b * hw + p) * 12;
                for o in 0..3 {
                    let go = gd[base + o * hw + p];
                    if go == T::zero() {
                        continue;
                    }
                    let row = &jac[jo + o * 4..jo + o * 4 + 4];
                    for i in 0..3 {
                        gx[base + i * hw + p] += go * row[i];
                    }
                    gk += go * row[3];
                }
            }
        }
        let mut gkt = Tensor::zeros(&k_shape);
        gkt.data_mut()[0] = gk;
        vec![Some(Tensor::from_vec(&[n, 3, h, w], gx)), Some(gkt)]
    })
}

/// Differentiable RGB `[N,3,H,W]` -> HVI `[N,3,H,W]` (channels h, v, i).
pub fn rgb_to_hvi_var<'t, T: Real>(rgb: &Var<'t, T>, k: &Var<'t, T>, epsilon: f64) -> Var<'t, T> {
    pixelwise(rgb, k, Forward { eps: T::c(epsilon) })
}

/// Differentiable HVI `[N,3,H,W]` -> RGB `[N,3,H,W]`.
pub fn hvi_to_rgb_var<'t, T: Real>(hvi: &Var<'t, T>, k: &Var<'t, T>, epsilon: f64, floor: f64) -> Var<'t, T> {
    pixelwise(hvi, k, Inverse { eps: T::c(epsilon), floor: T::c(floor) })
}

/// Raw value that `softplus` maps to `k`.
pub fn k_to_raw(k: f64) -> f64 {
    // softplus^-1(k) = ln(e^k - 1)
    k.exp_m1().ln()
}
