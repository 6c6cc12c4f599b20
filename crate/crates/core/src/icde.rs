//! Training-time data expansion: dark-protected gamma perturbation of inputs
//! (PGA) and a crop/blur consistency term on outputs (PIC).

use std::f64::consts::PI;

use rand::Rng;

use crate::color_hvi::RgbImage;
use crate::config::{CropMode, PgaConfig, PicConfig};
use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, Real, Tensor, Var};

/// Cubic smoothstep of `min(1, p / tau)`.
pub fn smoothstep(p: f64, tau: f64) -> f64 {
    let t = (p / tau).min(1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Per-pixel blend weight from the channel-max map.
pub fn smoothstep_alpha<T: Real>(p_max: &Tensor<T>, tau_d: f64) -> Result<Tensor<T>> {
    if tau_d <= 0.0 {
        return Err(Error::config("tau_d must be positive"));
    }
    Ok(p_max.map(|p| T::c(smoothstep(p.f64(), tau_d))))
}

/// Draws per-channel exponents, or `None` when this sample is left untouched.
pub fn sample_gammas<R: Rng + ?Sized>(cfg: &PgaConfig, rng: &mut R) -> Option<[f64; 3]> {
    let apply = rng.random::<f64>() < cfg.apply_prob;
    if !apply {
        return None;
    }
    Some([0; 3].map(|_| {
        if cfg.gamma_low == cfg.gamma_high {
            cfg.gamma_low
        } else {
            rng.random_range(cfg.gamma_low..cfg.gamma_high)
        }
    }))
}

/// `alpha * x^gamma + (1 - alpha) * x` on one planar `[3, H*W]` sample.
pub fn pga_blend<T: Real>(chw: &[T], gammas: [f64; 3], tau_d: f64) -> Vec<T> {
    let hw = chw.len() / 3;
    let mut out = chw.to_vec();
    for p in 0..hw {
        let pmax = chw[p].max(chw[hw + p]).max(chw[2 * hw + p]);
        let alpha = T::c(smoothstep(pmax.f64(), tau_d));
        for c in 0..3 {
            let x = chw[c * hw + p];
            out[c * hw + p] = alpha * x.powf(T::c(gammas[c])) + (T::one() - alpha) * x;
        }
    }
    out
}

pub fn apply_pga_with(img: &RgbImage, gammas: [f64; 3], tau_d: f64) -> RgbImage {
    let t = img.to_tensor::<f64>();
    let out = Tensor::from_vec(t.shape(), pga_blend(t.data(), gammas, tau_d));
    let mut res = RgbImage::from_tensor(&out, 0).expect("blend stays in range");
    res.meta = img.meta.clone();
    res
}

pub fn apply_pga<R: Rng + ?Sized>(img: &RgbImage, cfg: &PgaConfig, rng: &mut R) -> RgbImage {
    match sample_gammas(cfg, rng) {
        Some(g) => apply_pga_with(img, g, cfg.tau_d),
        None => img.clone(),
    }
}

/// PGA over a `[N, 3, H, W]` batch, one coin flip per sample.
pub fn apply_pga_batch<T: Real, R: Rng + ?Sized>(x: &Tensor<T>, cfg: &PgaConfig, rng: &mut R) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert_eq!(c, 3);
    let per = 3 * h * w;
    let mut out = Vec::with_capacity(x.numel());
    for b in 0..n {
        let sample = &x.data()[b * per..(b + 1) * per];
        match sample_gammas(cfg, rng) {
            Some(g) => out.extend(pga_blend(sample, g, cfg.tau_d)),
            None => out.extend_from_slice(sample),
        }
    }
    Tensor::from_vec(x.shape(), out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlurParams {
    pub kernel: usize,
    pub sigma: f64,
}

impl BlurParams {
    pub fn sample<R: Rng + ?Sized>(cfg: &PicConfig, rng: &mut R) -> Self {
        let choices = (cfg.blur_kernel_max - cfg.blur_kernel_min) / 2 + 1;
        let kernel = cfg.blur_kernel_min + 2 * rng.random_range(0..choices);
        let sigma = rng.random_range(cfg.sigma_low..cfg.sigma_high);
        Self { kernel, sigma }
    }
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with reflection padding; shape-preserving.
pub fn gaussian_blur<'t, T: Real>(x: &Var<'t, T>, blur: BlurParams) -> Var<'t, T> {
    let (_, c, _, _) = x.dims4();
    let taps: Vec<T> = gaussian_kernel(blur.kernel, blur.sigma).into_iter().map(T::c).collect();
    let kv = Var::constant(Tensor::from_vec(&[c, 1, blur.kernel, 1], taps.repeat(c)));
    let kh = Var::constant(Tensor::from_vec(&[c, 1, 1, blur.kernel], taps.repeat(c)));
    let r = blur.kernel / 2;
    let spec = Conv2dSpec::valid().depthwise(c);
    x.pad_reflect(r, r, r, r).conv2d(&kv, None, spec).conv2d(&kh, None, spec)
}

/// Outcome of building the two consistency views.
#[derive(Clone, Debug)]
pub enum PicViews<V> {
    Views { weak: V, strong: V, blur: BlurParams },
    /// The image is too small for the configured crop.
    Skipped,
}

impl<V> PicViews<V> {
    pub fn is_skipped(&self) -> bool {
        matches!(self, PicViews::Skipped)
    }
}

/// Crop window `(top, left, h, w)` or `None` when the image is too small.
pub fn crop_window(h: usize, w: usize, cfg: &PicConfig) -> Option<(usize, usize, usize, usize)> {
    let s = cfg.crop_margin;
    match cfg.crop_mode {
        CropMode::Margin => (h > 2 * s && w > 2 * s).then(|| (s, s, h - 2 * s, w - 2 * s)),
        CropMode::Literal => (s > 0 && h >= s && w >= s).then(|| ((h - s) / 2, (w - s) / 2, s, s)),
    }
}

/// Weak (centre crop) and strong (blurred crop) views of a `[N, 3, H, W]` output.
pub fn pic_views_var<'t, T: Real, R: Rng + ?Sized>(output: &Var<'t, T>, cfg: &PicConfig, rng: &mut R) -> PicViews<Var<'t, T>> {
    let (_, _, h, w) = output.dims4();
    let Some((top, left, ch, cw)) = crop_window(h, w, cfg) else {
        return PicViews::Skipped;
    };
    let blur = BlurParams::sample(cfg, rng);
    let weak = output.crop(top, left, ch, cw);
    let strong = gaussian_blur(&weak, blur);
    PicViews::Views { weak, strong, blur }
}

pub fn pic_views<R: Rng + ?Sized>(output: &RgbImage, cfg: &PicConfig, rng: &mut R) -> PicViews<RgbImage> {
    let x = Var::constant(output.to_tensor::<f64>());
    match pic_views_var(&x, cfg, rng) {
        PicViews::Views { weak, strong, blur } => PicViews::Views {
            weak: RgbImage::from_tensor(weak.value(), 0).expect("crop of a valid image"),
            strong: RgbImage::from_tensor(strong.value(), 0).expect("blur of a valid image"),
            blur,
        },
        PicViews::Skipped => PicViews::Skipped,
    }
}

/// Cosine-decayed weight `beta0 / 2 * (cos(pi t / T) + 1)`; steps past `T` clamp.
pub fn consistency_weight(step: usize, cfg: &PicConfig) -> f64 {
    let total = cfg.total_steps.unwrap_or(1).max(1);
    let t = step.min(total) as f64 / total as f64;
    cfg.beta0 / 2.0 * ((PI * t).cos() + 1.0)
}

pub fn consistency_loss_var<'t, T: Real>(weak: &Var<'t, T>, strong: &Var<'t, T>, step: usize, cfg: &PicConfig) -> Var<'t, T> {
    assert_eq!(weak.shape(), strong.shape(), "consistency views differ in shape");
    let beta = consistency_weight(step, cfg);
    weak.sub(strong).sqr().mean_all().mul_scalar(T::c(beta))
}

pub fn consistency_loss(weak: &RgbImage, strong: &RgbImage, step: usize, cfg: &PicConfig) -> Result<f64> {
    if weak.width() != strong.width() || weak.height() != strong.height() {
        return Err(Error::Shape("consistency views differ in shape".into()));
    }
    let w = Var::constant(weak.to_tensor::<f64>());
    let s = Var::constant(strong.to_tensor::<f64>());
    Ok(consistency_loss_var(&w, &s, step, cfg).value().item())
}
