//! Reconstruction losses in RGB and HVI space, their weighted total, and the
//! baseline/memory dual aggregation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{LossConfig, PerceptualBackend};
use crate::error::{Error, Result};
use crate::icde::gaussian_kernel;
use crate::tensor::{Conv2dSpec, Real, Tensor, Var};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Largest odd window not exceeding the image.
fn effective_window(window: usize, h: usize, w: usize) -> usize {
    let m = window.min(h).min(w).max(1);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Separable Gaussian filtering without padding (valid region only).
fn gaussian_filter<'t, T: Real>(x: &Var<'t, T>, size: usize, sigma: f64) -> Var<'t, T> {
    let c = x.shape()[1];
    let taps: Vec<T> = gaussian_kernel(size, sigma).into_iter().map(T::c).collect();
    let kv = Var::constant(Tensor::from_vec(&[c, 1, size, 1], taps.repeat(c)));
    let kh = Var::constant(Tensor::from_vec(&[c, 1, 1, size], taps.repeat(c)));
    let spec = Conv2dSpec::valid().depthwise(c);
    x.conv2d(&kv, None, spec).conv2d(&kh, None, spec)
}

/// Mean SSIM over channels and the valid region, Gaussian window.
pub fn ssim_var<'t, T: Real>(x: &Var<'t, T>, y: &Var<'t, T>, window: usize, sigma: f64) -> Var<'t, T> {
    assert_eq!(x.shape(), y.shape(), "SSIM inputs differ in shape");
    let (_, _, h, w) = x.dims4();
    let win = effective_window(window, h, w);
    let f = |v: &Var<'t, T>| gaussian_filter(v, win, sigma);
    let (mx, my) = (f(x), f(y));
    let (mx2, my2, mxy) = (mx.sqr(), my.sqr(), mx.mul(&my));
    let sxx = f(&x.sqr()).sub(&mx2);
    let syy = f(&y.sqr()).sub(&my2);
    let sxy = f(&x.mul(y)).sub(&mxy);
    let (c1, c2) = (T::c(SSIM_C1), T::c(SSIM_C2));
    let num = mxy.mul_scalar(T::c(2.0)).add_scalar(c1).mul(&sxy.mul_scalar(T::c(2.0)).add_scalar(c2));
    let den = mx2.add(&my2).add_scalar(c1).mul(&sxx.add(&syy).add_scalar(c2));
    num.div(&den).mean_all()
}

/// 3x3 Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]` with reflection padding.
pub fn laplacian<'t, T: Real>(x: &Var<'t, T>) -> Var<'t, T> {
    let c = x.shape()[1];
    let k = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0].map(T::c);
    let kernel = Var::constant(Tensor::from_vec(&[c, 1, 3, 3], k.repeat(c)));
    x.pad_reflect(1, 1, 1, 1).conv2d(&kernel, None, Conv2dSpec::valid().depthwise(c))
}

/// Frozen convolutional feature extractor for the perceptual term.
#[derive(Clone, Debug)]
pub struct FeatureStack<T> {
    /// `(weight, bias, max-pool after, tap after)`
    layers: Vec<(Tensor<T>, Tensor<T>, bool, bool)>,
    /// Per-channel input normalisation `(mean, std)`.
    normalize: Option<([f64; 3], [f64; 3])>,
}

impl<T: Real> FeatureStack<T> {
    /// Seeded random features: three 3x3 conv + ReLU stages, He-normal init.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = [(3, 16, false, true), (16, 16, true, false), (16, 32, false, true)];
        let layers = plan
            .iter()
            .map(|&(ci, co, pool, tap)| {
                let dist = Normal::new(0.0, (2.0 / (ci * 9) as f64).sqrt()).expect("valid std");
                let w: Vec<T> = (0..co * ci * 9).map(|_| T::c(dist.sample(&mut rng))).collect();
                (Tensor::from_vec(&[co, ci, 3, 3], w), Tensor::zeros(&[co]), pool, tap)
            })
            .collect();
        Self { layers, normalize: None }
    }

    /// VGG-16 `features` up to relu3_3 from a safetensors file
    /// (`features.{0,2,5,7,10,12,14}.{weight,bias}`).
    pub fn vgg16(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let load = |name: &str| -> Result<Tensor<T>> {
            let view = st.tensor(name).map_err(|e| Error::Checkpoint(format!("{}: {name}: {e}", path.display())))?;
            if view.dtype() != safetensors::Dtype::F32 {
                return Err(Error::Checkpoint(format!("{name}: expected f32 weights")));
            }
            let data = view.data().chunks_exact(4).map(|b| T::c(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)).collect();
            Ok(Tensor::from_vec(view.shape(), data))
        };
        let plan = [(0, false, false), (2, true, true), (5, false, false), (7, true, true), (10, false, false), (12, false, false), (14, false, true)];
        let layers = plan
            .iter()
            .map(|&(i, pool, tap)| Ok((load(&format!("features.{i}.weight"))?, load(&format!("features.{i}.bias"))?, pool, tap)))
            .collect::<Result<_>>()?;
        Ok(Self { layers, normalize: Some(([0.485, 0.456, 0.406], [0.229, 0.224, 0.225])) })
    }

    pub fn features<'t>(&self, x: &Var<'t, T>) -> Vec<Var<'t, T>> {
        let mut h = match self.normalize {
            Some((mean, std)) => {
                let m = Var::constant(Tensor::from_vec(&[1, 3, 1, 1], mean.map(T::c).to_vec()));
                let s = Var::constant(Tensor::from_vec(&[1, 3, 1, 1], std.map(|v| T::c(1.0 / v)).to_vec()));
                x.sub(&m).mul(&s)
            }
            None => x.clone(),
        };
        let mut taps = Vec::new();
        for (w, b, pool, tap) in &self.layers {
            let wv = Var::constant(w.clone());
            let bv = Var::constant(b.clone());
            h = h.conv2d(&wv, Some(&bv), Conv2dSpec::same(w.shape()[2])).relu();
            if *tap {
                taps.push(h.clone());
            }
            if *pool && h.shape()[2] >= 2 && h.shape()[3] >= 2 {
                h = h.max_pool2();
            }
        }
        taps
    }

    /// Mean over taps of the feature-space L1 distance.
    pub fn distance<'t>(&self, pred: &Var<'t, T>, target: &Var<'t, T>) -> Var<'t, T> {
        let fp = self.features(pred);
        let ft = self.features(&target.detach());
        let n = fp.len();
        let mut total = Var::scalar(T::zero());
        for (a, b) in fp.iter().zip(&ft) {
            total = total.add(&a.sub(&b.detach()).abs().mean_all());
        }
        total.mul_scalar(T::c(1.0 / n as f64))
    }
}

/// Individual terms of one reconstruction loss.
#[derive(Clone, Debug)]
pub struct RecTerms<'t, T: Real> {
    pub l1: Var<'t, T>,
    /// `1 - SSIM`
    pub ssim: Var<'t, T>,
    pub edge: Var<'t, T>,
    pub perceptual: Option<Var<'t, T>>,
    pub total: Var<'t, T>,
}

/// Weighted RGB + HVI reconstruction, plus consistency when attached.
#[derive(Clone, Debug)]
pub struct TotalTerms<'t, T: Real> {
    pub rgb: RecTerms<'t, T>,
    pub hvi: RecTerms<'t, T>,
    pub consistency: Option<Var<'t, T>>,
    pub total: Var<'t, T>,
}

pub struct Objective<T> {
    pub cfg: LossConfig,
    perceptual: Option<FeatureStack<T>>,
}

impl<T: Real> Objective<T> {
    pub fn new(cfg: &LossConfig) -> Result<Self> {
        cfg.validate()?;
        let perceptual = match cfg.perceptual_backend {
            PerceptualBackend::Off => None,
            PerceptualBackend::FixedRandomFeatures => Some(FeatureStack::random(cfg.perceptual_seed)),
            PerceptualBackend::PretrainedVgg => {
                Some(FeatureStack::vgg16(cfg.vgg_weights.as_deref().expect("validated: weights path present"))?)
            }
        };
        Ok(Self { cfg: cfg.clone(), perceptual })
    }

    /// `L1 + (1 - SSIM) + |Lap(pred) - Lap(target)| [+ mu_p * perceptual]`.
    /// The perceptual term only applies to RGB inputs.
    pub fn rec_loss<'t>(&self, pred: &Var<'t, T>, target: &Var<'t, T>, rgb: bool) -> RecTerms<'t, T> {
        assert_eq!(pred.shape(), target.shape(), "prediction and target differ in shape");
        let target = target.detach();
        let l1 = pred.sub(&target).abs().mean_all();
        let ssim = Var::scalar(T::one()).sub(&ssim_var(pred, &target, self.cfg.ssim_window, self.cfg.ssim_sigma));
        let edge = laplacian(pred).sub(&laplacian(&target)).abs().mean_all();
        let mut total = l1.add(&ssim).add(&edge);
        let perceptual = match (&self.perceptual, rgb) {
            (Some(net), true) => {
                let p = net.distance(pred, &target);
                total = total.add(&p.mul_scalar(T::c(self.cfg.mu_p)));
                Some(p)
            }
            _ => None,
        };
        RecTerms { l1, ssim, edge, perceptual, total }
    }

    /// `L_rec(RGB) + mu_hvi * L_rec(HVI) [+ consistency]`. `gt_hvi` is treated as constant.
    pub fn total_loss<'t>(
        &self,
        pred_rgb: &Var<'t, T>,
        gt_rgb: &Var<'t, T>,
        pred_hvi: &Var<'t, T>,
        gt_hvi: &Var<'t, T>,
        consistency: Option<&Var<'t, T>>,
    ) -> TotalTerms<'t, T> {
        let rgb = self.rec_loss(pred_rgb, gt_rgb, true);
        let hvi = self.rec_loss(pred_hvi, &gt_hvi.detach(), false);
        let mut total = rgb.total.add(&hvi.total.mul_scalar(T::c(self.cfg.mu_hvi)));
        if let Some(c) = consistency {
            total = total.add(c);
        }
        TotalTerms { rgb, hvi, consistency: consistency.cloned(), total }
    }

    /// `L_total(base) + lambda_lgim * L_total(memory)`.
    pub fn dual_loss<'t>(&self, base: &TotalTerms<'t, T>, memory: &TotalTerms<'t, T>) -> Var<'t, T> {
        base.total.add(&memory.total.mul_scalar(T::c(self.cfg.lambda_lgim)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
    }

    fn objective(backend: PerceptualBackend, mu_p: f64) -> Objective<f64> {
        Objective::new(&LossConfig { perceptual_backend: backend, mu_p, ..LossConfig::default() }).unwrap()
    }

    #[test]
    fn identical_inputs_give_zero() {
        let obj = objective(PerceptualBackend::FixedRandomFeatures, 0.1);
        let t = Var::constant(random(&[2, 3, 16, 16], 1, 0.0, 1.0));
        let r = obj.rec_loss(&t, &t, true);
        assert!(r.total.value().item().abs() < 1e-12);
    }

    #[test]
    fn constant_offset_example() {
        let obj = objective(PerceptualBackend::Off, 0.1);
        let target = random(&[1, 3, 32, 32], 2, 0.0, 0.9);
        let pred = target.map(|v| v + 0.1);
        let r = obj.rec_loss(&Var::constant(pred), &Var::constant(target), true);
        assert!((r.l1.value().item() - 0.1).abs() < 1e-12);
        assert!(r.edge.value().item().abs() < 1e-12);
        assert!(r.ssim.value().item() > 0.0);
    }

    #[test]
    fn perceptual_off_ignores_weight() {
        let target = Var::constant(random(&[1, 3, 16, 16], 3, 0.0, 1.0));
        let pred = Var::constant(random(&[1, 3, 16, 16], 4, 0.0, 1.0));
        let a = objective(PerceptualBackend::Off, 0.1).rec_loss(&pred, &target, true).total.value().item();
        let b = objective(PerceptualBackend::Off, 7.0).rec_loss(&pred, &target, true).total.value().item();
        assert_eq!(a, b);
        let c = objective(PerceptualBackend::FixedRandomFeatures, 7.0).rec_loss(&pred, &target, true).total.value().item();
        let d = objective(PerceptualBackend::FixedRandomFeatures, 7.0).rec_loss(&pred, &target, true).total.value().item();
        assert_eq!(c, d);
        assert!(c > a);
    }

    #[test]
    fn ssim_term_sees_blur_with_matched_mean() {
        let obj = objective(PerceptualBackend::Off, 0.0);
        let target = Var::constant(random(&[1, 3, 24, 24], 5, 0.0, 1.0));
        let blurred = crate::icde::gaussian_blur(&target, crate::icde::BlurParams { kernel: 5, sigma: 1.0 });
        let r = obj.rec_loss(&blurred, &target, true);
        assert!(r.ssim.value().item() > 0.05);
        assert!(ssim_var(&target, &target, 11, 1.5).value().item() > 1.0 - 1e-12);
    }

    #[test]
    fn laplacian_ignores_global_offsets() {
        let x = Var::constant(random(&[1, 3, 9, 11], 6, 0.0, 1.0));
        let y = Var::constant(random(&[1, 3, 9, 11], 7, 0.0, 1.0));
        let a = laplacian(&x).sub(&laplacian(&y)).abs().mean_all().value().item();
        let b = laplacian(&x.add_scalar(0.3)).sub(&laplacian(&y.add_scalar(0.3))).abs().mean_all().value().item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn total_and_dual_compose_linearly() {
        let obj = objective(PerceptualBackend::Off, 0.1);
        let gt = Var::constant(random(&[1, 3, 12, 12], 8, 0.0, 1.0));
        let pred = Var::constant(random(&[1, 3, 12, 12], 9, 0.0, 1.0));
        let ph = Var::constant(random(&[1, 3, 12, 12], 10, -0.5, 0.5));
        let gh = Var::constant(random(&[1, 3, 12, 12], 11, -0.5, 0.5));
        let t = obj.total_loss(&pred, &gt, &ph, &gh, None);
        let expect = t.rgb.total.value().item() + 0.5 * t.hvi.total.value().item();
        assert!((t.total.value().item() - expect).abs() < 1e-12);
        let zero = obj.total_loss(&gt, &gt, &gh, &gh, None);
        assert!(zero.total.value().item().abs() < 1e-12);
        // scaling the HVI error up raises the total
        let far = gh.add(&ph.sub(&gh).mul_scalar(2.0));
        let t2 = obj.total_loss(&pred, &gt, &far, &gh, None);
        assert!(t2.total.value().item() > t.total.value().item());
        let mut cfg = obj.cfg.clone();
        for lambda in [0.0, 1.0, 2.5] {
            cfg.lambda_lgim = lambda;
            let o = Objective::<f64>::new(&cfg).unwrap();
            let d = o.dual_loss(&t, &t2).value().item();
            assert!((d - (t.total.value().item() + lambda * t2.total.value().item())).abs() < 1e-12);
        }
        cfg.lambda_lgim = 1.0;
        let o = Objective::<f64>::new(&cfg).unwrap();
        assert!((o.dual_loss(&t, &t).value().item() - 2.0 * t.total.value().item()).abs() < 1e-12);
    }

    #[test]
    fn hvi_target_is_detached() {
        let obj = objective(PerceptualBackend::FixedRandomFeatures, 0.1);
        let tape = Tape::new();
        let pred = tape.leaf(random(&[1, 3, 12, 12], 12, 0.0, 1.0));
        let gh = tape.leaf(random(&[1, 3, 12, 12], 13, 0.0, 1.0));
        let gt = Var::constant(random(&[1, 3, 12, 12], 14, 0.0, 1.0));
        let t = obj.total_loss(&pred, &gt, &pred, &gh, None);
        let g = tape.backward(&t.total);
        assert!(g.get(&pred).unwrap().max_abs() > 0.0);
        assert!(g.get(&gh).is_none_or(|t| t.max_abs() == 0.0));
    }
}
