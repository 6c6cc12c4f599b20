//! Raw compute kernels (no graph bookkeeping).

use super::{gemm, MatRef, Real, Tensor};

/// Stride / zero-padding / grouping of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    /// 1 (dense) or equal to the channel count (depthwise).
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn same(kernel: usize) -> Self {
        Self { stride: 1, pad_h: kernel / 2, pad_w: kernel / 2, groups: 1 }
    }

    pub fn valid() -> Self {
        Self { stride: 1, pad_h: 0, pad_w: 0, groups: 1 }
    }

    pub fn depthwise(self, channels: usize) -> Self {
        Self { groups: channels, ..self }
    }

    pub fn strided(self, stride: usize) -> Self {
        Self { stride, ..self }
    }

    fn out_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        assert!(h + 2 * self.pad_h >= kh && w + 2 * self.pad_w >= kw, "kernel larger than padded input");
        ((h + 2 * self.pad_h - kh) / self.stride + 1, (w + 2 * self.pad_w - kw) / self.stride + 1)
    }
}

/// Mirror index into `0..n` without repeating the edge sample, periodic for
/// arbitrarily distant `i`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Output range `[lo, hi)` of `o` such that `o * stride + offset` lies in `0..len`.
#[inline]
fn valid_range(out_len: usize, stride: usize, offset: isize, len: usize) -> (usize, usize) {
    let s = stride as isize;
    // smallest o with o*s + offset >= 0
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    // largest o with o*s + offset <= len - 1
    let hi_inclusive = (len as isize - 1 - offset).div_euclid(s);
    let hi = (hi_inclusive + 1).clamp(0, out_len as isize);
    let lo = lo.clamp(0, hi);
    (lo as usize, hi as usize)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &Conv2dSpec,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let s = spec.stride;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                let off_y = ki as isize - spec.pad_h as isize;
                let off_x = kj as isize - spec.pad_w as isize;
                let (ylo, yhi) = valid_range(ho, s, off_y, h);
                let (xlo, xhi) = valid_range(wo, s, off_x, w);
                for oy in 0..ho {
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if oy < ylo || oy >= yhi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let iy = (oy * s) as isize + off_y;
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    drow[..xlo].fill(T::zero());
                    drow[xhi..].fill(T::zero());
                    if s == 1 {
                        let start = (xlo as isize + off_x) as usize;
                        drow[xlo..xhi].copy_from_slice(&src[start..start + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            drow[ox] = src[((ox * s) as isize + off_x) as usize];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &Conv2dSpec,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let s = spec.stride;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let off_y = ki as isize - spec.pad_h as isize;
                let off_x = kj as isize - spec.pad_w as isize;
                let (ylo, yhi) = valid_range(ho, s, off_y, h);
                let (xlo, xhi) = valid_range(wo, s, off_x, w);
                for oy in ylo..yhi {
                    let iy = ((oy * s) as isize + off_y) as usize;
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    if s == 1 {
                        let start = (xlo as isize + off_x) as usize;
                        for (d, &v) in dst[start..start + (xhi - xlo)].iter_mut().zip(&srow[xlo..xhi]) {
                            *d += v;
                        }
                        continue;
                    }
                    for ox in xlo..xhi {
                        dst[((ox * s) as isize + off_x) as usize] += srow[ox];
                    }
                }
            }
        }
    }
}

fn is_pointwise(kh: usize, kw: usize, spec: &Conv2dSpec) -> bool {
    kh == 1 && kw == 1 && spec.stride == 1 && spec.pad_h == 0 && spec.pad_w == 0
}

/// Convolution forward pass. `x: [N,Ci,H,W]`, `w: [Co,Ci/groups,kh,kw]`.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, spec: &Conv2dSpec) -> Tensor<T> {
    let (n, ci, h, wd) = x.dims4();
    let (co, cig, kh, kw) = w.dims4();
    let (ho, wo) = spec.out_hw(h, wd, kh, kw);
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    if spec.groups == 1 {
        assert_eq!(cig, ci, "conv2d channel mismatch: input {ci}, kernel expects {cig}");
        let k = ci * kh * kw;
        let pointwise = is_pointwise(kh, kw, spec);
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * ho * wo] };
        for b in 0..n {
            let xb = &x.data()[b * ci * h * wd..(b + 1) * ci * h * wd];
            let ob = &mut out.data_mut()[b * co * ho * wo..(b + 1) * co * ho * wo];
            let colref = if pointwise {
                xb
            } else {
                im2col(xb, ci, h, wd, kh, kw, spec, ho, wo, &mut cols);
                &cols[..]
            };
            gemm(MatRef::new(w.data(), co, k), MatRef::new(colref, k, ho * wo), ob, T::zero());
        }
    } else {
        assert!(spec.groups == ci && co == ci && cig == 1, "only dense or depthwise convolutions are supported");
        depthwise_forward(x.data(), w.data(), n, ci, h, wd, kh, kw, spec, ho, wo, out.data_mut());
    }
    if let Some(bias) = bias {
        assert_eq!(bias.numel(), co);
        let hw = ho * wo;
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let bv = bias.data()[i % co];
            for v in chunk {
                *v += bv;
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input (if requested), kernel and bias.
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    spec: &Conv2dSpec,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, ci, h, wd) = x.dims4();
    let (co, cig, kh, kw) = w.dims4();
    let (_, _, ho, wo) = grad.dims4();
    let mut gw = Tensor::zeros(w.shape());
    let mut gx = if need_input { Some(Tensor::zeros(x.shape())) } else { None };
    let mut gb = Tensor::zeros(&[co]);
    for (i, chunk) in grad.data().chunks(ho * wo).enumerate() {
        gb.data_mut()[i % co] += chunk.iter().copied().sum();
    }
    if spec.groups == 1 {
        let k = cig * kh * kw;
        let pointwise = is_pointwise(kh, kw, spec);
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * ho * wo] };
        let mut gcols = if pointwise || !need_input { Vec::new() } else { vec![T::zero(); k * ho * wo] };
        for b in 0..n {
            let xb = &x.data()[b * ci * h * wd..(b + 1) * ci * h * wd];
            let gb_ = &grad.data()[b * co * ho * wo..(b + 1) * co * ho * wo];
            let colref = if pointwise {
                xb
            } else {
                im2col(xb, ci, h, wd, kh, kw, spec, ho, wo, &mut cols);
                &cols[..]
            };
            gemm(
                MatRef::new(gb_, co, ho * wo),
                MatRef::new(colref, k, ho * wo).t(),
                gw.data_mut(),
                T::one(),
            );
            if let Some(gx) = gx.as_mut() {
                let gxb = &mut gx.data_mut()[b * ci * h * wd..(b + 1) * ci * h * wd];
                if pointwise {
                    gemm(MatRef::new(w.data(), co, k).t(), MatRef::new(gb_, co, ho * wo), gxb, T::zero());
                } else {
                    gemm(MatRef::new(w.data(), co, k).t(), MatRef::new(gb_, co, ho * wo), &mut gcols, T::zero());
                    col2im_add(&gcols, ci, h, wd, kh, kw, spec, ho, wo, gxb);
                }
            }
        }
    } else {
        depthwise_backward(
            x.data(),
            w.data(),
            grad.data(),
            n,
            ci,
            h,
            wd,
            kh,
            kw,
            spec,
            ho,
            wo,
            gx.as_mut().map(|g| g.data_mut()),
            gw.data_mut(),
        );
    }
    (gx, gw, gb)
}

#[allow(clippy::too_many_arguments)]
fn depthwise_forward<T: Real>(
    x: &[T],
    w: &[T],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    spec: &Conv2dSpec,
    ho: usize,
    wo: usize,
    out: &mut [T],
) {
    let s = spec.stride;
    for b in 0..n {
        for ch in 0..c {
            let plane = &x[(b * c + ch) * h * wd..(b * c + ch + 1) * h * wd];
            let oplane = &mut out[(b * c + ch) * ho * wo..(b * c + ch + 1) * ho * wo];
            let kern = &w[ch * kh * kw..(ch + 1) * kh * kw];
            for ki in 0..kh {
                let off_y = ki as isize - spec.pad_h as isize;
                let (ylo, yhi) = valid_range(ho, s, off_y, h);
                for kj in 0..kw {
                    let wv = kern[ki * kw + kj];
                    let off_x = kj as isize - spec.pad_w as isize;
                    let (xlo, xhi) = valid_range(wo, s, off_x, wd);
                    for oy in ylo..yhi {
                        let iy = ((oy * s) as isize + off_y) as usize;
                        let src = &plane[iy * wd..(iy + 1) * wd];
                        let dst = &mut oplane[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            let start = (xlo as isize + off_x) as usize;
                            for (d, &v) in dst[xlo..xhi].iter_mut().zip(&src[start..]) {
                                *d += wv * v;
                            }
                        } else {
                            for ox in xlo..xhi {
                                dst[ox] += wv * src[((ox * s) as isize + off_x) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<T: Real>(
    x: &[T],
    w: &[T],
    grad: &[T],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    spec: &Conv2dSpec,
    ho: usize,
    wo: usize,
    mut gx: Option<&mut [T]>,
    gw: &mut [T],
) {
    let s = spec.stride;
    for b in 0..n {
        for ch in 0..c {
            let base_in = (b * c + ch) * h * wd;
            let plane = &x[base_in..base_in + h * wd];
            let gplane = &grad[(b * c + ch) * ho * wo..(b * c + ch + 1) * ho * wo];
            for ki in 0..kh {
                let off_y = ki as isize - spec.pad_h as isize;
                let (ylo, yhi) = valid_range(ho, s, off_y, h);
                for kj in 0..kw {
                    let widx = ch * kh * kw + ki * kw + kj;
                    let wv = w[widx];
                    let off_x = kj as isize - spec.pad_w as isize;
                    let (xlo, xhi) = valid_range(wo, s, off_x, wd);
                    let mut acc = T::zero();
                    for oy in ylo..yhi {
                        let iy = ((oy * s) as isize + off_y) as usize;
                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                        let src = &plane[iy * wd..(iy + 1) * wd];
                        if s == 1 {
                            let start = (xlo as isize + off_x) as usize;
                            let g = &grow[xlo..xhi];
                            acc += dot(g, &src[start..start + g.len()]);
                            if let Some(gx) = gx.as_deref_mut() {
                                let dst = &mut gx[base_in + iy * wd + start..base_in + iy * wd + start + g.len()];
                                for (d, &v) in dst.iter_mut().zip(g) {
                                    *d += wv * v;
                                }
                            }
                            continue;
                        }
                        for ox in xlo..xhi {
                            let ix = ((ox * s) as isize + off_x) as usize;
                            acc += grow[ox] * src[ix];
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            let dst = &mut gx[base_in + iy * wd..base_in + (iy + 1) * wd];
                            for ox in xlo..xhi {
                                let ix = ((ox * s) as isize + off_x) as usize;
                                dst[ix] += wv * grow[ox];
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
}

/// Dot product with split accumulators so the reduction vectorises.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut total = acc.iter().copied().fold(T::zero(), |s, v| s + v);
    for (x, y) in ra.iter().zip(rb) {
        total += *x * *y;
    }
    total
}

/// Per-axis taps for bilinear resampling with half-pixel centres
/// (`align_corners = false`).
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn bilinear_forward<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let od = out.data_mut();
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut od[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::c(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::c(lx);
                let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                dst[oy * ow + ox] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Real>(grad: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c, oh, ow) = grad.dims4();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut gx = Tensor::zeros(&[n, c, h, w]);
    let gd = gx.data_mut();
    for p in 0..n * c {
        let g = &grad.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gd[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::c(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::c(lx);
                let v = g[oy * ow + ox];
                dst[y0 * w + x0] += v * (T::one() - ly) * (T::one() - lx);
                dst[y0 * w + x1] += v * (T::one() - ly) * lx;
                dst[y1 * w + x0] += v * ly * (T::one() - lx);
                dst[y1 * w + x1] += v * ly * lx;
            }
        }
    }
    gx
}
