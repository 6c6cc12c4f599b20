use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, Conv2dSpec};
use super::{broadcast_zip, gemm, numel, sum_to_shape, MatRef, Real, Tensor};

type Backward<T> = Box<dyn FnOnce(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

const NO_PARENT: usize = usize::MAX;

struct Node<T> {
    parents: Vec<usize>,
    backward: Option<Backward<T>>,
}

/// Records operations on [`Var`]s so gradients can be pulled back from a
/// scalar. One tape per forward pass; `backward` consumes its contents.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf_arc(Arc::new(value))
    }

    pub fn leaf_arc(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        let id = self.push(Vec::new(), None);
        Var { value, node: Some((self, id)) }
    }

    fn push(&self, parents: Vec<usize>, backward: Option<Backward<T>>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents, backward });
        nodes.len() - 1
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every leaf
    /// the loss depends on; the tape is left empty.
    pub fn backward(&self, loss: &Var<'_, T>) -> Gradients<T> {
        let (tape, root) = loss.node.expect("backward() on a constant");
        assert!(std::ptr::eq(tape, self), "loss was recorded on a different tape");
        assert_eq!(loss.value.numel(), 1, "backward() needs a scalar loss");
        let mut nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(root + 1, || None);
        grads[root] = Some(Tensor::full(loss.value.shape(), T::one()));
        let mut leaves = HashMap::new();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &mut nodes[id];
            match node.backward.take() {
                None => {
                    leaves.insert(id, g);
                }
                Some(bw) => {
                    let parent_grads = bw(&g);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if p == NO_PARENT {
                            continue;
                        }
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Gradients { leaves }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        var.node.and_then(|(_, id)| self.leaves.get(&id))
    }

    pub fn take(&mut self, var: &Var<'_, T>) -> Option<Tensor<T>> {
        var.node.and_then(|(_, id)| self.leaves.remove(&id))
    }
}

/// A tensor value, optionally tracked on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t, T: Real> {
    value: Arc<Tensor<T>>,
    node: Option<(&'t Tape<T>, usize)>,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn constant(value: Tensor<T>) -> Self {
        Self { value: Arc::new(value), node: None }
    }

    pub fn constant_arc(value: Arc<Tensor<T>>) -> Self {
        Self { value, node: None }
    }

    pub fn scalar(v: T) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_arc(&self) -> Arc<Tensor<T>> {
        self.value.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        self.value.dims4()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn detach(&self) -> Self {
        Self { value: self.value.clone(), node: None }
    }

    /// Records a custom operation. `backward` maps the output gradient to one
    /// optional gradient per input (same order as `inputs`).
    pub fn from_op(
        inputs: &[&Var<'t, T>],
        value: Tensor<T>,
        backward: impl FnOnce(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Self {
        Self::from_op_arc(inputs, Arc::new(value), backward)
    }

    /// [`Var::from_op`] for an output already behind an `Arc` (lets the
    /// backward closure share it without a copy).
    pub fn from_op_arc(
        inputs: &[&Var<'t, T>],
        value: Arc<Tensor<T>>,
        backward: impl FnOnce(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Self {
        let tape = inputs.iter().find_map(|v| v.node.map(|(t, _)| t));
        match tape {
            None => Self::constant_arc(value),
            Some(tape) => {
                let parents = inputs
                    .iter()
                    .map(|v| match v.node {
                        Some((t, id)) => {
                            debug_assert!(std::ptr::eq(t, tape), "mixing tapes");
                            id
                        }
                        None => NO_PARENT,
                    })
                    .collect();
                let id = tape.push(parents, Some(Box::new(backward)));
                Self { value, node: Some((tape, id)) }
            }
        }
    }

    fn unary_op(&self, value: Tensor<T>, backward: impl FnOnce(&Tensor<T>) -> Tensor<T> + 'static) -> Self {
        Self::from_op(&[self], value, move |g| vec![Some(backward(g))])
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&self, other: &Self) -> Self {
        let value = broadcast_zip(&self.value, &other.value, |a, b| a + b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        Self::from_op(&[self, other], value, move |g| {
            vec![ra.then(|| sum_to_shape(g, &sa)), rb.then(|| sum_to_shape(g, &sb))]
        })
    }

    pub fn sub(&self, other: &Self) -> Self {
        let value = broadcast_zip(&self.value, &other.value, |a, b| a - b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        Self::from_op(&[self, other], value, move |g| {
            vec![ra.then(|| sum_to_shape(g, &sa)), rb.then(|| sum_to_shape(&g.map(|x| -x), &sb))]
        })
    }

    pub fn mul(&self, other: &Self) -> Self {
        let value = broadcast_zip(&self.value, &other.value, |a, b| a * b);
        let (a, b) = (self.value.clone(), other.value.clone());
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        Self::from_op(&[self, other], value, move |g| {
            vec![
                ra.then(|| sum_to_shape(&broadcast_zip(g, &b, |g, b| g * b), a.shape())),
                rb.then(|| sum_to_shape(&broadcast_zip(g, &a, |g, a| g * a), b.shape())),
            ]
        })
    }

    pub fn div(&self, other: &Self) -> Self {
        let value = broadcast_zip(&self.value, &other.value, |a, b| a / b);
        let (a, b) = (self.value.clone(), other.value.clone());
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        Self::from_op(&[self, other], value, move |g| {
            let ga = ra.then(|| sum_to_shape(&broadcast_zip(g, &b, |g, b| g / b), a.shape()));
            let gb = rb.then(|| {
                // d(a/b)/db = -a / b^2
                let t = broadcast_zip(g, &a, |g, a| g * a);
                sum_to_shape(&broadcast_zip(&t, &b, |t, b| -t / (b * b)), b.shape())
            });
            vec![ga, gb]
        })
    }

    pub fn neg(&self) -> Self {
        self.unary_op(self.value.map(|x| -x), |g| g.map(|x| -x))
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.unary_op(self.value.map(|x| x + s), |g| g.clone())
    }

    pub fn mul_scalar(&self, s: T) -> Self {
        self.unary_op(self.value.map(|x| x * s), move |g| g.map(|x| x * s))
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn map_with_grad(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Self {
        let out = self.value.map(f);
        if !self.requires_grad() {
            return Self::constant(out);
        }
        let x = self.value.clone();
        let y = Arc::new(out);
        let y2 = y.clone();
        Self::from_op_arc(&[self], y, move |g| {
            let mut out = g.clone();
            for ((o, &xv), &yv) in out.data_mut().iter_mut().zip(x.data()).zip(y2.data()) {
                *o *= df(xv, yv);
            }
            vec![Some(out)]
        })
    }

    pub fn exp(&self) -> Self {
        self.map_with_grad(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Self {
        self.map_with_grad(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(&self) -> Self {
        self.map_with_grad(|x| x.sqrt(), |_, y| T::c(0.5) / y)
    }

    pub fn sqr(&self) -> Self {
        self.map_with_grad(|x| x * x, |x, _| T::c(2.0) * x)
    }

    pub fn abs(&self) -> Self {
        self.map_with_grad(|x| x.abs(), |x, _| if x > T::zero() { T::one() } else if x < T::zero() { -T::one() } else { T::zero() })
    }

    pub fn sin(&self) -> Self {
        self.map_with_grad(|x| x.sin(), |x, _| x.cos())
    }

    pub fn cos(&self) -> Self {
        self.map_with_grad(|x| x.cos(), |x, _| -x.sin())
    }

    pub fn powf(&self, p: T) -> Self {
        self.map_with_grad(move |x| x.powf(p), move |x, _| p * x.powf(p - T::one()))
    }

    pub fn sigmoid(&self) -> Self {
        self.map_with_grad(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn softplus(&self) -> Self {
        self.map_with_grad(softplus, |x, _| sigmoid(x))
    }

    pub fn relu(&self) -> Self {
        self.map_with_grad(|x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Self {
        self.map_with_grad(gelu, |x, _| {
            let cdf = T::c(0.5) * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf());
            let pdf = (-(x * x) * T::c(0.5)).exp() * T::c(0.398_942_280_401_432_7);
            cdf + x * pdf
        })
    }

    /// Clamp with pass-through gradient on the closed interval `[lo, hi]`.
    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map_with_grad(move |x| x.max(lo).min(hi), move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() })
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_all(&self) -> Self {
        let shape = self.shape().to_vec();
        self.unary_op(Tensor::scalar(self.value.sum()), move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean_all(&self) -> Self {
        let n = T::c(self.value.numel() as f64);
        let shape = self.shape().to_vec();
        self.unary_op(Tensor::scalar(self.value.sum() / n), move |g| Tensor::full(&shape, g.item() / n))
    }

    /// Sum over `axis`, keeping it as size 1.
    pub fn sum_axis(&self, axis: usize) -> Self {
        let shape = self.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let mut out = Tensor::zeros(&out_shape);
        {
            let src = self.value.data();
            let dst = out.data_mut();
            for o in 0..outer {
                for d in 0..dim {
                    let s = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                    for (acc, &v) in dst[o * inner..(o + 1) * inner].iter_mut().zip(s) {
                        *acc += v;
                    }
                }
            }
        }
        self.unary_op(out, move |g| {
            let mut gx = Tensor::zeros(&shape);
            let gd = gx.data_mut();
            for o in 0..outer {
                let gs = &g.data()[o * inner..(o + 1) * inner];
                for d in 0..dim {
                    gd[(o * dim + d) * inner..(o * dim + d + 1) * inner].copy_from_slice(gs);
                }
            }
            gx
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Self {
        let n = T::c(self.shape()[axis] as f64);
        self.sum_axis(axis).mul_scalar(T::one() / n)
    }

    // ---- shape -------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.value.numel(), "reshape {:?} -> {shape:?}", self.shape());
        let old = self.shape().to_vec();
        let value = Tensor::from_vec(shape, self.value.data().to_vec());
        self.unary_op(value, move |g| g.clone().reshape(&old))
    }

    /// `out[i] = x[index[i]]`; the gradient scatters back (adds on repeats).
    pub fn gather(&self, out_shape: &[usize], index: Arc<Vec<u32>>) -> Self {
        assert_eq!(numel(out_shape), index.len());
        let src = self.value.data();
        let data = index.iter().map(|&i| src[i as usize]).collect();
        let value = Tensor::from_vec(out_shape, data);
        let in_shape = self.shape().to_vec();
        self.unary_op(value, move |g| {
            let mut gx = Tensor::zeros(&in_shape);
            let gd = gx.data_mut();
            for (&i, &v) in index.iter().zip(g.data()) {
                gd[i as usize] += v;
            }
            gx
        })
    }

    pub fn permute(&self, perm: &[usize]) -> Self {
        let shape = self.shape();
        let rank = shape.len();
        assert_eq!(perm.len(), rank);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut in_strides = vec![1usize; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let n = numel(&out_shape);
        let mut index = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            let off: usize = (0..rank).map(|d| idx[d] * in_strides[perm[d]]).sum();
            index.push(off as u32);
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        self.gather(&out_shape, Arc::new(index))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Self {
        let value = self.value.narrow(axis, start, len);
        let shape = self.shape().to_vec();
        self.unary_op(value, move |g| {
            let outer: usize = shape[..axis].iter().product();
            let dim = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut gx = Tensor::zeros(&shape);
            let gd = gx.data_mut();
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                gd[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            gx
        })
    }

    /// Splits `axis` into equal `parts`.
    pub fn chunk(&self, parts: usize, axis: usize) -> Vec<Self> {
        let dim = self.shape()[axis];
        assert_eq!(dim % parts, 0, "chunk: {dim} not divisible by {parts}");
        let step = dim / parts;
        (0..parts).map(|i| self.narrow(axis, i * step, step)).collect()
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Self {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value.as_ref()).collect();
        let value = Tensor::concat(&values, axis);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Self::from_op(parts, value, move |g| {
            let mut start = 0;
            sizes
                .iter()
                .zip(&needs)
                .map(|(&len, &need)| {
                    let out = need.then(|| g.narrow(axis, start, len));
                    start += len;
                    out
                })
                .collect()
        })
    }

    /// Reflection padding of the two trailing (spatial) axes of `[N,C,H,W]`.
    pub fn pad_reflect(&self, top: usize, bottom: usize, left: usize, right: usize) -> Self {
        if top + bottom + left + right == 0 {
            return self.clone();
        }
        let (n, c, h, w) = self.dims4();
        let (oh, ow) = (h + top + bottom, w + left + right);
        let mut index = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for y in 0..oh {
                let sy = kernels::reflect_index(y as isize - top as isize, h);
                for x in 0..ow {
                    let sx = kernels::reflect_index(x as isize - left as isize, w);
                    index.push((p * h * w + sy * w + sx) as u32);
                }
            }
        }
        self.gather(&[n, c, oh, ow], Arc::new(index))
    }

    /// Spatial crop `[.., top..top+h, left..left+w]` of `[N,C,H,W]`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        let (_, _, ih, iw) = self.dims4();
        if top == 0 && left == 0 && h == ih && w == iw {
            return self.clone();
        }
        self.narrow(2, top, h).narrow(3, left, w)
    }

    /// `[N, C*r*r, H, W] -> [N, C, H*r, W*r]`.
    pub fn pixel_shuffle(&self, r: usize) -> Self {
        let (n, crr, h, w) = self.dims4();
        assert_eq!(crr % (r * r), 0);
        let c = crr / (r * r);
        let (oh, ow) = (h * r, w * r);
        let mut index = Vec::with_capacity(n * crr * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let src_c = ch * r * r + (y % r) * r + (x % r);
                        index.push((((b * crr + src_c) * h + y / r) * w + x / r) as u32);
                    }
                }
            }
        }
        self.gather(&[n, c, oh, ow], Arc::new(index))
    }

    // ---- linear algebra ----------------------------------------------------

    /// Batched `op(a) · op(b)`. `a` is `[B,M,K]` or `[M,K]`; `b` is
    /// `[B,K,N]` or `[K,N]` (shared across the batch). `ta`/`tb` read the
    /// trailing two axes transposed.
    pub fn matmul_ex(&self, other: &Self, ta: bool, tb: bool) -> Self {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let (ba, ar, ac) = split_batch(&sa);
        let (bb, br, bc) = split_batch(&sb);
        assert!(bb == 1 || bb == ba, "matmul batch mismatch {sa:?} x {sb:?}");
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner mismatch {sa:?} x {sb:?} (ta={ta}, tb={tb})");
        let batch = ba;
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = Tensor::zeros(&out_shape);
        let (a, b) = (self.value.clone(), other.value.clone());
        for i in 0..batch {
            let am = mat(&a, i, ar, ac, ta);
            let bm = mat(&b, if bb == 1 { 0 } else { i }, br, bc, tb);
            gemm(am, bm, &mut out.data_mut()[i * m * n..(i + 1) * m * n], T::zero());
        }
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        Self::from_op(&[self, other], out, move |g| {
            let mut ga = ra.then(|| Tensor::zeros(a.shape()));
            let mut gb = rb.then(|| Tensor::zeros(b.shape()));
            for i in 0..batch {
                let gm = MatRef::new(&g.data()[i * m * n..(i + 1) * m * n], m, n);
                let bi = if bb == 1 { 0 } else { i };
                let am = mat(&a, i, ar, ac, ta);
                let bm = mat(&b, bi, br, bc, tb);
                if let Some(ga) = ga.as_mut() {
                    let dst = &mut ga.data_mut()[i * ar * ac..(i + 1) * ar * ac];
                    if ta {
                        gemm(bm, gm.t(), dst, T::zero());
                    } else {
                        gemm(gm, bm.t(), dst, T::zero());
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    let dst = &mut gb.data_mut()[bi * br * bc..(bi + 1) * br * bc];
                    if tb {
                        gemm(gm.t(), am, dst, T::one());
                    } else {
                        gemm(am.t(), gm, dst, T::one());
                    }
                }
            }
            vec![ga, gb]
        })
    }

    pub fn matmul(&self, other: &Self) -> Self {
        self.matmul_ex(other, false, false)
    }

    /// `x · wᵀ + b` for `x: [N, in]`, `w: [out, in]`.
    pub fn linear(&self, weight: &Self, bias: Option<&Self>) -> Self {
        let y = self.matmul_ex(weight, false, true);
        match bias {
            Some(b) => y.add(b),
            None => y,
        }
    }

    pub fn conv2d(&self, weight: &Self, bias: Option<&Self>, spec: Conv2dSpec) -> Self {
        let value = kernels::conv2d_forward(&self.value, &weight.value, bias.map(|b| b.value()), &spec);
        let (x, w) = (self.value.clone(), weight.value.clone());
        let (rx, rw) = (self.requires_grad(), weight.requires_grad());
        let rb = bias.is_some_and(|b| b.requires_grad());
        let bias_shape = bias.map(|b| b.shape().to_vec());
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Self::from_op(&inputs, value, move |g| {
            let (gx, gw, gb) = kernels::conv2d_backward(&x, &w, g, &spec, rx);
            let mut out = vec![gx, rw.then_some(gw)];
            if let Some(bs) = bias_shape {
                out.push(rb.then(|| gb.reshape(&bs)));
            }
            out
        })
    }

    /// Bilinear resize of `[N,C,H,W]` (half-pixel centres, no antialiasing).
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Self {
        let (_, _, h, w) = self.dims4();
        if (h, w) == (oh, ow) {
            return self.clone();
        }
        let value = kernels::bilinear_forward(&self.value, oh, ow);
        self.unary_op(value, move |g| kernels::bilinear_backward(g, h, w))
    }

    /// 2x2 / stride-2 max pooling; gradient routed to the first maximum.
    pub fn max_pool2(&self) -> Self {
        let (n, c, h, w) = self.dims4();
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value.data();
        let mut index = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = p * h * w + 2 * y * w + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = p * h * w + (2 * y + dy) * w + 2 * x + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    index.push(best as u32);
                }
            }
        }
        self.gather(&[n, c, oh, ow], Arc::new(index))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Self {
        let shape = self.shape().to_vec();
        let d = *shape.last().expect("softmax on scalar");
        let mut out = (*self.value).clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        if !self.requires_grad() {
            return Self::constant(out);
        }
        let y = Arc::new(out);
        let y2 = y.clone();
        Self::from_op_arc(&[self], y2, move |g| {
            let mut gx = g.clone();
            for (grow, yrow) in gx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for (gv, &yv) in grow.iter_mut().zip(yrow) {
                    *gv = yv * (*gv - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Divides each row of the last axis by its L2 norm (floored at `eps`).
    pub fn l2_normalize_last(&self, eps: T) -> Self {
        let ss = self.sqr().sum_axis(self.shape().len() - 1);
        let norm = ss.map_with_grad(move |v| v.sqrt().max(eps), move |v, y| if v.sqrt() > eps { T::c(0.5) / y } else { T::zero() });
        self.div(&norm)
    }

    /// LayerNorm across the channel axis of `[N,C,H,W]`, per pixel.
    pub fn layer_norm_channels(&self, weight: &Self, bias: &Self, eps: T) -> Self {
        let (n, c, h, w) = self.dims4();
        let hw = h * w;
        let x = self.value.data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); n * hw];
        let cf = T::c(c as f64);
        for b in 0..n {
            let base = b * c * hw;
            let mut mean = vec![T::zero(); hw];
            let mut var = vec![T::zero(); hw];
            for ch in 0..c {
                for (m, &v) in mean.iter_mut().zip(&x[base + ch * hw..base + (ch + 1) * hw]) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m = *m / cf;
            }
            for ch in 0..c {
                for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(&x[base + ch * hw..base + (ch + 1) * hw]) {
                    *s += (v - m) * (v - m);
                }
            }
            for (p, s) in var.iter().enumerate() {
                rstd[b * hw + p] = T::one() / (*s / cf + eps).sqrt();
            }
            for ch in 0..c {
                for p in 0..hw {
                    let i = base + ch * hw + p;
                    xhat[i] = (x[i] - mean[p]) * rstd[b * hw + p];
                }
            }
        }
        let wv = weight.value.clone();
        let bv = bias.value.clone();
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let (g, bb) = (wv.data()[ch], bv.data()[ch]);
                let off = (b * c + ch) * hw;
                for p in 0..hw {
                    out[off + p] = xhat[off + p] * g + bb;
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out);
        let (rx, rw, rb) = (self.requires_grad(), weight.requires_grad(), bias.requires_grad());
        Self::from_op(&[self, weight, bias], value, move |g| {
            let gd = g.data();
            let mut gw = Tensor::zeros(&[c]);
            let mut gb = Tensor::zeros(&[c]);
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    let mut sw = T::zero();
                    let mut sb = T::zero();
                    for p in 0..hw {
                        sw += gd[off + p] * xhat[off + p];
                        sb += gd[off + p];
                    }
                    gw.data_mut()[ch] += sw;
                    gb.data_mut()[ch] += sb;
                }
            }
            let gx = rx.then(|| {
                let mut gx = vec![T::zero(); gd.len()];
                for b in 0..n {
                    let mut mean_gy = vec![T::zero(); hw];
                    let mut mean_gyx = vec![T::zero(); hw];
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        let gamma = wv.data()[ch];
                        for p in 0..hw {
                            let gy = gd[off + p] * gamma;
                            mean_gy[p] += gy;
                            mean_gyx[p] += gy * xhat[off + p];
                        }
                    }
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        let gamma = wv.data()[ch];
                        for p in 0..hw {
                            let gy = gd[off + p] * gamma;
                            gx[off + p] = rstd[b * hw + p] * (gy - mean_gy[p] / cf - xhat[off + p] * mean_gyx[p] / cf);
                        }
                    }
                }
                Tensor::from_vec(&[n, c, h, w], gx)
            });
            let ws = wv.shape().to_vec();
            let bs = bv.shape().to_vec();
            vec![gx, rw.then(|| gw.reshape(&ws)), rb.then(|| gb.reshape(&bs))]
        })
    }
}

fn split_batch(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (1, shape[0], shape[1]),
        r if r >= 3 => (shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]),
        _ => panic!("matmul needs rank >= 2, got {shape:?}"),
    }
}

fn mat<T: Real>(t: &Tensor<T>, i: usize, rows: usize, cols: usize, transpose: bool) -> MatRef<'_, T> {
    let m = MatRef::new(&t.data()[i * rows * cols..(i + 1) * rows * cols], rows, cols);
    if transpose {
        m.t()
    } else {
        m
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::c(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    T::c(0.5) * x * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}
