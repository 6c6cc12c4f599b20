//! Parameters, forward context and the handful of layers the network is built from.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Conv2dSpec, Gradients, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in the store, and in the vector returned by `Ctx::param_grads`.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
}

/// Named trainable tensors, addressed by canonical dotted paths.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, usize>,
    seed: u64,
}

/// FNV-1a, used to derive a stable per-parameter init stream.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self { params: Vec::new(), by_name: BTreeMap::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let id = self.params.len();
        self.params.push(Param { name: name.to_string(), value: Arc::new(value) });
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    /// Deterministic RNG for a parameter: depends only on the store seed and the name.
    pub fn init_rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()))
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let mut rng = self.init_rng(name);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::c(rng.random_range(-bound..=bound))).collect();
        self.insert(name, Tensor::from_vec(shape, data))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let mut rng = self.init_rng(name);
        let dist = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::c(dist.sample(&mut rng))).collect();
        self.insert(name, Tensor::from_vec(shape, data))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.insert(name, Tensor::full(shape, T::c(value)))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.params[id.0].value.clone()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of trainable scalars.
    pub fn count_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: Arc::new(p.value.cast()) })
                .collect(),
            by_name: self.by_name.clone(),
            seed: self.seed,
        }
    }
}

/// Registers parameters under a dotted prefix.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    prefix: String,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>) -> Self {
        Self { store, prefix: String::new() }
    }

    pub fn pp(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        Builder { store: self.store, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n = self.full_name(name);
        self.store.uniform(&n, shape, bound)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n = self.full_name(name);
        self.store.normal(&n, shape, std)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let n = self.full_name(name);
        self.store.constant(&n, shape, value)
    }
}

/// Call counters keyed by component name; lets tests and `inspect` observe
/// which parts of the graph actually ran.
#[derive(Debug, Default)]
pub struct Instruments {
    counts: RefCell<BTreeMap<&'static str, usize>>,
}

impl Instruments {
    pub fn hit(&self, name: &'static str) {
        *self.counts.borrow_mut().entry(name).or_insert(0) += 1;
    }

    pub fn count(&self, name: &str) -> usize {
        self.counts.borrow().get(name).copied().unwrap_or(0)
    }

    pub fn snapshot(&self) -> BTreeMap<String, usize> {
        self.counts.borrow().iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    pub fn reset(&self) {
        self.counts.borrow_mut().clear();
    }
}

/// Everything a forward pass needs besides its inputs.
pub struct Ctx<'t, 'p, T: Real> {
    tape: Option<&'t Tape<T>>,
    params: &'p ParamStore<T>,
    leaves: RefCell<Vec<Option<Var<'t, T>>>>,
    pub instruments: &'p Instruments,
    pub training: bool,
}

impl<'t, 'p, T: Real> Ctx<'t, 'p, T> {
    /// Inference context: parameters enter as constants, nothing is recorded.
    pub fn inference(params: &'p ParamStore<T>, instruments: &'p Instruments) -> Self {
        Self { tape: None, params, leaves: RefCell::new(vec![None; params.len()]), instruments, training: false }
    }

    /// Recording context: parameters become tape leaves.
    pub fn recording(tape: &'t Tape<T>, params: &'p ParamStore<T>, instruments: &'p Instruments, training: bool) -> Self {
        Self { tape: Some(tape), params, leaves: RefCell::new(vec![None; params.len()]), instruments, training }
    }

    pub fn tape(&self) -> Option<&'t Tape<T>> {
        self.tape
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        let mut leaves = self.leaves.borrow_mut();
        if let Some(v) = &leaves[id.0] {
            return v.clone();
        }
        let value = self.params.get_arc(id);
        let v = match self.tape {
            Some(tape) => tape.leaf_arc(value),
            None => Var::constant_arc(value),
        };
        leaves[id.0] = Some(v.clone());
        v
    }

    /// Parameter gradients in store order (`None` where a parameter was unused).
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.leaves.borrow().iter().map(|leaf| leaf.as_ref().and_then(|v| grads.take(v))).collect()
    }

    /// Which parameters took part in this pass.
    pub fn used(&self) -> Vec<bool> {
        self.leaves.borrow().iter().map(|l| l.is_some()).collect()
    }
}

/// PyTorch-style default bound `1/sqrt(fan_in)`.
fn default_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cin: usize, cout: usize, kernel: usize, spec: Conv2dSpec, bias: bool) -> Self {
        let cig = if spec.groups == 1 { cin } else { 1 };
        let bound = default_bound(cig * kernel * kernel);
        let weight = b.uniform("weight", &[cout, cig, kernel, kernel], bound);
        let bias = bias.then(|| b.uniform("bias", &[cout], bound));
        Self { weight, bias, spec }
    }

    pub fn pointwise<T: Real>(b: &mut Builder<'_, T>, cin: usize, cout: usize, bias: bool) -> Self {
        Self::new(b, cin, cout, 1, Conv2dSpec::valid(), bias)
    }

    pub fn conv3<T: Real>(b: &mut Builder<'_, T>, cin: usize, cout: usize) -> Self {
        Self::new(b, cin, cout, 3, Conv2dSpec::same(3), true)
    }

    pub fn depthwise3<T: Real>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        Self::new(b, channels, channels, 3, Conv2dSpec::same(3).depthwise(channels), true)
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Var<'t, T> {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        x.conv2d(&w, b.as_ref(), self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, din: usize, dout: usize, bias: bool) -> Self {
        let bound = default_bound(din);
        let weight = b.uniform("weight", &[dout, din], bound);
        let bias = bias.then(|| b.uniform("bias", &[dout], bound));
        Self { weight, bias }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Var<'t, T> {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        x.linear(&w, b.as_ref())
    }
}

/// LayerNorm across channels of an NCHW feature map.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ChannelNorm {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        Self { weight: b.constant("weight", &[channels], 1.0), bias: b.constant("bias", &[channels], 0.0) }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Var<'t, T> {
        x.layer_norm_channels(&ctx.p(self.weight), &ctx.p(self.bias), T::c(1e-5))
    }
}

/// Transposed (channel-wise) multi-head attention between query features and
/// key/value features. Returns the attended features and the attention
/// matrix `[N*heads, C/heads, C/heads]`.
pub fn channel_attention<'t, T: Real>(
    q: &Var<'t, T>,
    k: &Var<'t, T>,
    v: &Var<'t, T>,
    temperature: &Var<'t, T>,
    heads: usize,
) -> (Var<'t, T>, Var<'t, T>) {
    let (n, c, h, w) = q.dims4();
    assert_eq!(k.shape(), q.shape(), "key shape");
    assert_eq!(v.shape(), q.shape(), "value shape");
    assert_eq!(c % heads, 0, "channels {c} not divisible by {heads} heads");
    let ch = c / heads;
    let eps = T::c(1e-12);
    let qn = q.reshape(&[n * heads, ch, h * w]).l2_normalize_last(eps);
    let kn = k.reshape(&[n * heads, ch, h * w]).l2_normalize_last(eps);
    let scores = qn
        .matmul_ex(&kn, false, true)
        .reshape(&[n, heads, ch, ch])
        .div(&temperature.reshape(&[1, heads, 1, 1]))
        .reshape(&[n * heads, ch, ch]);
    let attn = scores.softmax_last();
    let out = attn.matmul(&v.reshape(&[n * heads, ch, h * w])).reshape(&[n, c, h, w]);
    (out, attn)
}

/// Gated depthwise feed-forward: 1x1 expand, 3x3 depthwise, GELU gate, 1x1 project.
#[derive(Clone, Debug)]
pub struct GatedFfn {
    pub proj_in: Conv2d,
    pub dw: Conv2d,
    pub proj_out: Conv2d,
}

impl GatedFfn {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, channels: usize, expansion: usize) -> Self {
        let hidden = channels * expansion;
        Self {
            proj_in: Conv2d::pointwise(&mut b.pp("proj_in"), channels, hidden * 2, true),
            dw: Conv2d::depthwise3(&mut b.pp("dw"), hidden * 2),
            proj_out: Conv2d::pointwise(&mut b.pp("proj_out"), hidden, channels, true),
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Var<'t, T> {
        let h = self.dw.forward(ctx, &self.proj_in.forward(ctx, x));
        let parts = h.chunk(2, 1);
        let gated = parts[0].gelu().mul(&parts[1]);
        self.proj_out.forward(ctx, &gated)
    }
}

/// Global average pooling `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool<'t, T: Real>(x: &Var<'t, T>) -> Var<'t, T> {
    let (n, c, h, w) = x.dims4();
    x.reshape(&[n, c, h * w]).mean_axis(2).reshape(&[n, c])
}

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_name_not_order() {
        let mut a = ParamStore::<f32>::new(3);
        let x1 = a.uniform("x", &[4], 1.0);
        let mut b = ParamStore::<f32>::new(3);
        b.uniform("other", &[10], 1.0);
        let x2 = b.uniform("x", &[4], 1.0);
        assert_eq!(a.get(x1), b.get(x2));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let n = 2 * 8 * 3 * 3;
        let t = |s: f64| Var::<f64>::constant(Tensor::from_vec(&[2, 8, 3, 3], (0..n).map(|i| (i as f64 * s).sin()).collect()));
        let temp = Var::constant(Tensor::full(&[4], 0.7));
        let (out, attn) = channel_attention(&t(0.3), &t(0.7), &t(1.1), &temp, 4);
        assert_eq!(out.shape(), &[2, 8, 3, 3]);
        for row in attn.value().data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
