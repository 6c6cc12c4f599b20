//! Luminance-gated memory at the branch bottlenecks: learnable global
//! vectors and `r x r` patches, retrieved by attention and fused with a gain
//! that grows as the gate reports a darker scene.

use std::sync::Arc;

use crate::config::LgimConfig;
use crate::nn::{global_avg_pool, Builder, Conv2d, Ctx, Linear, ParamId, ParamStore};
use crate::tensor::{Real, Tensor, Var};

/// `lambda * (1 + sigmoid(eta) * (1 - g))`.
pub fn gain(lambda: f64, eta: f64, g: f64) -> f64 {
    lambda * (1.0 + crate::tensor::autograd::sigmoid(eta) * (1.0 - g))
}

#[derive(Clone, Debug)]
pub struct MemoryBank {
    pub channels: usize,
    pub slots: usize,
    pub patch: usize,
    /// `[L, C]`
    pub global_vectors: ParamId,
    /// `[L, C, r, r]`
    pub patches: ParamId,
    pub lambda: ParamId,
    pub eta: ParamId,
    /// Brightness bias `[C]` (intensity branch only).
    pub bias: Option<ParamId>,
    pub gate_fc1: Linear,
    pub gate_fc2: Linear,
    pub spatial_gate: Option<(Conv2d, Conv2d)>,
    pub proj_vector: Linear,
    pub proj_patch: Conv2d,
}

/// Retrieved memory plus the attention weights that produced it.
#[derive(Clone, Debug)]
pub struct Retrieval<'t, T: Real> {
    pub f_mem: Var<'t, T>,
    /// `[N, L]`
    pub vector_weights: Var<'t, T>,
    /// `[N, P, L]`
    pub patch_weights: Var<'t, T>,
    /// Pooled queries `[N, C]`.
    pub vector_queries: Var<'t, T>,
    /// Unfolded patch queries `[N, P, C*r*r]`.
    pub patch_queries: Var<'t, T>,
}

impl<T: Real> Retrieval<'_, T> {
    /// Constant copy that no longer borrows the tape.
    pub fn detached(&self) -> Retrieval<'static, T> {
        let c = |v: &Var<'_, T>| Var::constant_arc(v.value_arc());
        Retrieval {
            f_mem: c(&self.f_mem),
            vector_weights: c(&self.vector_weights),
            patch_weights: c(&self.patch_weights),
            vector_queries: c(&self.vector_queries),
            patch_queries: c(&self.patch_queries),
        }
    }
}

/// Gather indices mapping `[N, C, H, W]` (H, W multiples of `r`) to `[N, P, C*r*r]`.
fn unfold_index(n: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<u32> {
    let (ph, pw) = (h / r, w / r);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for pi in 0..ph {
            for pj in 0..pw {
                for ch in 0..c {
                    for dy in 0..r {
                        for dx in 0..r {
                            idx.push((((b * c + ch) * h + pi * r + dy) * w + pj * r + dx) as u32);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Inverse permutation of [`unfold_index`].
fn fold_index(unfold: &[u32]) -> Vec<u32> {
    let mut inv = vec![0u32; unfold.len()];
    for (dst, &src) in unfold.iter().enumerate() {
        inv[src as usize] = dst as u32;
    }
    inv
}

impl MemoryBank {
    /// `brightness_bias` is set for the intensity branch.
    pub fn new<T: Real>(b: &mut Builder<'_, T>, channels: usize, cfg: &LgimConfig, lambda_init: f64, brightness_bias: bool) -> Self {
        let (l, c, r) = (cfg.slots, channels, cfg.patch);
        Self {
            channels,
            slots: l,
            patch: r,
            global_vectors: b.normal("global_vectors", &[l, c], cfg.entry_init_std),
            patches: b.normal("patches", &[l, c, r, r], cfg.entry_init_std),
            lambda: b.constant("lambda", &[1], lambda_init),
            eta: b.constant("eta", &[1], cfg.eta_init),
            bias: brightness_bias.then(|| b.constant("bias", &[c], 0.0)),
            gate_fc1: Linear::new(&mut b.pp("gate.fc1"), c, cfg.gate_hidden, true),
            gate_fc2: Linear::new(&mut b.pp("gate.fc2"), cfg.gate_hidden, 1, true),
            spatial_gate: cfg.spatial_gate.then(|| {
                (
                    Conv2d::pointwise(&mut b.pp("gate.spatial1"), c, cfg.gate_hidden, true),
                    Conv2d::pointwise(&mut b.pp("gate.spatial2"), cfg.gate_hidden, 1, true),
                )
            }),
            proj_vector: Linear::new(&mut b.pp("proj_vector"), c, c, false),
            proj_patch: Conv2d::pointwise(&mut b.pp("proj_patch"), c, c, false),
        }
    }

    pub fn retrieve<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, f_in: &Var<'t, T>) -> Retrieval<'t, T> {
        ctx.instruments.hit("lgim.retrieve");
        let (n, c, h, w) = f_in.dims4();
        assert_eq!(c, self.channels, "memory bank expects {} channels, got {c}", self.channels);
        let r = self.patch;
        let (l, d) = (self.slots, c * r * r);

        // vector granularity
        let q = global_avg_pool(f_in);
        let mv = ctx.p(self.global_vectors);
        let vw = q.matmul_ex(&mv, false, true).mul_scalar(T::c(1.0 / (c as f64).sqrt())).softmax_last();
        let vec = self.proj_vector.forward(ctx, &vw.matmul(&mv)).reshape(&[n, c, 1, 1]);

        // patch granularity
        let (hp, wp) = (h.div_ceil(r) * r, w.div_ceil(r) * r);
        let padded = if (hp, wp) == (h, w) { f_in.clone() } else { f_in.pad_reflect(0, hp - h, 0, wp - w) };
        let p = (hp / r) * (wp / r);
        let unfold = unfold_index(n, c, hp, wp, r);
        let fold = Arc::new(fold_index(&unfold));
        let pq = padded.gather(&[n, p, d], Arc::new(unfold));
        let mp = ctx.p(self.patches).reshape(&[l, d]);
        let pw = pq.matmul_ex(&mp, false, true).mul_scalar(T::c(1.0 / (d as f64).sqrt())).softmax_last();
        let folded = pw.matmul(&mp).gather(&[n, c, hp, wp], fold);
        let folded = if (hp, wp) == (h, w) { folded } else { folded.crop(0, 0, h, w) };
        let patch = self.proj_patch.forward(ctx, &folded);

        Retrieval { f_mem: patch.add(&vec), vector_weights: vw, patch_weights: pw, vector_queries: q, patch_queries: pq }
    }

    /// Brightness gate in `(0, 1)`: `[N, 1]`, or `[N, 1, H, W]` with the spatial gate.
    /// The HV branch passes the intensity bottleneck as `reference`.
    pub fn luminance_gate<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, f_in: &Var<'t, T>, reference: Option<&Var<'t, T>>) -> Var<'t, T> {
        let feature = reference.unwrap_or(f_in);
        match &self.spatial_gate {
            Some((a, b)) => b.forward(ctx, &a.forward(ctx, feature).gelu()).sigmoid(),
            None => self.gate_fc2.forward(ctx, &self.gate_fc1.forward(ctx, &global_avg_pool(feature)).gelu()).sigmoid(),
        }
    }

    /// `F_in + lambda (1 + sigmoid(eta)(1 - g)) F_mem [+ b]`.
    pub fn fuse<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, f_in: &Var<'t, T>, f_mem: &Var<'t, T>, g: &Var<'t, T>) -> Var<'t, T> {
        let n = f_in.shape()[0];
        let g = if g.shape().len() == 2 { g.reshape(&[n, 1, 1, 1]) } else { g.clone() };
        let strength = ctx.p(self.eta).sigmoid().reshape(&[1, 1, 1, 1]);
        let lambda = ctx.p(self.lambda).reshape(&[1, 1, 1, 1]);
        let gain = lambda.mul(&Var::scalar(T::one()).add(&strength.mul(&Var::scalar(T::one()).sub(&g))));
        let out = f_in.add(&gain.mul(f_mem));
        match self.bias {
            Some(b) => out.add(&ctx.p(b).reshape(&[1, self.channels, 1, 1])),
            None => out,
        }
    }

    /// Baseline path: memory is skipped entirely.
    pub fn bypass<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, f_in: &Var<'t, T>) -> Var<'t, T> {
        ctx.instruments.hit("lgim.bypass");
        f_in.clone()
    }

    /// Zeroes every memory entry and the brightness bias.
    pub fn zero<T: Real>(&self, store: &mut ParamStore<T>) {
        let mut ids = vec![self.global_vectors, self.patches];
        ids.extend(self.bias);
        for id in ids {
            store.get_mut(id).data_mut().fill(T::zero());
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.global_vectors, self.patches, self.lambda, self.eta];
        ids.extend(self.bias);
        ids.extend([self.gate_fc1.weight, self.gate_fc2.weight]);
        ids.extend(self.gate_fc1.bias);
        ids.extend(self.gate_fc2.bias);
        if let Some((a, b)) = &self.spatial_gate {
            ids.extend([a.weight, b.weight]);
            ids.extend(a.bias);
            ids.extend(b.bias);
        }
        ids.extend([self.proj_vector.weight, self.proj_patch.weight]);
        ids
    }

    /// Moves each best-matching entry towards the batch statistic it matched:
    /// `m <- decay * m + (1 - decay) * mean(query)`.
    pub fn ema_update<T: Real>(&self, store: &mut ParamStore<T>, retrieval: &Retrieval<'_, T>, decay: f64) {
        fn blend<T: Real>(bank: &mut Tensor<T>, weights: &Tensor<T>, queries: &Tensor<T>, decay: f64) {
            let l = bank.shape()[0];
            let d = bank.numel() / l;
            let rows = weights.numel() / l;
            let mut sum = vec![T::zero(); l * d];
            let mut count = vec![0usize; l];
            for row in 0..rows {
                let w = &weights.data()[row * l..(row + 1) * l];
                let top = (0..l).fold(0, |best, j| if w[j] > w[best] { j } else { best });
                count[top] += 1;
                for (s, &q) in sum[top * d..(top + 1) * d].iter_mut().zip(&queries.data()[row * d..(row + 1) * d]) {
                    *s += q;
                }
            }
            let keep = T::c(decay);
            for j in (0..l).filter(|&j| count[j] > 0) {
                let inv = T::c(1.0 / count[j] as f64);
                for (m, &s) in bank.data_mut()[j * d..(j + 1) * d].iter_mut().zip(&sum[j * d..(j + 1) * d]) {
                    *m = keep * *m + (T::one() - keep) * s * inv;
                }
            }
        }
        blend(store.get_mut(self.global_vectors), retrieval.vector_weights.value(), retrieval.vector_queries.value(), decay);
        blend(store.get_mut(self.patches), retrieval.patch_weights.value(), retrieval.patch_queries.value(), decay);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Instruments;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank(bias: bool) -> (ParamStore<f64>, MemoryBank) {
        let cfg = LgimConfig { gate_hidden: 5, ..LgimConfig::default() };
        let mut store = ParamStore::new(2);
        let bank = MemoryBank::new(&mut Builder::new(&mut store).pp("bank"), 6, &cfg, 1.2, bias);
        (store, bank)
    }

    fn feat(n: usize, h: usize, w: usize, seed: u64) -> Var<'static, f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Var::constant(Tensor::from_vec(&[n, 6, h, w], (0..n * 6 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()))
    }

    #[test]
    fn gain_bounds_and_monotonicity() {
        for &(lambda, eta) in &[(1.2, 0.0), (0.8, 2.0), (1.0, -3.0)] {
            let gs = [0.0, 0.25, 0.5, 0.75, 1.0];
            let values: Vec<f64> = gs.iter().map(|&g| gain(lambda, eta, g)).collect();
            for w in values.windows(2) {
                assert!(w[1] < w[0]);
            }
            assert_eq!(values[4], lambda);
            let s = 1.0 / (1.0 + f64::exp(-eta));
            assert!((values[0] - lambda * (1.0 + s)).abs() < 1e-15);
            assert!(values.iter().all(|&v| v >= lambda && v <= 2.0 * lambda));
        }
        assert!((gain(1.2, -800.0, 0.0) - 1.2).abs() < 1e-15);
    }

    #[test]
    fn retrieval_shapes_and_weights() {
        let (store, bank) = bank(true);
        let inst = Instruments::default();
        let ctx = Ctx::inference(&store, &inst);
        for &s in &[8usize, 12, 31] {
            let f = feat(2, s, s, s as u64);
            let r = bank.retrieve(&ctx, &f);
            assert_eq!(r.f_mem.shape(), &[2, 6, s, s]);
            for row in r.vector_weights.value().data().chunks(16).chain(r.patch_weights.value().data().chunks(16)) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_memory_retrieves_nothing() {
        let (mut store, bank) = bank(true);
        bank.zero(&mut store);
        let inst = Instruments::default();
        let ctx = Ctx::inference(&store, &inst);
        let f = feat(2, 9, 7, 1);
        let r = bank.retrieve(&ctx, &f);
        assert_eq!(r.f_mem.value().max_abs(), 0.0);
        let g = bank.luminance_gate(&ctx, &f, None);
        assert_eq!(bank.fuse(&ctx, &f, &r.f_mem, &g).value(), f.value());
    }

    #[test]
    fn fold_inverts_unfold() {
        let unfold = unfold_index(2, 3, 8, 4, 4);
        let fold = fold_index(&unfold);
        let x = Var::constant(Tensor::from_vec(&[2, 3, 8, 4], (0..192).map(|i| i as f64).collect()));
        let y = x.gather(&[2, 2, 48], Arc::new(unfold)).gather(&[2, 3, 8, 4], Arc::new(fold));
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn gate_is_per_sample() {
        let (store, bank) = bank(false);
        let inst = Instruments::default();
        let ctx = Ctx::inference(&store, &inst);
        let a = feat(1, 8, 8, 1);
        let b = feat(1, 8, 8, 2);
        let both = Var::concat(&[&a, &b], 0);
        let g = bank.luminance_gate(&ctx, &both, None);
        assert_eq!(g.shape(), &[2, 1]);
        assert_eq!(g.value().data()[0], bank.luminance_gate(&ctx, &a, None).value().data()[0]);
        assert_eq!(g.value().data()[1], bank.luminance_gate(&ctx, &b, None).value().data()[0]);
        assert!(g.value().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn fuse_at_full_gate_adds_lambda_times_memory() {
        let (store, bank) = bank(false);
        let inst = Instruments::default();
        let ctx = Ctx::inference(&store, &inst);
        let f = feat(1, 4, 4, 3);
        let m = feat(1, 4, 4, 4);
        let one = Var::constant(Tensor::full(&[1, 1], 1.0));
        let out = bank.fuse(&ctx, &f, &m, &one);
        for ((o, a), b) in out.value().data().iter().zip(f.value().data()).zip(m.value().data()) {
            assert!((o - (a + 1.2 * b)).abs() < 1e-15);
        }
    }

    #[test]
    fn memory_entries_receive_gradient() {
        let (store, bank) = bank(true);
        let inst = Instruments::default();
        let tape = Tape::new();
        let ctx = Ctx::recording(&tape, &store, &inst, true);
        let f = feat(2, 8, 8, 5);
        let r = bank.retrieve(&ctx, &f);
        let g = bank.luminance_gate(&ctx, &f, None);
        let loss = bank.fuse(&ctx, &f, &r.f_mem, &g).sqr().mean_all();
        let mut grads = tape.backward(&loss);
        let grads = ctx.param_grads(&mut grads);
        for id in [bank.global_vectors, bank.patches, bank.lambda, bank.eta] {
            assert!(grads[id.0].as_ref().unwrap().max_abs() > 0.0, "{}", store.name(id));
        }
    }

    #[test]
    fn ema_moves_only_matched_entries() {
        let (mut store, bank) = bank(false);
        let inst = Instruments::default();
        let before = store.get(bank.global_vectors).clone();
        let f = feat(1, 8, 8, 6);
        let r = {
            let ctx = Ctx::inference(&store, &inst);
            bank.retrieve(&ctx, &f)
        };
        bank.ema_update(&mut store, &r, 0.9);
        let weights = r.vector_weights.value();
        let top = (0..16).fold(0, |b, j| if weights.data()[j] > weights.data()[b] { j } else { b });
        let after = store.get(bank.global_vectors);
        for j in 0..16 {
            let changed = before.data()[j * 6..(j + 1) * 6] != after.data()[j * 6..(j + 1) * 6];
            assert_eq!(changed, j == top);
        }
    }
}
