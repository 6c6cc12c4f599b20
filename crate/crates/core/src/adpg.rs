//! Degradation prompts: a small condition network mixes a learnable
//! dictionary into a per-sample prompt, which the prompt-responsive fusion
//! block (PRFB) injects into the HV encoder.

use crate::config::{AdpgConfig, BackboneConfig};
use crate::nn::{channel_attention, global_avg_pool, Builder, ChannelNorm, Conv2d, Ctx, GatedFfn, Linear, ParamId};
use crate::tensor::{Conv2dSpec, Real, Var};

/// Prompt `p` `[N, d_p]` and its mixing coefficients `[N, K]`.
#[derive(Clone, Debug)]
pub struct DegradationPrompt<'t, T: Real> {
    pub p: Var<'t, T>,
    pub coefficients: Var<'t, T>,
}

/// Latent degradation estimator together with the dictionary it mixes.
#[derive(Clone, Debug)]
pub struct Lde {
    pub strided: [Conv2d; 3],
    pub pointwise: [Conv2d; 2],
    /// `[K, d_z]`, no bias.
    pub proj_alpha: ParamId,
    /// Dictionary atoms `[K, d_p]`.
    pub atoms: ParamId,
}

impl Lde {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &AdpgConfig) -> Self {
        let [c1, c2, c3] = cfg.condition_channels;
        let down = Conv2dSpec::same(3).strided(2);
        let strided = [
            Conv2d::new(&mut b.pp("cond.0"), 3, c1, 3, down, true),
            Conv2d::new(&mut b.pp("cond.1"), c1, c2, 3, down, true),
            Conv2d::new(&mut b.pp("cond.2"), c2, c3, 3, down, true),
        ];
        let pointwise =
            [Conv2d::pointwise(&mut b.pp("cond.3"), c3, c3, true), Conv2d::pointwise(&mut b.pp("cond.4"), c3, cfg.latent_dim, true)];
        let proj_alpha = b.uniform("proj_alpha", &[cfg.atoms, cfg.latent_dim], 1.0 / (cfg.latent_dim as f64).sqrt());
        let atoms = b.normal("dictionary", &[cfg.atoms, cfg.prompt_dim], cfg.atom_init_std);
        Self { strided, pointwise, proj_alpha, atoms }
    }

    /// Condition features `z = GAP(C(img))`, `[N, d_z]`.
    pub fn latent<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, img: &Var<'t, T>) -> Var<'t, T> {
        let mut h = img.clone();
        for conv in &self.strided {
            h = conv.forward(ctx, &h).gelu();
        }
        h = self.pointwise[0].forward(ctx, &h).gelu();
        h = self.pointwise[1].forward(ctx, &h);
        global_avg_pool(&h)
    }

    pub fn estimate_prompt<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, img: &Var<'t, T>) -> DegradationPrompt<'t, T> {
        ctx.instruments.hit("adpg.lde");
        let z = self.latent(ctx, img);
        let coefficients = z.linear(&ctx.p(self.proj_alpha), None).softmax_last();
        let p = coefficients.matmul(&ctx.p(self.atoms)).gelu();
        DegradationPrompt { p, coefficients }
    }
}

/// Internals of one PRFB evaluation, kept for inspection and tests.
#[derive(Clone, Debug)]
pub struct PrfbAux<'t, T: Real> {
    pub gate: Var<'t, T>,
    pub attention: Var<'t, T>,
}

/// Prompt-responsive fusion block for one HV-encoder level.
#[derive(Clone, Debug)]
pub struct Prfb {
    pub channels: usize,
    pub spatial: usize,
    pub heads: usize,
    pub norm_x: ChannelNorm,
    pub norm_y: ChannelNorm,
    pub norm_ffn: ChannelNorm,
    pub proj_gamma: Linear,
    pub proj_beta: Linear,
    pub proj_spatial: Linear,
    pub spatial_conv: Conv2d,
    pub q_prompt: Conv2d,
    pub q_feat: Conv2d,
    pub gate_dw: Conv2d,
    pub gate_pw: Conv2d,
    pub q_dw: Conv2d,
    pub kv: Conv2d,
    pub kv_dw: Conv2d,
    pub temperature: ParamId,
    pub proj_out: Conv2d,
    pub ffn: GatedFfn,
}

impl Prfb {
    /// `spatial` is the side of the prompt map at this level.
    pub fn new<T: Real>(b: &mut Builder<'_, T>, channels: usize, spatial: usize, adpg: &AdpgConfig, bb: &BackboneConfig) -> Self {
        let c = channels;
        let d = adpg.prompt_dim;
        Self {
            channels,
            spatial,
            heads: bb.heads,
            norm_x: ChannelNorm::new(&mut b.pp("norm_x"), c),
            norm_y: ChannelNorm::new(&mut b.pp("norm_y"), c),
            norm_ffn: ChannelNorm::new(&mut b.pp("norm_ffn"), c),
            proj_gamma: Linear::new(&mut b.pp("proj_gamma"), d, c, true),
            proj_beta: Linear::new(&mut b.pp("proj_beta"), d, c, true),
            proj_spatial: Linear::new(&mut b.pp("proj_spatial"), d, c * spatial * spatial, true),
            spatial_conv: Conv2d::conv3(&mut b.pp("spatial_conv"), c, c),
            q_prompt: Conv2d::pointwise(&mut b.pp("q_prompt"), c, c, true),
            q_feat: Conv2d::pointwise(&mut b.pp("q_feat"), c, c, true),
            gate_dw: Conv2d::depthwise3(&mut b.pp("gate_dw"), 2 * c),
            gate_pw: Conv2d::pointwise(&mut b.pp("gate_pw"), 2 * c, c, true),
            q_dw: Conv2d::depthwise3(&mut b.pp("q_dw"), c),
            kv: Conv2d::pointwise(&mut b.pp("kv"), c, 2 * c, true),
            kv_dw: Conv2d::depthwise3(&mut b.pp("kv_dw"), 2 * c),
            temperature: b.constant("temperature", &[bb.heads], bb.temperature_init),
            proj_out: Conv2d::pointwise(&mut b.pp("proj_out"), c, c, true),
            ffn: GatedFfn::new(&mut b.pp("ffn"), c, bb.ffn_expansion),
        }
    }

    /// `X' = X (1 + sigmoid(W_g p)) + W_b p`, broadcast over space.
    pub fn affine_modulate<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>, prompt: &DegradationPrompt<'t, T>) -> Var<'t, T> {
        let n = x.shape()[0];
        let c = self.channels;
        let gamma = self.proj_gamma.forward(ctx, &prompt.p).sigmoid().reshape(&[n, c, 1, 1]);
        let beta = self.proj_beta.forward(ctx, &prompt.p).reshape(&[n, c, 1, 1]);
        x.mul(&gamma.add_scalar(T::one())).add(&beta)
    }

    /// Prompt projected to a `C x s x s` map, convolved, and resized to `(h, w)`.
    pub fn spatial_prompt<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, prompt: &DegradationPrompt<'t, T>, h: usize, w: usize) -> Var<'t, T> {
        let n = prompt.p.shape()[0];
        let s = self.spatial;
        let map = self.proj_spatial.forward(ctx, &prompt.p).reshape(&[n, self.channels, s, s]);
        let map = self.spatial_conv.forward(ctx, &map);
        if (h, w) == (s, s) {
            map
        } else {
            map.resize_bilinear(h, w)
        }
    }

    /// HV features `x` attend to intensity features `y` under prompt guidance.
    pub fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: &Var<'t, T>,
        y: &Var<'t, T>,
        prompt: &DegradationPrompt<'t, T>,
    ) -> (Var<'t, T>, PrfbAux<'t, T>) {
        assert_eq!(x.shape(), y.shape(), "PRFB inputs differ in shape");
        ctx.instruments.hit("adpg.prfb");
        let (_, _, h, w) = x.dims4();
        let xm = self.affine_modulate(ctx, &self.norm_x.forward(ctx, x), prompt);
        let ps = self.spatial_prompt(ctx, prompt, h, w);
        let q1 = self.q_prompt.forward(ctx, &ps);
        let q2 = self.q_feat.forward(ctx, &xm);
        let gate = self.gate_pw.forward(ctx, &self.gate_dw.forward(ctx, &Var::concat(&[&q1, &q2], 1))).sigmoid();
        let mixed = gate.mul(&q1).add(&Var::scalar(T::one()).sub(&gate).mul(&q2));
        let q = self.q_dw.forward(ctx, &mixed);
        let kv = self.kv_dw.forward(ctx, &self.kv.forward(ctx, &self.norm_y.forward(ctx, y)));
        let kv = kv.chunk(2, 1);
        let (attended, attention) = channel_attention(&q, &kv[0], &kv[1], &ctx.p(self.temperature), self.heads);
        let out = x.add(&self.proj_out.forward(ctx, &attended)).add(&self.ffn.forward(ctx, &self.norm_ffn.forward(ctx, x)));
        (out, PrfbAux { gate, attention })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Instruments, ParamStore};
    use crate::tensor::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> AdpgConfig {
        AdpgConfig { atoms: 5, prompt_dim: 12, latent_dim: 6, condition_channels: [4, 6, 6], ..AdpgConfig::default() }
    }

    fn image(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[n, 3, h, w], (0..n * 3 * h * w).map(|_| rng.random::<f64>()).collect())
    }

    #[test]
    fn coefficients_are_a_distribution() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new(1);
        let lde = Lde::new(&mut Builder::new(&mut store), &cfg);
        let inst = Instruments::default();
        let ctx = Ctx::inference(&store, &inst);
        let prompt = lde.estimate_prompt(&ctx, &Var::constant(image(3, 16, 16, 2)));
        assert_eq!(prompt.p.shape(), &[3, 12]);
        for row in prompt.coefficients.value().data().chunks(5) {
            assert!(row.iter().all(|&c| c >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // same image twice -> identical prompts
        let again = lde.estimate_prompt(&ctx, &Var::constant(image(3, 16, 16, 2)));
        assert_eq!(prompt.p.value(), again.p.value());
    }

    #[test]
    fn zero_alpha_projection_averages_atoms() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new(1);
        let lde = Lde::new(&mut Builder::new(&mut store), &cfg);
        store.get_mut(lde.proj_alpha).data_mut().fill(0.0);
        let inst = Instruments::default();
        let ctx = Ctx::inference(&store, &inst);
        let prompt = lde.estimate_prompt(&ctx, &Var::constant(image(1, 8, 8, 3)));
        assert!(prompt.coefficients.value().data().iter().all(|&c| (c - 0.2).abs() < 1e-15));
        let atoms = store.get(lde.atoms);
        for j in 0..12 {
            let mean = (0..5).map(|k| atoms.data()[k * 12 + j]).sum::<f64>() / 5.0;
            let expect = crate::tensor::autograd::gelu(mean);
            assert!((prompt.p.value().data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn prompt_is_permutation_covariant() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new(4);
        let lde = Lde::new(&mut Builder::new(&mut store), &cfg);
        let img = Var::constant(image(2, 16, 16, 5));
        let inst = Instruments::default();
        let before = lde.estimate_prompt(&Ctx::inference(&store, &inst), &img).p.value().clone();
        let perm = [3usize, 0, 4, 2, 1];
        let permute_rows = |t: &Tensor<f64>| {
            let cols = t.shape()[1];
            let mut out = t.clone();
            for (dst, &src) in perm.iter().enumerate() {
                out.data_mut()[dst * cols..(dst + 1) * cols].copy_from_slice(&t.data()[src * cols..(src + 1) * cols]);
            }
            out
        };
        let a = permute_rows(store.get(lde.atoms));
        let w = permute_rows(store.get(lde.proj_alpha));
        *store.get_mut(lde.atoms) = a;
        *store.get_mut(lde.proj_alpha) = w;
        let after = lde.estimate_prompt(&Ctx::inference(&store, &inst), &img).p.value().clone();
        for (x, y) in before.data().iter().zip(after.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    struct Block {
        store: ParamStore<f64>,
        lde: Lde,
        prfb: Prfb,
    }

    fn block(spatial: usize) -> Block {
        let cfg = small_cfg();
        let bb = BackboneConfig { heads: 2, ..BackboneConfig::default() };
        let mut store = ParamStore::<f64>::new(9);
        let mut b = Builder::new(&mut store);
        let lde = Lde::new(&mut b.pp("lde"), &cfg);
        let prfb = Prfb::new(&mut b.pp("prfb"), 4, spatial, &cfg, &bb);
        Block { store, lde, prfb }
    }

    fn feat(h: usize, w: usize, seed: u64) -> Var<'static, f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Var::constant(Tensor::from_vec(&[2, 4, h, w], (0..8 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()))
    }

    #[test]
    fn affine_with_zero_projections_scales_by_one_and_a_half() {
        let mut blk = block(4);
        for id in [blk.prfb.proj_gamma.weight, blk.prfb.proj_gamma.bias.unwrap(), blk.prfb.proj_beta.weight, blk.prfb.proj_beta.bias.unwrap()] {
            blk.store.get_mut(id).data_mut().fill(0.0);
        }
        let inst = Instruments::default();
        let ctx = Ctx::inference(&blk.store, &inst);
        let prompt = blk.lde.estimate_prompt(&ctx, &Var::constant(image(2, 8, 8, 1)));
        let x = feat(5, 6, 2);
        let y = blk.prfb.affine_modulate(&ctx, &x, &prompt);
        for (a, b) in x.value().data().iter().zip(y.value().data()) {
            assert!((1.5 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn spatial_prompt_shapes_and_zero_prompt() {
        let mut blk = block(8);
        let inst = Instruments::default();
        let zero = DegradationPrompt { p: Var::constant(Tensor::zeros(&[2, 12])), coefficients: Var::constant(Tensor::zeros(&[2, 5])) };
        {
            let ctx = Ctx::inference(&blk.store, &inst);
            for (h, w) in [(8, 8), (16, 12), (3, 5)] {
                assert_eq!(blk.prfb.spatial_prompt(&ctx, &zero, h, w).shape(), &[2, 4, h, w]);
            }
        }
        for id in [blk.prfb.proj_spatial.bias.unwrap(), blk.prfb.spatial_conv.bias.unwrap()] {
            blk.store.get_mut(id).data_mut().fill(0.0);
        }
        let ctx = Ctx::inference(&blk.store, &inst);
        assert_eq!(blk.prfb.spatial_prompt(&ctx, &zero, 10, 10).value().max_abs(), 0.0);
    }

    #[test]
    fn prfb_shapes_gate_range_and_residual() {
        let mut blk = block(4);
        let inst = Instruments::default();
        let x = feat(6, 7, 3);
        let y = feat(6, 7, 4);
        {
            let ctx = Ctx::inference(&blk.store, &inst);
            let prompt = blk.lde.estimate_prompt(&ctx, &Var::constant(image(2, 8, 8, 1)));
            let (out, aux) = blk.prfb.forward(&ctx, &x, &y, &prompt);
            assert_eq!(out.shape(), x.shape());
            assert!(aux.gate.value().data().iter().all(|&g| g > 0.0 && g < 1.0));
            for row in aux.attention.value().data().chunks(2) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let p = &blk.prfb;
        for id in [p.proj_out.weight, p.proj_out.bias.unwrap(), p.ffn.proj_out.weight, p.ffn.proj_out.bias.unwrap()] {
            blk.store.get_mut(id).data_mut().fill(0.0);
        }
        let ctx = Ctx::inference(&blk.store, &inst);
        let prompt = blk.lde.estimate_prompt(&ctx, &Var::constant(image(2, 8, 8, 1)));
        let (out, _) = blk.prfb.forward(&ctx, &x, &y, &prompt);
        assert_eq!(out.value(), x.value());
    }

    #[test]
    fn dictionary_moves_after_one_step() {
        let blk = block(4);
        let inst = Instruments::default();
        let tape = Tape::new();
        let ctx = Ctx::recording(&tape, &blk.store, &inst, true);
        let prompt = blk.lde.estimate_prompt(&ctx, &Var::constant(image(2, 16, 16, 6)));
        let (out, _) = blk.prfb.forward(&ctx, &feat(8, 8, 7), &feat(8, 8, 8), &prompt);
        let loss = out.sqr().mean_all();
        let mut grads = tape.backward(&loss);
        let g = ctx.param_grads(&mut grads);
        let gd = g[blk.lde.atoms.0].as_ref().expect("dictionary gradient");
        // one SGD step changes the atoms
        let before = blk.store.get(blk.lde.atoms).clone();
        let after = before.zip_map(gd, |a, g| a - 0.1 * g);
        let delta: f64 = before.data().iter().zip(after.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(delta > 0.0);
    }
}
