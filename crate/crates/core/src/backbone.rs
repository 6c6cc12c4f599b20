//! Dual-branch U-Net in HVI space. The intensity branch and the HV
//! (chrominance) branch are coupled by channel cross-attention at every
//! level; prompts steer the HV encoder and memory sits at the bottleneck.

use rand_chacha::ChaCha8Rng;

use crate::adpg::{DegradationPrompt, Lde, Prfb};
use crate::color_hvi::{hvi_to_rgb_var, k_to_raw, rgb_to_hvi_var};
use crate::config::{BackboneConfig, ModelConfig, PgaPlacement, PgaConfig};
use crate::error::{Error, Result};
use crate::icde::apply_pga_batch;
use crate::lgim::{MemoryBank, Retrieval};
use crate::nn::{channel_attention, Builder, ChannelNorm, Conv2d, Ctx, GatedFfn, ParamId, ParamStore};
use crate::tensor::{Conv2dSpec, Real, Tensor, Var};

/// Spatial sizes must be a multiple of this (three 2x downsamplings).
pub const SIZE_MULTIPLE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Memory bypassed.
    Baseline,
    /// Memory retrieval and fusion at the bottleneck.
    Memory,
}

/// One direction of the lightweight cross-attention: `x` queries `y`.
#[derive(Clone, Debug)]
pub struct LcaHalf {
    pub heads: usize,
    pub norm_x: ChannelNorm,
    pub norm_y: ChannelNorm,
    pub norm_ffn: ChannelNorm,
    pub q: Conv2d,
    pub q_dw: Conv2d,
    pub kv: Conv2d,
    pub kv_dw: Conv2d,
    pub temperature: ParamId,
    pub proj_out: Conv2d,
    pub ffn: GatedFfn,
}

impl LcaHalf {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, c: usize, cfg: &BackboneConfig) -> Self {
        Self {
            heads: cfg.heads,
            norm_x: ChannelNorm::new(&mut b.pp("norm_x"), c),
            norm_y: ChannelNorm::new(&mut b.pp("norm_y"), c),
            norm_ffn: ChannelNorm::new(&mut b.pp("norm_ffn"), c),
            q: Conv2d::pointwise(&mut b.pp("q"), c, c, true),
            q_dw: Conv2d::depthwise3(&mut b.pp("q_dw"), c),
            kv: Conv2d::pointwise(&mut b.pp("kv"), c, 2 * c, true),
            kv_dw: Conv2d::depthwise3(&mut b.pp("kv_dw"), 2 * c),
            temperature: b.constant("temperature", &[cfg.heads], cfg.temperature_init),
            proj_out: Conv2d::pointwise(&mut b.pp("proj_out"), c, c, true),
            ffn: GatedFfn::new(&mut b.pp("ffn"), c, cfg.ffn_expansion),
        }
    }

    /// `x + Attn(x <- y) + FFN(x)`; also returns the attention matrix.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>, y: &Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
        assert_eq!(x.shape(), y.shape(), "LCA inputs differ in shape");
        ctx.instruments.hit("backbone.lca");
        let q = self.q_dw.forward(ctx, &self.q.forward(ctx, &self.norm_x.forward(ctx, x)));
        let kv = self.kv_dw.forward(ctx, &self.kv.forward(ctx, &self.norm_y.forward(ctx, y)));
        let kv = kv.chunk(2, 1);
        let (attended, attn) = channel_attention(&q, &kv[0], &kv[1], &ctx.p(self.temperature), self.heads);
        let out = x.add(&self.proj_out.forward(ctx, &attended)).add(&self.ffn.forward(ctx, &self.norm_ffn.forward(ctx, x)));
        (out, attn)
    }
}

/// Bidirectional coupling `(x, y) -> (x', y')`.
#[derive(Clone, Debug)]
pub struct Lca {
    pub i_from_hv: LcaHalf,
    pub hv_from_i: LcaHalf,
}

impl Lca {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, c: usize, cfg: &BackboneConfig) -> Self {
        Self { i_from_hv: LcaHalf::new(&mut b.pp("i"), c, cfg), hv_from_i: LcaHalf::new(&mut b.pp("hv"), c, cfg) }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, i: &Var<'t, T>, hv: &Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
        let (i2, _) = self.i_from_hv.forward(ctx, i, hv);
        let (hv2, _) = self.hv_from_i.forward(ctx, hv, i);
        (i2, hv2)
    }
}

/// HV-side coupler of an encoder level.
#[derive(Clone, Debug)]
pub enum HvCoupler {
    Prfb(Box<Prfb>),
    Lca(LcaHalf),
}

#[derive(Clone, Debug)]
pub struct EncoderLevel {
    pub i_from_hv: LcaHalf,
    pub hv: HvCoupler,
    pub down_i: Conv2d,
    pub down_hv: Conv2d,
}

#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub up_i: Conv2d,
    pub up_hv: Conv2d,
    pub merge_i: Conv2d,
    pub merge_hv: Conv2d,
    pub lca: Lca,
}

#[derive(Clone, Debug)]
pub struct Banks {
    pub i: MemoryBank,
    pub hv: MemoryBank,
}

/// The full network. Parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct InterLight {
    pub cfg: ModelConfig,
    /// Raw (pre-softplus) density exponent of the forward transform.
    pub k_forward: ParamId,
    /// Separate exponent for the inverse transform when `hvi.shared_k = false`.
    pub k_inverse: Option<ParamId>,
    pub lde: Option<Lde>,
    pub embed_i: Conv2d,
    pub embed_hv: Conv2d,
    pub encoder: Vec<EncoderLevel>,
    pub bottleneck: Lca,
    pub banks: Option<Banks>,
    pub decoder: Vec<DecoderLevel>,
    pub head_i: Conv2d,
    pub head_hv: Conv2d,
}

/// Encoder state shared by the baseline and memory paths.
pub struct Encoded<'t, T: Real> {
    /// Network input after augmentation and padding, `[N, 3, Hp, Wp]`.
    pub input: Var<'t, T>,
    pub prompt: Option<DegradationPrompt<'t, T>>,
    pub skips: Vec<(Var<'t, T>, Var<'t, T>)>,
    pub bottleneck: (Var<'t, T>, Var<'t, T>),
    pub size: (usize, usize),
}

/// One decoded path.
pub struct PathOutput<'t, T: Real> {
    /// Enhanced RGB `[N, 3, H, W]` in `[0, 1]`.
    pub rgb: Var<'t, T>,
    /// Gates `(g_I, g_HV)` when memory ran.
    pub gates: Option<(Var<'t, T>, Var<'t, T>)>,
    pub retrieval: Option<(Retrieval<'t, T>, Retrieval<'t, T>)>,
}

pub struct ForwardOutput<'t, T: Real> {
    /// Input actually fed to the network (after augmentation), `[N, 3, H, W]`.
    pub input: Var<'t, T>,
    pub prompt: Option<DegradationPrompt<'t, T>>,
    pub base: Option<PathOutput<'t, T>>,
    pub memory: Option<PathOutput<'t, T>>,
}

impl<'t, T: Real> ForwardOutput<'t, T> {
    /// The deployed output: memory path when present, baseline otherwise.
    pub fn output(&self) -> &PathOutput<'t, T> {
        self.memory.as_ref().or(self.base.as_ref()).expect("at least one path")
    }
}

fn check<'t, T: Real>(v: &Var<'t, T>, module: &'static str) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(module))
    }
}

impl InterLight {
    pub fn new<T: Real>(cfg: &ModelConfig) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        let model = Self::build(cfg, &mut Builder::new(&mut store));
        Ok((model, store))
    }

    fn build<T: Real>(cfg: &ModelConfig, b: &mut Builder<'_, T>) -> Self {
        let bb = &cfg.backbone;
        let ch = bb.channels;
        let flags = cfg.ablation;
        let k_raw = k_to_raw(cfg.hvi.k_init);
        let k_forward = b.constant("hvi.k", &[1], k_raw);
        let k_inverse = (!cfg.hvi.shared_k).then(|| b.constant("hvi.k_inverse", &[1], k_raw));
        let lde = flags.use_adpg.then(|| Lde::new(&mut b.pp("adpg.lde"), &cfg.adpg));
        let embed_i = Conv2d::conv3(&mut b.pp("embed.i"), 1, ch[0]);
        let embed_hv = Conv2d::conv3(&mut b.pp("embed.hv"), 2, ch[0]);
        let down = Conv2dSpec::same(3).strided(2);
        let encoder = (0..3)
            .map(|l| {
                let mut e = b.pp(&format!("encoder.{l}"));
                let hv = if flags.use_adpg {
                    HvCoupler::Prfb(Box::new(Prfb::new(&mut e.pp("prfb"), ch[l], cfg.adpg.spatial_sizes[l], &cfg.adpg, bb)))
                } else {
                    HvCoupler::Lca(LcaHalf::new(&mut e.pp("lca.hv"), ch[l], bb))
                };
                EncoderLevel {
                    i_from_hv: LcaHalf::new(&mut e.pp("lca.i"), ch[l], bb),
                    hv,
                    down_i: Conv2d::new(&mut e.pp("down.i"), ch[l], ch[l + 1], 3, down, true),
                    down_hv: Conv2d::new(&mut e.pp("down.hv"), ch[l], ch[l + 1], 3, down, true),
                }
            })
            .collect();
        let bottleneck = Lca::new(&mut b.pp("bottleneck.lca"), ch[3], bb);
        let banks = flags.use_lgim.then(|| Banks {
            i: MemoryBank::new(&mut b.pp("lgim.i"), ch[3], &cfg.lgim, cfg.lgim.lambda_i_init, true),
            hv: MemoryBank::new(&mut b.pp("lgim.hv"), ch[3], &cfg.lgim, cfg.lgim.lambda_hv_init, false),
        });
        let decoder = (0..3)
            .rev()
            .map(|l| {
                let mut d = b.pp(&format!("decoder.{l}"));
                DecoderLevel {
                    up_i: Conv2d::pointwise(&mut d.pp("up.i"), ch[l + 1], 4 * ch[l], true),
                    up_hv: Conv2d::pointwise(&mut d.pp("up.hv"), ch[l + 1], 4 * ch[l], true),
                    merge_i: Conv2d::pointwise(&mut d.pp("merge.i"), 2 * ch[l], ch[l], true),
                    merge_hv: Conv2d::pointwise(&mut d.pp("merge.hv"), 2 * ch[l], ch[l], true),
                    lca: Lca::new(&mut d.pp("lca"), ch[l], bb),
                }
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            k_forward,
            k_inverse,
            lde,
            embed_i,
            embed_hv,
            encoder,
            bottleneck,
            banks,
            decoder,
            head_i: Conv2d::conv3(&mut b.pp("head.i"), ch[0], 1),
            head_hv: Conv2d::conv3(&mut b.pp("head.hv"), ch[0], 2),
        }
    }

    /// Effective forward and inverse exponents (after softplus).
    pub fn k_vars<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>) -> (Var<'t, T>, Var<'t, T>) {
        let kf = ctx.p(self.k_forward).softplus();
        let ki = match self.k_inverse {
            Some(id) => ctx.p(id).softplus(),
            None => kf.clone(),
        };
        (kf, ki)
    }

    pub fn k_value<T: Real>(&self, store: &ParamStore<T>) -> f64 {
        crate::tensor::autograd::softplus(store.get(self.k_forward).item()).f64()
    }

    /// Zeroes both memory banks (entries and brightness bias).
    pub fn zero_banks<T: Real>(&self, store: &mut ParamStore<T>) {
        if let Some(banks) = &self.banks {
            banks.i.zero(store);
            banks.hv.zero(store);
        }
    }

    /// Applies augmentation (training only) and padding, then runs the encoder.
    pub fn encode<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: &Tensor<T>,
        rng: Option<&mut ChaCha8Rng>,
        pga: &PgaConfig,
        placement: PgaPlacement,
    ) -> Result<Encoded<'t, T>> {
        let (_, c, h, w) = x.dims4();
        if c != 3 {
            return Err(Error::Shape(format!("expected an RGB batch, got {:?}", x.shape())));
        }
        let augmented = match rng {
            Some(rng) if ctx.training && self.cfg.ablation.use_icde && placement == PgaPlacement::AfterCrop => {
                ctx.instruments.hit("icde.pga");
                apply_pga_batch(x, pga, rng)
            }
            _ => x.clone(),
        };
        let input = Var::constant(augmented);
        let (ph, pw) = (h.next_multiple_of(SIZE_MULTIPLE) - h, w.next_multiple_of(SIZE_MULTIPLE) - w);
        let padded = if ph + pw > 0 { input.pad_reflect(0, ph, 0, pw) } else { input.clone() };

        let prompt = match &self.lde {
            Some(lde) => {
                let p = lde.estimate_prompt(ctx, &padded);
                check(&p.p, "adpg.lde")?;
                Some(p)
            }
            None => None,
        };

        let (kf, _) = self.k_vars(ctx);
        let hvi = rgb_to_hvi_var(&padded, &kf, self.cfg.hvi.epsilon);
        let parts = hvi.chunk(3, 1);
        let hv_in = Var::concat(&[&parts[0], &parts[1]], 1);
        let mut fi = self.embed_i.forward(ctx, &parts[2]);
        let mut fhv = self.embed_hv.forward(ctx, &hv_in);
        let mut skips = Vec::with_capacity(3);
        for level in &self.encoder {
            let (ni, _) = level.i_from_hv.forward(ctx, &fi, &fhv);
            let nhv = match &level.hv {
                HvCoupler::Prfb(prfb) => prfb.forward(ctx, &fhv, &fi, prompt.as_ref().expect("prompt when PRFB is present")).0,
                HvCoupler::Lca(half) => half.forward(ctx, &fhv, &fi).0,
            };
            fi = level.down_i.forward(ctx, &ni);
            fhv = level.down_hv.forward(ctx, &nhv);
            skips.push((ni, nhv));
        }
        let (bi, bhv) = self.bottleneck.forward(ctx, &fi, &fhv);
        check(&bi, "backbone.encoder")?;
        check(&bhv, "backbone.encoder")?;
        Ok(Encoded { input: padded, prompt, skips, bottleneck: (bi, bhv), size: (h, w) })
    }

    /// Bottleneck memory (or bypass), decoder, heads and output composition.
    pub fn decode<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, enc: &Encoded<'t, T>, mode: Mode) -> Result<PathOutput<'t, T>> {
        let (bi, bhv) = &enc.bottleneck;
        let (mut fi, mut fhv, gates, retrieval) = match (&self.banks, mode) {
            (Some(banks), Mode::Memory) => {
                let ri = banks.i.retrieve(ctx, bi);
                let rhv = banks.hv.retrieve(ctx, bhv);
                let gi = banks.i.luminance_gate(ctx, bi, None);
                let ghv = banks.hv.luminance_gate(ctx, bhv, Some(bi));
                let fi = banks.i.fuse(ctx, bi, &ri.f_mem, &gi);
                let fhv = banks.hv.fuse(ctx, bhv, &rhv.f_mem, &ghv);
                check(&fi, "lgim")?;
                check(&fhv, "lgim")?;
                (fi, fhv, Some((gi, ghv)), Some((ri, rhv)))
            }
            (Some(banks), Mode::Baseline) => (banks.i.bypass(ctx, bi), banks.hv.bypass(ctx, bhv), None, None),
            (None, _) => (bi.clone(), bhv.clone(), None, None),
        };
        for (level, (si, shv)) in self.decoder.iter().zip(enc.skips.iter().rev()) {
            let ui = level.up_i.forward(ctx, &fi).pixel_shuffle(2);
            let uhv = level.up_hv.forward(ctx, &fhv).pixel_shuffle(2);
            let mi = level.merge_i.forward(ctx, &Var::concat(&[&ui, si], 1));
            let mhv = level.merge_hv.forward(ctx, &Var::concat(&[&uhv, shv], 1));
            (fi, fhv) = level.lca.forward(ctx, &mi, &mhv);
        }
        check(&fi, "backbone.decoder")?;
        check(&fhv, "backbone.decoder")?;
        let i = self.head_i.forward(ctx, &fi).sigmoid();
        let hv = self.head_hv.forward(ctx, &fhv);
        let hv = hv.chunk(2, 1);
        let pred_hvi = Var::concat(&[&hv[0], &hv[1], &i], 1);
        let (_, ki) = self.k_vars(ctx);
        let rgb = self.compose_output(&pred_hvi, &enc.input, &ki);
        let (h, w) = enc.size;
        let rgb = if rgb.shape()[2..] == [h, w] { rgb } else { rgb.crop(0, 0, h, w) };
        check(&rgb, "color_hvi.inverse")?;
        Ok(PathOutput { rgb, gates, retrieval })
    }

    /// `clamp(hvi_to_rgb(pred) + input, 0, 1)`.
    pub fn compose_output<'t, T: Real>(&self, pred_hvi: &Var<'t, T>, input: &Var<'t, T>, k_inverse: &Var<'t, T>) -> Var<'t, T> {
        hvi_to_rgb_var(pred_hvi, k_inverse, self.cfg.hvi.epsilon, self.cfg.hvi.norm_floor)
            .add(input)
            .clamp(T::zero(), T::one())
    }

    /// Single-path forward.
    pub fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: &Tensor<T>,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
        pga: &PgaConfig,
    ) -> Result<ForwardOutput<'t, T>> {
        let enc = self.encode(ctx, x, rng, pga, PgaPlacement::AfterCrop)?;
        let path = self.decode(ctx, &enc, mode)?;
        let input = self.crop_input(&enc);
        let (base, memory) = match mode {
            Mode::Baseline => (Some(path), None),
            Mode::Memory => (None, Some(path)),
        };
        Ok(ForwardOutput { input, prompt: enc.prompt, base, memory })
    }

    /// Training forward: both paths share one encoder pass. Without memory
    /// only the baseline path exists.
    pub fn forward_dual<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: &Tensor<T>,
        rng: Option<&mut ChaCha8Rng>,
        pga: &PgaConfig,
        placement: PgaPlacement,
    ) -> Result<ForwardOutput<'t, T>> {
        let enc = self.encode(ctx, x, rng, pga, placement)?;
        let base = self.decode(ctx, &enc, Mode::Baseline)?;
        let memory = match self.banks {
            Some(_) => Some(self.decode(ctx, &enc, Mode::Memory)?),
            None => None,
        };
        let input = self.crop_input(&enc);
        Ok(ForwardOutput { input, prompt: enc.prompt, base: Some(base), memory })
    }

    /// Deployed inference: memory mode, no augmentation.
    pub fn enhance<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Tensor<T>) -> Result<ForwardOutput<'t, T>> {
        self.forward(ctx, x, Mode::Memory, None, &PgaConfig::default())
    }

    fn crop_input<'t, T: Real>(&self, enc: &Encoded<'t, T>) -> Var<'t, T> {
        let (h, w) = enc.size;
        if enc.input.shape()[2..] == [h, w] {
            enc.input.clone()
        } else {
            enc.input.crop(0, 0, h, w)
        }
    }
}

/// Total trainable scalars.
pub fn count_parameters<T: Real>(store: &ParamStore<T>) -> usize {
    store.count_scalars()
}
