//! The training loop: dual-path forward, compound loss, Adam with cosine
//! annealing, periodic validation and checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{InterLight, PathOutput};
use crate::color_hvi::{rgb_to_hvi_var, RgbImage};
use crate::config::{PgaPlacement, TrainConfig};
use crate::error::{Error, Result};
use crate::icde::{apply_pga, consistency_loss_var, consistency_weight, pic_views_var, PicViews};
use crate::metrics::{psnr, psnr_tensors, ssim};
use crate::nn::{Ctx, Instruments, ParamStore};
use crate::objectives::{Objective, RecTerms, TotalTerms};
use crate::pipeline::checkpoint::{self, CheckpointHeader, MetricSnapshot};
use crate::pipeline::dataset::{batch_from, PairedDataset};
use crate::pipeline::infer::enhance_image;
use crate::pipeline::optim::{cosine_lr, Adam};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecRecord {
    pub l1: f64,
    pub ssim: f64,
    pub edge: f64,
    pub perceptual: Option<f64>,
    pub total: f64,
}

impl RecRecord {
    fn of<T: Real>(r: &RecTerms<'_, T>) -> Self {
        let v = |x: &Var<'_, T>| x.value().item().f64();
        Self { l1: v(&r.l1), ssim: v(&r.ssim), edge: v(&r.edge), perceptual: r.perceptual.as_ref().map(v), total: v(&r.total) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub rgb: RecRecord,
    pub hvi: RecRecord,
    pub total: f64,
}

impl PathRecord {
    fn of<T: Real>(t: &TotalTerms<'_, T>) -> Self {
        Self { rgb: RecRecord::of(&t.rgb), hvi: RecRecord::of(&t.hvi), total: t.total.value().item().f64() }
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Consistency weight at this step.
    pub beta: f64,
    pub loss: f64,
    pub base: PathRecord,
    pub memory: Option<PathRecord>,
    pub consistency: Option<f64>,
    /// PSNR of the deployed output against the batch targets.
    pub batch_psnr: f64,
    pub k: f64,
    pub wall_s: f64,
}

pub struct Trainer<T: Real> {
    pub cfg: TrainConfig,
    pub model: InterLight,
    pub store: ParamStore<T>,
    pub objective: Objective<T>,
    pub instruments: Instruments,
    pub step: usize,
    pub total_steps: usize,
    pub history: Vec<MetricSnapshot>,
    adam: Adam<T>,
    rng: ChaCha8Rng,
    started: Instant,
}

/// Per-path losses, with the consistency term folded into the deployed path.
fn path_loss<'t, T: Real>(
    trainer: &Trainer<T>,
    path: &PathOutput<'t, T>,
    gt: &Var<'t, T>,
    gt_hvi: &Var<'t, T>,
    k: &Var<'t, T>,
    consistency: Option<&Var<'t, T>>,
) -> TotalTerms<'t, T> {
    let pred_hvi = rgb_to_hvi_var(&path.rgb, k, trainer.cfg.model.hvi.epsilon);
    trainer.objective.total_loss(&path.rgb, gt, &pred_hvi, gt_hvi, consistency)
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: &TrainConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        let (model, store) = InterLight::new::<T>(&cfg.model)?;
        let objective = Objective::new(&cfg.loss)?;
        let adam = Adam::new(&cfg.optim, &store);
        let mut cfg = cfg.clone();
        cfg.icde.pic.total_steps = Some(cfg.icde.pic.total_steps.unwrap_or(total_steps));
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            model,
            store,
            objective,
            instruments: Instruments::default(),
            step: 0,
            total_steps: total_steps.max(1),
            history: Vec::new(),
            adam,
            started: Instant::now(),
        })
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(self.step, self.total_steps, &self.cfg.optim)
    }

    /// Crops, flips and (when placed before cropping) augments a batch.
    pub fn sample(&mut self, ds: &PairedDataset, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let before = self.cfg.model.ablation.use_icde && self.cfg.icde.pga_placement == PgaPlacement::BeforeCrop;
        let pga = self.cfg.icde.pga.clone();
        let inst = &self.instruments;
        batch_from(ds, indices, &self.cfg.data, &mut self.rng, |img, rng| {
            before.then(|| {
                inst.hit("icde.pga");
                apply_pga(img, &pga, rng)
            })
        })
    }

    /// One optimisation step on an already cropped batch.
    pub fn train_step(&mut self, low: &Tensor<T>, high: &Tensor<T>, epoch: usize) -> Result<StepRecord> {
        let use_icde = self.cfg.model.ablation.use_icde;
        let lr = self.lr();
        let beta = if use_icde { consistency_weight(self.step, &self.cfg.icde.pic) } else { 0.0 };
        let (record, grads, ema) = {
            let tape = Tape::new();
            let ctx = Ctx::recording(&tape, &self.store, &self.instruments, true);
            let out = self.model.forward_dual(&ctx, low, Some(&mut self.rng), &self.cfg.icde.pga, self.cfg.icde.pga_placement)?;
            let (k, _) = self.model.k_vars(&ctx);
            let gt = Var::constant(high.clone());
            let gt_hvi = rgb_to_hvi_var(&gt, &k.detach(), self.cfg.model.hvi.epsilon);

            let deployed = out.output();
            let consistency = if use_icde {
                self.instruments.hit("icde.pic");
                match pic_views_var(&deployed.rgb, &self.cfg.icde.pic, &mut self.rng) {
                    PicViews::Views { weak, strong, .. } => Some(consistency_loss_var(&weak, &strong, self.step, &self.cfg.icde.pic)),
                    PicViews::Skipped => None,
                }
            } else {
                None
            };
            let base_path = out.base.as_ref().expect("training runs the baseline path");
            let (loss, base, memory) = match &out.memory {
                Some(mem) => {
                    let b = path_loss(self, base_path, &gt, &gt_hvi, &k, None);
                    let m = path_loss(self, mem, &gt, &gt_hvi, &k, consistency.as_ref());
                    (self.objective.dual_loss(&b, &m), b, Some(m))
                }
                None => {
                    let b = path_loss(self, base_path, &gt, &gt_hvi, &k, consistency.as_ref());
                    (b.total.clone(), b, None)
                }
            };
            let loss_value = loss.value().item().f64();
            if !loss_value.is_finite() {
                return Err(Error::Diverged { step: self.step, msg: format!("loss is {loss_value}") });
            }
            let batch_psnr = psnr_tensors(&deployed.rgb.value().cast::<f64>(), &high.cast::<f64>())?;
            let record = StepRecord {
                step: self.step,
                epoch,
                lr,
                beta,
                loss: loss_value,
                base: PathRecord::of(&base),
                memory: memory.as_ref().map(PathRecord::of),
                consistency: consistency.as_ref().map(|c| c.value().item().f64()),
                batch_psnr,
                k: k.value().item().f64(),
                wall_s: self.started.elapsed().as_secs_f64(),
            };
            let mut g = tape.backward(&loss);
            let grads = ctx.param_grads(&mut g);
            if let Some(bad) = grads.iter().position(|g| g.as_ref().is_some_and(|g| !g.all_finite())) {
                return Err(Error::Diverged { step: self.step, msg: format!("non-finite gradient for {}", self.store.name(crate::nn::ParamId(bad))) });
            }
            let ema = match (&out.memory, self.cfg.model.lgim.ema) {
                (Some(PathOutput { retrieval: Some((ri, rhv)), .. }), true) => Some((ri.detached(), rhv.detached())),
                _ => None,
            };
            (record, grads, ema)
        };
        self.adam.step(&mut self.store, &grads, lr);
        if let (Some((ri, rhv)), Some(banks)) = (ema, &self.model.banks) {
            let decay = self.cfg.model.lgim.ema_decay;
            banks.i.ema_update(&mut self.store, &ri, decay);
            banks.hv.ema_update(&mut self.store, &rhv, decay);
        }
        self.step += 1;
        Ok(record)
    }

    /// Inference-mode enhancement of one image with the current weights.
    pub fn enhance(&self, img: &RgbImage) -> Result<RgbImage> {
        enhance_image(&self.model, &self.store, img, &Instruments::default())
    }

    /// Mean PSNR / SSIM of the current model over `indices`.
    pub fn evaluate(&self, ds: &PairedDataset, indices: &[usize]) -> Result<(f64, f64)> {
        let mut acc = (0.0, 0.0);
        for &i in indices {
            let out = self.enhance(&ds.low[i])?;
            acc.0 += psnr(&out, &ds.high[i])?;
            acc.1 += ssim(&out, &ds.high[i])?;
        }
        let n = indices.len().max(1) as f64;
        Ok((acc.0 / n, acc.1 / n))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &CheckpointHeader::new(&self.cfg.model, self.step, self.history.clone()), &self.store)
    }
}

/// Result of a full [`train`] run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub final_loss: f64,
    /// Validation PSNR of the raw low-light inputs against their references.
    pub input_val_psnr: Option<f64>,
    pub history: Vec<MetricSnapshot>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Steps in one pass over `n_train` pairs.
pub fn steps_per_epoch(n_train: usize, batch: usize) -> usize {
    n_train.div_ceil(batch.max(1)).max(1)
}

/// Trains from a config, writing the JSON-lines log and checkpoints into
/// `cfg.out_dir`. A non-finite loss aborts the run; the checkpoint on disk is
/// then the last good one.
pub fn train<T: Real>(cfg: &TrainConfig, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainSummary> {
    cfg.validate()?;
    let ds = PairedDataset::load(&cfg.data.root)?;
    let (train_idx, val_idx) = ds.split(cfg.data.val_fraction);
    let spe = steps_per_epoch(train_idx.len(), cfg.batch);
    let total = cfg.max_steps.unwrap_or(cfg.epochs * spe).min(cfg.epochs * spe).max(1);
    let mut trainer = Trainer::<T>::new(cfg, total)?;

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let cfg_path = cfg.out_dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let log_path = cfg.out_dir.join(LOG_FILE);
    let ckpt_path = cfg.out_dir.join(CHECKPOINT_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);

    let input_val_psnr = if val_idx.is_empty() {
        None
    } else {
        let s: f64 = val_idx.iter().map(|&i| psnr(&ds.low[i], &ds.high[i])).sum::<Result<f64>>()?;
        Some(s / val_idx.len() as f64)
    };
    log::info!(
        "{} training / {} validation pairs, {spe} steps per epoch, {total} steps, {} parameters",
        train_idx.len(),
        val_idx.len(),
        trainer.store.count_scalars()
    );

    let mut order = train_idx.clone();
    let mut final_loss = f64::NAN;
    let mut epoch = 0;
    while trainer.step < total {
        order.shuffle(&mut trainer.rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch) {
            if trainer.step >= total {
                break;
            }
            let mut idx = chunk.to_vec();
            while idx.len() < cfg.batch {
                idx.push(train_idx[trainer.rng.random_range(0..train_idx.len())]);
            }
            let (low, high) = trainer.sample(&ds, &idx)?;
            let rec = trainer.train_step(&low, &high, epoch)?;
            serde_json::to_writer(&mut log, &rec).expect("log record serialises");
            writeln!(log).map_err(|e| Error::io(&log_path, e))?;
            epoch_loss += rec.loss;
            steps += 1;
            final_loss = rec.loss;
            on_step(&rec);
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        epoch_loss /= steps.max(1) as f64;
        epoch += 1;
        let last = trainer.step >= total;
        if last || epoch % cfg.checkpoint_every.max(1) == 0 {
            let (val_psnr, val_ssim) = match val_idx.is_empty() {
                true => (None, None),
                false => {
                    let (p, s) = trainer.evaluate(&ds, &val_idx)?;
                    (Some(p), Some(s))
                }
            };
            log::info!("epoch {epoch} step {} loss {epoch_loss:.4} val psnr {val_psnr:?}", trainer.step);
            trainer.history.push(MetricSnapshot { step: trainer.step, epoch, train_loss: epoch_loss, val_psnr, val_ssim });
            trainer.save(&ckpt_path)?;
        }
    }
    Ok(TrainSummary {
        steps: trainer.step,
        epochs: epoch,
        final_loss,
        input_val_psnr,
        history: trainer.history.clone(),
        checkpoint: ckpt_path,
        log: log_path,
    })
}
