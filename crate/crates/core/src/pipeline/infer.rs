//! Inference: single images, directories, evaluation and diagnostics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{count_parameters, InterLight};
use crate::color_hvi::RgbImage;
use crate::config::Ablation;
use crate::error::{Error, Result};
use crate::image_io::{load_png, save_png};
use crate::metrics::{evaluate_dataset, MetricReport, MetricSpace};
use crate::nn::{Ctx, Instruments, ParamStore};
use crate::pipeline::checkpoint::{self, CheckpointHeader};
use crate::tensor::{Real, Tensor};

/// Memory-mode forward without augmentation; any size (padded internally).
pub fn enhance_image<T: Real>(model: &InterLight, store: &ParamStore<T>, img: &RgbImage, inst: &Instruments) -> Result<RgbImage> {
    let ctx = Ctx::inference(store, inst);
    let out = model.enhance(&ctx, &img.to_tensor::<T>())?;
    RgbImage::from_tensor(out.output().rgb.value(), 0)
}

pub struct Enhancer<T> {
    pub header: CheckpointHeader,
    pub model: InterLight,
    pub store: ParamStore<T>,
    pub instruments: Instruments,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EnhanceSummary {
    pub written: Vec<PathBuf>,
    pub skipped: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        Self {
            mean: values.iter().sum::<f64>() / n,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptReport {
    pub coefficients: Vec<f64>,
    pub coefficient_sum: f64,
    pub prompt_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BankReport {
    pub gate: Stats,
    pub vector_entry_norms: Vec<f64>,
    pub patch_entry_norms: Vec<f64>,
    /// Mean retrieval weight per global-vector slot.
    pub vector_slot_weights: Vec<f64>,
    /// Mean retrieval weight per patch slot (over all patch queries).
    pub patch_slot_weights: Vec<f64>,
    /// Histogram of all patch retrieval weights over ten equal bins of `[0, 1]`.
    pub patch_weight_histogram: [usize; 10],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InspectReport {
    pub image: String,
    pub config_hash: String,
    pub step: usize,
    pub ablation: Ablation,
    pub parameter_count: usize,
    pub k: f64,
    pub k_inverse: f64,
    pub prompt: Option<PromptReport>,
    pub lgim_i: Option<BankReport>,
    pub lgim_hv: Option<BankReport>,
    /// Component call counts during this forward pass.
    pub instruments: std::collections::BTreeMap<String, usize>,
}

fn row_norms<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    let rows = t.shape()[0];
    let d = t.numel() / rows;
    t.data().chunks(d).map(|r| r.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()).collect()
}

fn slot_means<T: Real>(w: &Tensor<T>) -> Vec<f64> {
    let l = *w.shape().last().expect("weights have a slot axis");
    let rows = w.numel() / l;
    let mut acc = vec![0.0; l];
    for row in w.data().chunks(l) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v.f64() / rows as f64;
        }
    }
    acc
}

impl<T: Real> Enhancer<T> {
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let loaded = checkpoint::load::<T>(path)?;
        Ok(Self { header: loaded.header, model: loaded.model, store: loaded.store, instruments: Instruments::default() })
    }

    pub fn new(header: CheckpointHeader, model: InterLight, store: ParamStore<T>) -> Self {
        Self { header, model, store, instruments: Instruments::default() }
    }

    pub fn enhance(&self, img: &RgbImage) -> Result<RgbImage> {
        enhance_image(&self.model, &self.store, img, &self.instruments)
    }

    /// Enhances every PNG in `input` (sorted by name) into `output`.
    /// Unreadable files are skipped with a warning.
    pub fn enhance_dir(&self, input: &Path, output: &Path) -> Result<EnhanceSummary> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        entries.sort();
        std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
        let mut summary = EnhanceSummary::default();
        for path in entries {
            let name = path.file_name().expect("file entry").to_owned();
            let img = match load_png(&path) {
                Ok(img) => img,
                Err(e) => {
                    log::warn!("skipping {e}");
                    summary.skipped.push(name.to_string_lossy().into_owned());
                    continue;
                }
            };
            let out_path = output.join(&name);
            save_png(&self.enhance(&img)?, &out_path)?;
            summary.written.push(out_path);
        }
        Ok(summary)
    }

    pub fn evaluate(&self, root: &Path, space: MetricSpace) -> Result<MetricReport> {
        evaluate_dataset(root, &self.header.config_hash, space, |img| self.enhance(img))
    }

    pub fn inspect(&self, img: &RgbImage, name: &str) -> Result<InspectReport> {
        let inst = Instruments::default();
        let ctx = Ctx::inference(&self.store, &inst);
        let out = self.model.enhance(&ctx, &img.to_tensor::<T>())?;
        let (kf, ki) = self.model.k_vars(&ctx);
        let prompt = out.prompt.as_ref().map(|p| {
            let coefficients: Vec<f64> = p.coefficients.value().data().iter().map(|v| v.f64()).collect();
            PromptReport {
                coefficient_sum: coefficients.iter().sum(),
                coefficients,
                prompt_norm: p.p.value().data().iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt(),
            }
        });
        let path = out.output();
        let bank_reports = match (&self.model.banks, &path.gates, &path.retrieval) {
            (Some(banks), Some((gi, ghv)), Some((ri, rhv))) => {
                let report = |bank: &crate::lgim::MemoryBank, g: &Tensor<T>, r: &crate::lgim::Retrieval<'_, T>| {
                    let pw = r.patch_weights.value();
                    let mut hist = [0usize; 10];
                    for v in pw.data() {
                        hist[((v.f64() * 10.0) as usize).min(9)] += 1;
                    }
                    BankReport {
                        gate: Stats::of(&g.to_f64_vec()),
                        vector_entry_norms: row_norms(self.store.get(bank.global_vectors)),
                        patch_entry_norms: row_norms(self.store.get(bank.patches)),
                        vector_slot_weights: slot_means(r.vector_weights.value()),
                        patch_slot_weights: slot_means(pw),
                        patch_weight_histogram: hist,
                    }
                };
                (Some(report(&banks.i, gi.value(), ri)), Some(report(&banks.hv, ghv.value(), rhv)))
            }
            _ => (None, None),
        };
        Ok(InspectReport {
            image: name.to_string(),
            config_hash: self.header.config_hash.clone(),
            step: self.header.step,
            ablation: self.model.cfg.ablation,
            parameter_count: count_parameters(&self.store),
            k: kf.value().item().f64(),
            k_inverse: ki.value().item().f64(),
            prompt,
            lgim_i: bank_reports.0,
            lgim_hv: bank_reports.1,
            instruments: inst.snapshot(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn enhancer() -> Enhancer<f32> {
        let cfg = ModelConfig::tiny(Ablation::default());
        let (model, store) = InterLight::new::<f32>(&cfg).unwrap();
        Enhancer::new(CheckpointHeader::new(&cfg, 0, vec![]), model, store)
    }

    fn image(w: usize, h: usize) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| [(x % 7) as f32 / 7.0, (y % 5) as f32 / 5.0, 0.3]).unwrap()
    }

    #[test]
    fn directory_enhancement_is_deterministic_and_skips_garbage() {
        let e = enhancer();
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in");
        save_png(&image(20, 13), &input.join("a.png")).unwrap();
        save_png(&image(9, 9), &input.join("b.png")).unwrap();
        std::fs::write(input.join("c.png"), b"junk").unwrap();
        let s1 = e.enhance_dir(&input, &dir.path().join("o1")).unwrap();
        let s2 = e.enhance_dir(&input, &dir.path().join("o2")).unwrap();
        assert_eq!(s1.written.len(), 2);
        assert_eq!(s1.skipped, ["c.png"]);
        for (a, b) in s1.written.iter().zip(&s2.written) {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
        let out = load_png(&s1.written[0]).unwrap();
        assert_eq!((out.width(), out.height()), (20, 13));
    }

    #[test]
    fn inspect_reports_consistent_diagnostics() {
        let e = enhancer();
        let r = e.inspect(&image(16, 16), "x.png").unwrap();
        let p = r.prompt.unwrap();
        assert!((p.coefficient_sum - 1.0).abs() < 1e-5);
        for bank in [r.lgim_i.unwrap(), r.lgim_hv.unwrap()] {
            assert!(bank.gate.min >= 0.0 && bank.gate.max <= 1.0);
            assert!((bank.vector_slot_weights.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        assert_eq!(r.parameter_count, e.store.count_scalars());
        assert_eq!(r.instruments.get("icde.pga"), None);
        assert_eq!(r.instruments.get("icde.pic"), None);
    }
}
