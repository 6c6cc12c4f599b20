//! Declarative configuration. Every hyperparameter has a named TOML key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HviConfig {
    pub epsilon: f64,
    pub k_init: f64,
    /// Floor on the density used to normalise chrominance in the inverse transform.
    pub norm_floor: f64,
    /// Use one `k` for both transforms; `false` gives the inverse its own parameter.
    pub shared_k: bool,
}

impl Default for HviConfig {
    fn default() -> Self {
        Self { epsilon: 1e-8, k_init: 0.2, norm_floor: 1e-4, shared_k: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgaConfig {
    pub gamma_low: f64,
    pub gamma_high: f64,
    pub apply_prob: f64,
    pub tau_d: f64,
}

impl Default for PgaConfig {
    fn default() -> Self {
        Self { gamma_low: 0.95, gamma_high: 1.05, apply_prob: 0.3, tau_d: 0.05 }
    }
}

impl PgaConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.gamma_low > 0.0 && self.gamma_low <= self.gamma_high) {
            return Err(Error::config("icde.pga: need 0 < gamma_low <= gamma_high"));
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::config("icde.pga.apply_prob must lie in [0, 1]"));
        }
        if !(self.tau_d > 0.0 && self.tau_d < 1.0) {
            return Err(Error::config("icde.pga.tau_d must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CropMode {
    /// `crop_margin` pixels are removed from every border.
    Margin,
    /// A centred square of side `crop_margin`.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PicConfig {
    pub crop_margin: usize,
    pub crop_mode: CropMode,
    pub blur_kernel_min: usize,
    pub blur_kernel_max: usize,
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub beta0: f64,
    /// Length of the cosine decay; `None` means the whole training run.
    pub total_steps: Option<usize>,
}

impl Default for PicConfig {
    fn default() -> Self {
        Self {
            crop_margin: 16,
            crop_mode: CropMode::Margin,
            blur_kernel_min: 9,
            blur_kernel_max: 21,
            sigma_low: 0.1,
            sigma_high: 5.0,
            beta0: 0.1,
            total_steps: None,
        }
    }
}

impl PicConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.blur_kernel_min % 2 == 0 || self.blur_kernel_max % 2 == 0 || self.blur_kernel_min > self.blur_kernel_max {
            return Err(Error::config("icde.pic: blur kernel bounds must be odd and ordered"));
        }
        if !(self.sigma_low > 0.0 && self.sigma_low < self.sigma_high) {
            return Err(Error::config("icde.pic: need 0 < sigma_low < sigma_high"));
        }
        if self.beta0 < 0.0 {
            return Err(Error::config("icde.pic.beta0 must be non-negative"));
        }
        if self.total_steps == Some(0) {
            return Err(Error::config("icde.pic.total_steps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PgaPlacement {
    BeforeCrop,
    AfterCrop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcdeConfig {
    pub pga: PgaConfig,
    pub pic: PicConfig,
    pub pga_placement: PgaPlacement,
}

impl Default for IcdeConfig {
    fn default() -> Self {
        Self { pga: PgaConfig::default(), pic: PicConfig::default(), pga_placement: PgaPlacement::AfterCrop }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdpgConfig {
    /// Dictionary size K.
    pub atoms: usize,
    /// Prompt dimension d_p.
    pub prompt_dim: usize,
    /// Condition-network output dimension d_z.
    pub latent_dim: usize,
    /// Channels of the three stride-2 convolutions of the condition network.
    pub condition_channels: [usize; 3],
    /// Side of the spatial prompt map at the shallow, middle and deep encoder levels.
    pub spatial_sizes: [usize; 3],
    pub atom_init_std: f64,
}

impl Default for AdpgConfig {
    fn default() -> Self {
        Self {
            atoms: 32,
            prompt_dim: 512,
            latent_dim: 32,
            condition_channels: [16, 32, 32],
            spatial_sizes: [16, 8, 4],
            atom_init_std: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LgimConfig {
    /// Memory entries L.
    pub slots: usize,
    /// Patch side r.
    pub patch: usize,
    pub lambda_i_init: f64,
    pub lambda_hv_init: f64,
    pub eta_init: f64,
    pub entry_init_std: f64,
    /// Hidden width of the gate MLP.
    pub gate_hidden: usize,
    /// Per-pixel gate instead of a per-sample scalar.
    pub spatial_gate: bool,
    /// Blend retrieved statistics into the top-1 entry after each step.
    pub ema: bool,
    pub ema_decay: f64,
}

impl Default for LgimConfig {
    fn default() -> Self {
        Self {
            slots: 16,
            patch: 4,
            lambda_i_init: 1.2,
            lambda_hv_init: 0.8,
            eta_init: 0.0,
            entry_init_std: 0.02,
            gate_hidden: 36,
            spatial_gate: false,
            ema: false,
            ema_decay: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub channels: [usize; 4],
    pub heads: usize,
    pub ffn_expansion: usize,
    pub temperature_init: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { channels: [36, 36, 72, 144], heads: 4, ffn_expansion: 2, temperature_init: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_adpg: bool,
    pub use_lgim: bool,
    pub use_icde: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { use_adpg: true, use_lgim: true, use_icde: true }
    }
}

impl Ablation {
    /// The eight component combinations `(label, flags)`, from the bare
    /// baseline to the full model.
    pub fn table() -> [(&'static str, Ablation); 8] {
        let f = |use_adpg, use_lgim, use_icde| Ablation { use_adpg, use_lgim, use_icde };
        [
            ("a", f(false, false, false)),
            ("b", f(true, false, false)),
            ("c", f(false, true, false)),
            ("d", f(false, false, true)),
            ("e", f(true, true, false)),
            ("f", f(true, false, true)),
            ("g", f(false, true, true)),
            ("full", f(true, true, true)),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub seed: u64,
    pub ablation: Ablation,
    pub hvi: HviConfig,
    pub adpg: AdpgConfig,
    pub lgim: LgimConfig,
    pub backbone: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ablation: Ablation::default(),
            hvi: HviConfig::default(),
            adpg: AdpgConfig::default(),
            lgim: LgimConfig::default(),
            backbone: BackboneConfig::default(),
        }
    }
}

impl ModelConfig {
    /// A very small network with the same topology, for tests and demos.
    pub fn tiny(ablation: Ablation) -> Self {
        let mut cfg = ModelConfig { ablation, ..ModelConfig::default() };
        cfg.backbone.channels = [4, 4, 8, 8];
        cfg.backbone.heads = 2;
        cfg.adpg.prompt_dim = 16;
        cfg.adpg.atoms = 4;
        cfg.adpg.latent_dim = 6;
        cfg.adpg.condition_channels = [4, 6, 6];
        cfg.adpg.spatial_sizes = [4, 2, 2];
        cfg.lgim.slots = 3;
        cfg.lgim.patch = 2;
        cfg.lgim.gate_hidden = 4;
        cfg
    }

    pub fn validate(&self) -> Result<(), Error> {
        let b = &self.backbone;
        if b.heads == 0 || b.channels.iter().any(|&c| c == 0 || c % b.heads != 0) {
            return Err(Error::config("backbone.channels must be positive multiples of backbone.heads"));
        }
        if self.hvi.k_init <= 0.0 || self.hvi.epsilon <= 0.0 {
            return Err(Error::config("hvi.k_init and hvi.epsilon must be positive"));
        }
        if self.adpg.atoms == 0 || self.adpg.prompt_dim == 0 || self.adpg.latent_dim == 0 {
            return Err(Error::config("adpg dimensions must be positive"));
        }
        if self.lgim.slots == 0 || self.lgim.patch == 0 {
            return Err(Error::config("lgim.slots and lgim.patch must be positive"));
        }
        Ok(())
    }

    /// Short digest identifying the architecture; checkpoints carry it.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerceptualBackend {
    Off,
    FixedRandomFeatures,
    PretrainedVgg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub mu_hvi: f64,
    pub mu_p: f64,
    pub lambda_lgim: f64,
    pub perceptual_backend: PerceptualBackend,
    /// safetensors file with VGG-16 `features.*` weights, for `pretrained-vgg`.
    pub vgg_weights: Option<PathBuf>,
    pub perceptual_seed: u64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mu_hvi: 0.5,
            mu_p: 0.1,
            lambda_lgim: 1.0,
            perceptual_backend: PerceptualBackend::FixedRandomFeatures,
            vgg_weights: None,
            perceptual_seed: 1234,
            ssim_window: 11,
            ssim_sigma: 1.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.mu_hvi < 0.0 || self.mu_p < 0.0 || self.lambda_lgim < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.ssim_window % 2 == 0 {
            return Err(Error::config("loss.ssim_window must be odd"));
        }
        if self.perceptual_backend == PerceptualBackend::PretrainedVgg && self.vgg_weights.is_none() {
            return Err(Error::config("loss.perceptual_backend = \"pretrained-vgg\" needs loss.vgg_weights"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 2e-4, lr_min: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `low/` and `high/`.
    pub root: PathBuf,
    pub val_fraction: f64,
    pub crop: usize,
    pub hflip: bool,
    pub vflip: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: PathBuf::from("data/toy"), val_fraction: 0.1, crop: 64, hflip: true, vflip: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    /// Stop after this many optimiser steps (the schedule is stretched over it).
    pub max_steps: Option<usize>,
    pub out_dir: PathBuf,
    /// Validate and checkpoint every this many epochs (and at the end).
    pub checkpoint_every: usize,
    pub data: DataConfig,
    pub optim: OptimConfig,
    pub model: ModelConfig,
    pub icde: IcdeConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 50,
            batch: 2,
            max_steps: None,
            out_dir: PathBuf::from("runs/default"),
            checkpoint_every: 5,
            data: DataConfig::default(),
            optim: OptimConfig::default(),
            model: ModelConfig::default(),
            icde: IcdeConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-size schedule: 1500 epochs, batch 8, 256-pixel crops.
    pub fn full_scale(mut self) -> Self {
        self.epochs = 1500;
        self.batch = 8;
        self.data.crop = 256;
        self
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.batch == 0 {
            return Err(Error::config("batch must be at least 1"));
        }
        if self.data.crop == 0 || self.data.crop % 8 != 0 {
            return Err(Error::config("data.crop must be a positive multiple of 8"));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::config("data.val_fraction must lie in [0, 1)"));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(Error::config("epochs must be at least 1"));
        }
        self.model.validate()?;
        self.icde.pga.validate()?;
        self.icde.pic.validate()?;
        self.loss.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = TrainConfig::default();
        let back: TrainConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial: TrainConfig = toml::from_str("epochs = 3\n[model.ablation]\nuse_lgim = false\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert!(!partial.model.ablation.use_lgim);
        assert_eq!(partial.optim.lr, 2e-4);
        assert!(toml::from_str::<TrainConfig>("learning_rate = 1.0").is_err());
    }

    #[test]
    fn hash_tracks_architecture() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.ablation.use_adpg = false;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn ablation_table_is_distinct() {
        let t = Ablation::table();
        for i in 0..t.len() {
            for j in 0..i {
                assert_ne!(t[i].1, t[j].1);
            }
        }
    }
}
