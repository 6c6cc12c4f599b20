//! Checkpoints: one safetensors archive holding every parameter under its
//! dotted module path, with a JSON header in the archive metadata.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::backbone::InterLight;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

pub const FORMAT: &str = "interlight-checkpoint";
pub const VERSION: u32 = 1;
const HEADER_KEY: &str = "interlight";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub step: usize,
    pub metric_history: Vec<MetricSnapshot>,
    /// Architecture needed to rebuild the network.
    pub model: ModelConfig,
}

impl CheckpointHeader {
    pub fn new(model: &ModelConfig, step: usize, metric_history: Vec<MetricSnapshot>) -> Self {
        Self { format: FORMAT.into(), version: VERSION, config_hash: model.hash(), step, metric_history, model: model.clone() }
    }
}

fn ck_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

/// Writes to a sibling temp file and renames, so an interrupted save never
/// clobbers the previous checkpoint.
pub fn save<T: Real>(path: &Path, header: &CheckpointHeader, store: &ParamStore<T>) -> Result<()> {
    let (dtype, bytes): (Dtype, Vec<Vec<u8>>) = if T::NAME == "f64" {
        (Dtype::F64, store.iter().map(|(_, p)| p.value.data().iter().flat_map(|v| v.f64().to_le_bytes()).collect()).collect())
    } else {
        (Dtype::F32, store.iter().map(|(_, p)| p.value.data().iter().flat_map(|v| (v.f64() as f32).to_le_bytes()).collect()).collect())
    };
    let views = store
        .iter()
        .zip(&bytes)
        .map(|((_, p), b)| Ok((p.name.clone(), TensorView::new(dtype, p.value.shape().to_vec(), b).map_err(|e| ck_err(path, e))?)))
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(header).expect("header serialises"))]);
    let data = safetensors::tensor::serialize(views, Some(meta)).map_err(|e| ck_err(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, data).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    header_of(path, &bytes)
}

fn header_of(path: &Path, bytes: &[u8]) -> Result<CheckpointHeader> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| ck_err(path, e))?;
    let json = meta.metadata().as_ref().and_then(|m| m.get(HEADER_KEY)).ok_or_else(|| ck_err(path, "no header"))?;
    let header: CheckpointHeader = serde_json::from_str(json).map_err(|e| ck_err(path, format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(ck_err(path, format!("unsupported format {} v{}", header.format, header.version)));
    }
    if header.model.hash() != header.config_hash {
        return Err(ck_err(path, "config hash does not match the stored architecture"));
    }
    Ok(header)
}

pub struct Loaded<T> {
    pub header: CheckpointHeader,
    pub model: InterLight,
    pub store: ParamStore<T>,
}

/// Rebuilds the network from the stored architecture and fills every
/// parameter; missing, extra or misshapen tensors are errors.
pub fn load<T: Real>(path: &Path) -> Result<Loaded<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = header_of(path, &bytes)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ck_err(path, e))?;
    let (model, mut store) = InterLight::new::<T>(&header.model)?;
    if st.len() != store.len() {
        return Err(ck_err(path, format!("{} tensors stored, model has {}", st.len(), store.len())));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let view = st.tensor(&name).map_err(|_| ck_err(path, format!("missing tensor {name}")))?;
        let target = store.get_mut(id);
        if view.shape() != target.shape() {
            return Err(ck_err(path, format!("{name}: stored shape {:?}, model expects {:?}", view.shape(), target.shape())));
        }
        let values: Vec<T> = match view.dtype() {
            Dtype::F32 => view.data().chunks_exact(4).map(|b| T::c(f32::from_le_bytes(b.try_into().unwrap()) as f64)).collect(),
            Dtype::F64 => view.data().chunks_exact(8).map(|b| T::c(f64::from_le_bytes(b.try_into().unwrap()))).collect(),
            other => return Err(ck_err(path, format!("{name}: unsupported dtype {other:?}"))),
        };
        *target = Tensor::from_vec(view.shape(), values);
    }
    Ok(Loaded { header, model, store })
}

/// Checks that a checkpoint was produced for `expected` before loading it.
pub fn load_compatible<T: Real>(path: &Path, expected: &ModelConfig) -> Result<Loaded<T>> {
    let loaded = load::<T>(path)?;
    let want = expected.hash();
    if loaded.header.config_hash != want {
        return Err(ck_err(path, format!("config hash {} does not match {want}", loaded.header.config_hash)));
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Ablation;
    use crate::nn::{Ctx, Instruments};

    #[test]
    fn round_trip_preserves_forward() {
        let cfg = ModelConfig::tiny(Ablation::default());
        let (model, store) = InterLight::new::<f32>(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        let snap = MetricSnapshot { step: 3, epoch: 1, train_loss: 0.5, val_psnr: Some(12.0), val_ssim: None };
        save(&path, &CheckpointHeader::new(&cfg, 3, vec![snap.clone()]), &store).unwrap();
        let loaded = load::<f32>(&path).unwrap();
        assert_eq!(loaded.header.step, 3);
        assert_eq!(loaded.header.metric_history, vec![snap]);
        let x = Tensor::<f32>::from_vec(&[1, 3, 16, 16], (0..768).map(|i| (i % 17) as f32 / 17.0).collect());
        let inst = Instruments::default();
        let a = model.enhance(&Ctx::inference(&store, &inst), &x).unwrap().output().rgb.value().clone();
        let b = loaded.model.enhance(&Ctx::inference(&loaded.store, &inst), &x).unwrap().output().rgb.value().clone();
        let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
        assert!(diff <= 1e-6, "{diff}");
    }

    #[test]
    fn hash_mismatch_is_rejected() {
        let cfg = ModelConfig::tiny(Ablation::default());
        let (_, store) = InterLight::new::<f32>(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        save(&path, &CheckpointHeader::new(&cfg, 0, vec![]), &store).unwrap();
        let mut other = cfg.clone();
        other.lgim.slots += 1;
        assert!(load_compatible::<f32>(&path, &other).is_err());
        assert!(load_compatible::<f32>(&path, &cfg).is_ok());
    }
}
