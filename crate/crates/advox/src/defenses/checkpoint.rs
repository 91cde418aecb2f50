//! Checkpointing for the trainable defenses, in the same binary format
//! the classifier uses. Each loader verifies the kind tag and the
//! exact tensor-name layout before assigning weights.

use std::path::Path;

use ndarray::ArrayD;

use super::gan::GanGenerator;
use super::vae::VaeModel;
use super::vocoder::VocoderModel;
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::{AdvoxError, Result};

pub const VAE_KIND: &str = "vae";
pub const VOCODER_KIND: &str = "vocoder";
pub const WGAN_KIND: &str = "wgan";

fn check_kind(ck: &Checkpoint, path: &Path, kind: &str) -> Result<()> {
    if ck.arch_kind != kind {
        return Err(AdvoxError::Checkpoint(format!(
            "{}: checkpoint holds a '{}' model, expected '{}'",
            path.display(),
            ck.arch_kind,
            kind
        )));
    }
    Ok(())
}

fn take_tensors(ck: Checkpoint, path: &Path, expected: &[String]) -> Result<Vec<ArrayD<f32>>> {
    if ck.tensors.len() != expected.len() {
        return Err(AdvoxError::Checkpoint(format!(
            "{}: expected {} tensors, found {}",
            path.display(),
            expected.len(),
            ck.tensors.len()
        )));
    }
    for ((name, _), want) in ck.tensors.iter().zip(expected) {
        if name != want {
            return Err(AdvoxError::Checkpoint(format!(
                "{}: tensor '{name}' out of place, expected '{want}'",
                path.display()
            )));
        }
    }
    Ok(ck.tensors.into_iter().map(|(_, t)| t).collect())
}

fn owned_params(params: Vec<(String, crate::autograd::Storage<f32>)>) -> Vec<(String, ArrayD<f32>)> {
    params.into_iter().map(|(n, p)| (n, p.to_owned())).collect()
}

impl VaeModel<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let config_json = serde_json::to_string(&self.cfg).expect("config serializes");
        save_checkpoint(path, VAE_KIND, &config_json, &owned_params(self.params()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        check_kind(&ck, path, VAE_KIND)?;
        let cfg = serde_json::from_str(&ck.config_json)
            .map_err(|e| AdvoxError::Checkpoint(format!("bad vae config: {e}")))?;
        let mut model = VaeModel::new(cfg, &mut crate::core::seeded_rng(0));
        let expected: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        model.assign(take_tensors(ck, path, &expected)?);
        Ok(model)
    }
}

impl VocoderModel<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let config_json = serde_json::to_string(&self.cfg).expect("config serializes");
        save_checkpoint(path, VOCODER_KIND, &config_json, &owned_params(self.params()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        check_kind(&ck, path, VOCODER_KIND)?;
        let cfg = serde_json::from_str(&ck.config_json)
            .map_err(|e| AdvoxError::Checkpoint(format!("bad vocoder config: {e}")))?;
        let mut model = VocoderModel::new(cfg, &mut crate::core::seeded_rng(0));
        let expected: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        model.assign(take_tensors(ck, path, &expected)?);
        Ok(model)
    }
}

impl GanGenerator<f32> {
    /// Saves the generator; the critic only matters while training.
    pub fn save(&self, path: &Path) -> Result<()> {
        let config_json = serde_json::to_string(&self.cfg).expect("config serializes");
        save_checkpoint(path, WGAN_KIND, &config_json, &owned_params(self.params()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        check_kind(&ck, path, WGAN_KIND)?;
        let cfg = serde_json::from_str(&ck.config_json)
            .map_err(|e| AdvoxError::Checkpoint(format!("bad generator config: {e}")))?;
        let mut model = GanGenerator::new(cfg, &mut crate::core::seeded_rng(0));
        let expected: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        model.assign(take_tensors(ck, path, &expected)?);
        Ok(model)
    }
}
