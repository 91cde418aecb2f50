//! Reduced-scale x-vector speaker classifier: layers, the model
//! itself, Adam, checkpointing, and training loops.

mod checkpoint;
mod layers;
mod optim;
pub(crate) mod train;
mod xvector;

pub use checkpoint::{config_hash, expect_hash, load_checkpoint, save_checkpoint, Checkpoint};
pub use layers::{kaiming, leaf, stats_pool, Conv1dLayer, Conv2dLayer, DenseLayer, Tape};
pub use optim::Adam;
pub use train::{
    adversarial_train, classifier_accuracy, fine_tune_gaussian, train_classifier, AdvTrainAttack,
    FineTuneScope, LabeledWave, TrainConfig, TrainReport,
};
pub use xvector::{
    aam_softmax_loss, batch_features, features_tensor, XVectorClassifier, XVectorConfig,
};

use crate::{AdvoxError, Result};
use std::path::Path;

/// Checkpoint kind tag for the speaker classifier.
pub const XVECTOR_KIND: &str = "xvector";

impl XVectorClassifier<f32> {
    /// Serialize config and weights to a checkpoint file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let config_json = serde_json::to_string(&self.cfg).expect("config serializes");
        let tensors: Vec<(String, ndarray::ArrayD<f32>)> = self
            .params()
            .into_iter()
            .map(|(name, p)| (name, p.to_owned()))
            .collect();
        save_checkpoint(path, XVECTOR_KIND, &config_json, &tensors)
    }

    /// Load a classifier, verifying kind and weight-name layout.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        if ck.arch_kind != XVECTOR_KIND {
            return Err(AdvoxError::Checkpoint(format!(
                "{}: checkpoint holds a '{}' model, expected '{}'",
                path.display(),
                ck.arch_kind,
                XVECTOR_KIND
            )));
        }
        let cfg: XVectorConfig = serde_json::from_str(&ck.config_json)
            .map_err(|e| AdvoxError::Checkpoint(format!("bad classifier config: {e}")))?;
        let mut rng = crate::core::seeded_rng(0);
        let mut model = XVectorClassifier::new(cfg, &mut rng);
        let expected: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        if ck.tensors.len() != expected.len() {
            return Err(AdvoxError::Checkpoint(format!(
                "{}: expected {} tensors, found {}",
                path.display(),
                expected.len(),
                ck.tensors.len()
            )));
        }
        for ((name, _), want) in ck.tensors.iter().zip(&expected) {
            if name != want {
                return Err(AdvoxError::Checkpoint(format!(
                    "{}: tensor '{name}' out of place, expected '{want}'",
                    path.display()
                )));
            }
        }
        model.assign(ck.tensors.into_iter().map(|(_, t)| t).collect());
        Ok(model)
    }
}
