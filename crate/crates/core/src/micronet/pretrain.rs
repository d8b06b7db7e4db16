use serde::{Deserialize, Serialize};

use super::model::{Architecture, Model};
use super::train::{train, TrainConfig};
use crate::datasets::{synth_dataset, Domain};
use crate::error::Result;
use crate::scalar::Scalar;

/// Settings for training a model from scratch on the synthetic source task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub architecture: Architecture,
    pub per_class: usize,
    /// Seeds weight initialization and the source corpus.
    pub seed: u64,
    pub train: TrainConfig,
}

impl PretrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            architecture: Architecture::standard(),
            per_class: 200,
            seed,
            train: TrainConfig::with_seed(seed),
        }
    }
}

/// Trains every layer on the `source` domain and returns the model with nothing frozen.
///
/// Stands in for a backbone pre-trained on a large generic corpus.
pub fn pretrain_source<T: Scalar>(config: &PretrainConfig) -> Result<Model<T>> {
    let data = synth_dataset(config.per_class, config.seed, Domain::Source);
    let mut model = Model::new(&config.architecture, config.seed)?;
    model.unfreeze_all();
    let history = train(&mut model, data.items(), &[], &config.train)?;
    log::info!(
        "pretrained on {} source images, final loss {:.4}",
        data.len(),
        history.last().map_or(f64::NAN, |h| h.train_loss)
    );
    Ok(model)
}
