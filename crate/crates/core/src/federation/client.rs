//! Client-side work: local training on private data.
//!
//! Clients never change the architecture they receive, so every upload in a
//! round has the same shape as the broadcast model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, ClientData, Sample};
use crate::error::{Error, Result};
use crate::nn::ModelGraph;
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        LocalTrainConfig {
            epochs: 5,
            batch_size: 32,
            adam: AdamConfig::default(),
        }
    }
}

/// A trained local model and the sample count it was trained on.
#[derive(Clone, Debug)]
pub struct LocalUpdate {
    pub client: usize,
    pub model: ModelGraph,
    pub samples: usize,
}

/// Trains a copy of `global` for `cfg.epochs` passes over `client`'s data.
///
/// Batches are reshuffled each epoch from `seed`; optimizer state starts
/// fresh and is dropped on return.
pub fn local_train(global: &ModelGraph, client: &ClientData, cfg: &LocalTrainConfig, seed: u64) -> Result<LocalUpdate> {
    if client.samples.is_empty() {
        return Err(Error::Config(format!("client {} has no training data", client.id)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut model = global.clone();
    let mut adam = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<&Sample> = client.samples.iter().collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = make_batch(chunk, model.input_shape);
            let (_, grads) = model.loss_and_grads(&batch, &labels)?;
            adam.step(model.params_mut().into_iter().zip(grads.iter()))?;
        }
    }
    Ok(LocalUpdate {
        client: client.id,
        model,
        samples: client.samples.len(),
    })
}

/// Mean cross-entropy of `model` over `samples`.
pub fn mean_loss(model: &ModelGraph, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(256) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (batch, labels) = make_batch(&refs, model.input_shape);
        let logits = model.forward(&batch)?;
        total += crate::ops::cross_entropy(&logits, &labels)? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}
