//! Minibatch training loop shared by every estimator.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::feature::{FieldSchema, SparseSample};
use crate::nn::graph::{batch_loss_and_grads, Objective, Workspace};
use crate::nn::{AdamConfig, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hidden widths; the input width comes from the schema and the head is
    /// always 2 logits.
    pub hidden: Vec<usize>,
    pub seed: u64,
    /// Reshuffle the training order every epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 512,
            epochs: 1,
            hidden: vec![200, 80],
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// What one training run fits.
pub(crate) struct TrainingSet<'a> {
    pub samples: Vec<&'a SparseSample>,
    pub weights: Option<Vec<f64>>,
}

pub(crate) fn init_store(
    schema: &FieldSchema,
    towers: usize,
    shared: bool,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ParamStore> {
    ParamStore::init(schema, &cfg.hidden, towers, shared, cfg.adam, rng)
}

/// Trains `store` in place; `rng` continues from the one used for init.
pub(crate) fn fit(
    store: &mut ParamStore,
    objective: Objective,
    set: &TrainingSet<'_>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let n = set.samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut ws = Workspace::default();
    let mut grads = store.zero_grads();
    let mut batch: Vec<&SparseSample> = Vec::with_capacity(cfg.batch_size);
    let mut weights: Vec<f64> = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(rng);
        }
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| set.samples[i]));
            let w = set.weights.as_ref().map(|all| {
                weights.clear();
                weights.extend(chunk.iter().map(|&i| all[i]));
                weights.as_slice()
            });
            grads.clear();
            let loss = batch_loss_and_grads(store, objective, &batch, w, &mut ws, &mut grads)?;
            store.apply(&grads);
            total += loss * chunk.len() as f64;
        }
        log::debug!("epoch {epoch}: mean loss {:.6}", total / n.max(1) as f64);
    }
    Ok(())
}

pub(crate) fn rng_for(cfg: &TrainConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed)
}
