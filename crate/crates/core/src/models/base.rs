use std::fmt;

use super::train::{fit, init_store, rng_for, TrainConfig, TrainingSet};
use super::{CvrPredictor, PREDICT_CHUNK};
use crate::error::{Error, Result};
use crate::feature::{Dataset, FieldSchema, SparseSample};
use crate::nn::graph::{forward, Label, Objective, Workspace};
use crate::nn::ParamStore;

/// What a single-tower model was fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    /// Clicked impressions, label `z`.
    CvrOnClicked,
    /// All impressions, label `y`.
    CtrOnAll,
    /// All impressions, label `y & z`.
    CtcvrOnAll,
}

impl Role {
    pub fn label(self) -> Label {
        match self {
            Role::CtrOnAll => Label::Click,
            Role::CvrOnClicked | Role::CtcvrOnAll => Label::Conversion,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::CvrOnClicked => "cvr-on-clicked",
            Role::CtrOnAll => "ctr-on-all",
            Role::CtcvrOnAll => "ctcvr-on-all",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Embedding + MLP classifier with its own tables.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub role: Role,
    pub store: ParamStore,
}

impl BaseModel {
    pub fn predict(&self, samples: &[SparseSample]) -> Result<Vec<f64>> {
        let mut ws = Workspace::default();
        let mut out = Vec::with_capacity(samples.len());
        let mut batch: Vec<&SparseSample> = Vec::with_capacity(PREDICT_CHUNK);
        for chunk in samples.chunks(PREDICT_CHUNK) {
            batch.clear();
            batch.extend(chunk);
            forward(&self.store, 1, &batch, &mut ws)?;
            out.extend_from_slice(ws.probs(0));
        }
        Ok(out)
    }

    pub fn predict_one(&self, sample: &SparseSample) -> Result<f64> {
        Ok(self.predict(std::slice::from_ref(sample))?[0])
    }
}

impl CvrPredictor for BaseModel {
    fn predict_cvr(&self, samples: &[SparseSample]) -> Result<Vec<f64>> {
        self.predict(samples)
    }
}

/// Trains a single-tower model on an explicit sample list. Used by BASE and
/// by the sampling / reweighting baselines.
pub fn train_on(
    schema: &FieldSchema,
    samples: Vec<&SparseSample>,
    weights: Option<Vec<f64>>,
    role: Role,
    cfg: &TrainConfig,
) -> Result<BaseModel> {
    if let Some(w) = &weights {
        if w.len() != samples.len() {
            return Err(Error::Shape("one weight per training sample".into()));
        }
    }
    let mut rng = rng_for(cfg);
    let mut store = init_store(schema, 1, true, cfg, &mut rng)?;
    let set = TrainingSet { samples, weights };
    fit(
        &mut store,
        Objective::Single { label: role.label() },
        &set,
        cfg,
        &mut rng,
    )?;
    Ok(BaseModel { role, store })
}

/// BASE: fitted on clicked impressions with label `z`.
pub fn train_base_cvr(d: &Dataset, cfg: &TrainConfig) -> Result<BaseModel> {
    let clicked: Vec<&SparseSample> = d.samples().iter().filter(|s| s.y).collect();
    if clicked.is_empty() {
        return Err(Error::NoClickedSamples);
    }
    train_on(d.schema(), clicked, None, Role::CvrOnClicked, cfg)
}

/// CTR (label `y`) or CTCVR (label `y & z`) network over all impressions.
pub fn train_independent(d: &Dataset, role: Role, cfg: &TrainConfig) -> Result<BaseModel> {
    if role == Role::CvrOnClicked {
        return Err(Error::Config("use train_base_cvr for the clicked-subspace role".into()));
    }
    if d.is_empty() {
        return Err(Error::InsufficientData);
    }
    train_on(d.schema(), d.samples().iter().collect(), None, role, cfg)
}
