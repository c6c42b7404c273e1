use super::train::{fit, init_store, rng_for, TrainConfig, TrainingSet};
use super::{CvrPredictor, ModelOutput, PREDICT_CHUNK};
use crate::error::{Error, Result};
use crate::feature::{Dataset, SparseSample};
use crate::nn::graph::{forward, Objective, Workspace};
use crate::nn::{EmbeddingTable, ParamStore};

pub(crate) const CTR_TOWER: usize = 0;
pub(crate) const CVR_TOWER: usize = 1;

/// CTR tower and CVR tower whose product is supervised as pCTCVR. With
/// `shared` both towers read one embedding table (ESMM); otherwise each has
/// its own (ESMM-NS).
#[derive(Debug, Clone, PartialEq)]
pub struct EsmmModel {
    pub store: ParamStore,
    pub shared: bool,
}

impl EsmmModel {
    pub fn ctr_embeddings(&self) -> &EmbeddingTable {
        self.store.table_for(CTR_TOWER)
    }

    pub fn cvr_embeddings(&self) -> &EmbeddingTable {
        self.store.table_for(CVR_TOWER)
    }

    pub fn forward(&self, sample: &SparseSample) -> Result<ModelOutput> {
        Ok(self.predict(std::slice::from_ref(sample))?[0])
    }

    pub fn predict(&self, samples: &[SparseSample]) -> Result<Vec<ModelOutput>> {
        let mut ws = Workspace::default();
        let mut out = Vec::with_capacity(samples.len());
        let mut batch: Vec<&SparseSample> = Vec::with_capacity(PREDICT_CHUNK);
        for chunk in samples.chunks(PREDICT_CHUNK) {
            batch.clear();
            batch.extend(chunk);
            forward(&self.store, 2, &batch, &mut ws)?;
            out.extend(
                ws.probs(CTR_TOWER)
                    .iter()
                    .zip(ws.probs(CVR_TOWER))
                    .map(|(&p, &q)| ModelOutput::from_factors(p, q)),
            );
        }
        Ok(out)
    }
}

impl CvrPredictor for EsmmModel {
    fn predict_cvr(&self, samples: &[SparseSample]) -> Result<Vec<f64>> {
        Ok(self.predict(samples)?.into_iter().map(|o| o.pcvr).collect())
    }
}

/// ESMM (`sharing = true`) or ESMM-NS over all impressions of `d`.
pub fn train_esmm(d: &Dataset, sharing: bool, cfg: &TrainConfig) -> Result<EsmmModel> {
    train_esmm_with(d, sharing, Objective::ESMM, cfg)
}

/// [`train_esmm`] with an explicit objective; lets tests drop the CTCVR term.
#[doc(hidden)]
pub fn train_esmm_with(
    d: &Dataset,
    sharing: bool,
    objective: Objective,
    cfg: &TrainConfig,
) -> Result<EsmmModel> {
    if !matches!(objective, Objective::Entire { .. }) {
        return Err(Error::Config("ESMM trains the two-tower objective".into()));
    }
    if d.is_empty() {
        return Err(Error::InsufficientData);
    }
    let mut rng = rng_for(cfg);
    let mut store = init_store(d.schema(), 2, sharing, cfg, &mut rng)?;
    let set = TrainingSet {
        samples: d.samples().iter().collect(),
        weights: None,
    };
    fit(&mut store, objective, &set, cfg, &mut rng)?;
    Ok(EsmmModel {
        store,
        shared: sharing,
    })
}
