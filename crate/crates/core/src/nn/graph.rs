//! The two loss graphs every estimator trains through, with exact
//! reverse-mode gradients over one minibatch.

use super::embedding::EmbeddingTable;
use super::loss::{cross_entropy, cross_entropy_grad};
use super::mlp::BatchCache;
use super::params::{Grads, ParamStore};
use crate::error::{Error, Result};
use crate::feature::SparseSample;

/// Which label a single-tower objective fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    /// `y`.
    Click,
    /// `y & z`. On clicked samples this is just `z`.
    Conversion,
}

impl Label {
    pub fn of(self, s: &SparseSample) -> bool {
        match self {
            Label::Click => s.y,
            Label::Conversion => s.ctcvr_label(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Tower 0 alone, cross-entropy against `label`. With per-sample weights
    /// the loss is `sum(w * CE) / sum(w)`.
    Single { label: Label },
    /// Tower 0 is the CTR network, tower 1 the CVR network:
    /// `mean[CE(y, pctr) + CE(y & z, pctr * pcvr)]`.
    Entire {
        #[doc(hidden)]
        ctcvr_term: bool,
    },
}

impl Objective {
    pub const ESMM: Objective = Objective::Entire { ctcvr_term: true };

    pub fn towers(&self) -> usize {
        match self {
            Objective::Single { .. } => 1,
            Objective::Entire { .. } => 2,
        }
    }
}

/// Reusable buffers for forward/backward over minibatches.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    pooled: Vec<Vec<f64>>,
    caches: Vec<BatchCache>,
    d_prob: Vec<Vec<f64>>,
    d_input: Vec<f64>,
}

impl Workspace {
    pub fn cache(&self, tower: usize) -> &BatchCache {
        &self.caches[tower]
    }

    pub fn probs(&self, tower: usize) -> &[f64] {
        &self.caches[tower].probs
    }
}

fn pool_batch(table: &EmbeddingTable, batch: &[&SparseSample], out: &mut Vec<f64>) -> Result<()> {
    let width = table.schema().input_width();
    out.clear();
    out.resize(batch.len() * width, 0.0);
    for (s, chunk) in batch.iter().zip(out.chunks_exact_mut(width)) {
        table.embed_and_pool(s, chunk)?;
    }
    Ok(())
}

/// Runs the towers needed by `towers` over `batch`; probabilities are left in
/// the workspace caches.
pub fn forward(
    store: &ParamStore,
    towers: usize,
    batch: &[&SparseSample],
    ws: &mut Workspace,
) -> Result<()> {
    let n_tables = store.tables().len();
    ws.pooled.resize_with(n_tables, Vec::new);
    ws.caches.resize_with(towers, BatchCache::default);
    let mut pooled_done = vec![false; n_tables];
    for k in 0..towers {
        let t = store.tower_table_index(k);
        if !pooled_done[t] {
            pool_batch(&store.tables()[t], batch, &mut ws.pooled[t])?;
            pooled_done[t] = true;
        }
        store
            .tower(k)
            .forward_batch(&ws.pooled[t], batch.len(), &mut ws.caches[k])?;
    }
    Ok(())
}

/// Loss of the cached forward pass together with `dL/dp` per tower.
fn loss_and_dprob(
    objective: Objective,
    batch: &[&SparseSample],
    weights: Option<&[f64]>,
    ws: &mut Workspace,
) -> f64 {
    let n = batch.len();
    ws.d_prob.resize_with(objective.towers(), Vec::new);
    match objective {
        Objective::Single { label } => {
            let p = &ws.caches[0].probs;
            let total: f64 = weights.map_or(n as f64, |w| w.iter().sum());
            let d = &mut ws.d_prob[0];
            d.clear();
            let mut loss = 0.0;
            for (i, s) in batch.iter().enumerate() {
                let w = weights.map_or(1.0, |w| w[i]) / total;
                let t = label.of(s);
                loss += w * cross_entropy(t, p[i]);
                d.push(w * cross_entropy_grad(t, p[i]));
            }
            loss
        }
        Objective::Entire { ctcvr_term } => {
            let inv = 1.0 / n as f64;
            let (dp, dq) = {
                let (a, b) = ws.d_prob.split_at_mut(1);
                (&mut a[0], &mut b[0])
            };
            dp.clear();
            dq.clear();
            let p = &ws.caches[0].probs;
            let q = &ws.caches[1].probs;
            let mut loss = 0.0;
            for (i, s) in batch.iter().enumerate() {
                loss += cross_entropy(s.y, p[i]);
                let mut gp = cross_entropy_grad(s.y, p[i]);
                let mut gq = 0.0;
                if ctcvr_term {
                    let r = p[i] * q[i];
                    let t = s.ctcvr_label();
                    loss += cross_entropy(t, r);
                    let gr = cross_entropy_grad(t, r);
                    gp += gr * q[i];
                    gq = gr * p[i];
                }
                dp.push(gp * inv);
                dq.push(gq * inv);
            }
            loss * inv
        }
    }
}

/// Forward + loss only.
pub fn batch_loss(
    store: &ParamStore,
    objective: Objective,
    batch: &[&SparseSample],
    weights: Option<&[f64]>,
    ws: &mut Workspace,
) -> Result<f64> {
    forward(store, objective.towers(), batch, ws)?;
    Ok(loss_and_dprob(objective, batch, weights, ws))
}

/// Forward, loss, and backward. Gradients are accumulated into `grads`.
pub fn batch_loss_and_grads(
    store: &ParamStore,
    objective: Objective,
    batch: &[&SparseSample],
    weights: Option<&[f64]>,
    ws: &mut Workspace,
    grads: &mut Grads,
) -> Result<f64> {
    if let Some(w) = weights {
        assert_eq!(w.len(), batch.len(), "one weight per sample");
    }
    let loss = batch_loss(store, objective, batch, weights, ws)?;
    let width = store.schema().input_width();
    for k in 0..objective.towers() {
        store.tower(k).backward_batch(
            &ws.caches[k],
            &ws.d_prob[k],
            &mut grads.towers[k],
            Some(&mut ws.d_input),
        )?;
        let table_grad = &mut grads.tables[store.tower_table_index(k)];
        for (s, row) in batch.iter().zip(ws.d_input.chunks_exact(width)) {
            table_grad.scatter(s, row);
        }
    }
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    Ok(loss)
}
