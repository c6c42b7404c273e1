//! Parameter groups for one model: embedding tables, towers, Adam state.

use rand::Rng;

use super::adam::{Adam, AdamConfig, Moments};
use super::embedding::{EmbeddingGrad, EmbeddingTable};
use super::mlp::{MlpGrads, MlpTower};
use crate::error::{Error, Result};
use crate::feature::FieldSchema;

/// Embedding tables plus towers, where each tower reads one table. Several
/// towers may resolve to the same table index, which is how sharing works.
///
/// Flat parameter order (used by gradient checks and snapshots): tables in
/// index order, fields in schema order, rows row-major; then towers in index
/// order, each layer's weights followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    schema: FieldSchema,
    tables: Vec<EmbeddingTable>,
    towers: Vec<MlpTower>,
    tower_table: Vec<usize>,
    adam: Adam,
    table_moments: Vec<Vec<Moments>>,
    tower_moments: Vec<Vec<(Moments, Moments)>>,
}

impl ParamStore {
    /// Random init. Table 0 is drawn first, then every tower, then any extra
    /// tables, so a shared and an unshared store built from the same generator
    /// agree on everything they have in common.
    pub fn init<R: Rng + ?Sized>(
        schema: &FieldSchema,
        hidden: &[usize],
        n_towers: usize,
        shared: bool,
        adam: AdamConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(schema.input_width());
        dims.extend_from_slice(hidden);
        dims.push(2);
        let n_tables = if shared { 1 } else { n_towers };
        let mut tables = vec![EmbeddingTable::random(schema, rng)];
        let towers = (0..n_towers)
            .map(|_| MlpTower::glorot(&dims, rng))
            .collect::<Result<Vec<_>>>()?;
        for _ in 1..n_tables {
            tables.push(EmbeddingTable::random(schema, rng));
        }
        let tower_table = (0..n_towers).map(|k| if shared { 0 } else { k }).collect();
        Self::from_parts(schema.clone(), tables, towers, tower_table, adam)
    }

    pub fn from_parts(
        schema: FieldSchema,
        tables: Vec<EmbeddingTable>,
        towers: Vec<MlpTower>,
        tower_table: Vec<usize>,
        adam: AdamConfig,
    ) -> Result<Self> {
        if towers.is_empty() || towers.len() != tower_table.len() {
            return Err(Error::Shape("every tower needs exactly one table".into()));
        }
        if tower_table.iter().any(|&t| t >= tables.len()) {
            return Err(Error::Shape("tower refers to a missing table".into()));
        }
        for t in &tables {
            if t.schema() != &schema {
                return Err(Error::Shape("embedding table schema differs from store".into()));
            }
        }
        for tw in &towers {
            if tw.input_dim() != schema.input_width() {
                return Err(Error::Shape(format!(
                    "tower input {} != pooled width {}",
                    tw.input_dim(),
                    schema.input_width()
                )));
            }
        }
        let table_moments = tables
            .iter()
            .map(|t| (0..schema.field_count()).map(|f| Moments::zeros(t.field(f).len())).collect())
            .collect();
        let tower_moments = towers
            .iter()
            .map(|tw| {
                tw.layers()
                    .iter()
                    .map(|l| (Moments::zeros(l.weights.len()), Moments::zeros(l.bias.len())))
                    .collect()
            })
            .collect();
        Ok(Self {
            schema,
            tables,
            towers,
            tower_table,
            adam: Adam::new(adam),
            table_moments,
            tower_moments,
        })
    }

    pub fn schema(&self) -> &FieldSchema {
        &self.schema
    }

    pub fn tables(&self) -> &[EmbeddingTable] {
        &self.tables
    }

    pub fn towers(&self) -> &[MlpTower] {
        &self.towers
    }

    pub fn tower(&self, k: usize) -> &MlpTower {
        &self.towers[k]
    }

    pub fn tower_mut(&mut self, k: usize) -> &mut MlpTower {
        &mut self.towers[k]
    }

    pub fn tower_table_index(&self, k: usize) -> usize {
        self.tower_table[k]
    }

    pub fn tower_tables(&self) -> &[usize] {
        &self.tower_table
    }

    /// The embedding table tower `k` reads.
    pub fn table_for(&self, k: usize) -> &EmbeddingTable {
        &self.tables[self.tower_table[k]]
    }

    pub fn table_for_mut(&mut self, k: usize) -> &mut EmbeddingTable {
        let t = self.tower_table[k];
        &mut self.tables[t]
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn num_params(&self) -> usize {
        self.tables.iter().map(EmbeddingTable::num_params).sum::<usize>()
            + self.towers.iter().map(MlpTower::num_params).sum::<usize>()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(self.tables.iter().flat_map(|t| t.params()).copied());
        out.extend(self.towers.iter().flat_map(|t| t.params()).copied());
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_params()
            )));
        }
        let slots = self
            .tables
            .iter_mut()
            .flat_map(|t| t.params_mut())
            .chain(self.towers.iter_mut().flat_map(|t| t.params_mut()));
        for (p, &v) in slots.zip(values) {
            *p = v;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.flat_params().iter().all(|x| x.is_finite())
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            tables: self.tables.iter().map(|t| EmbeddingGrad::new(t.schema())).collect(),
            towers: self.towers.iter().map(MlpGrads::for_tower).collect(),
        }
    }

    /// One Adam step. Embedding rows not touched by `grads` are skipped.
    pub fn apply(&mut self, grads: &Grads) {
        self.adam.begin_step();
        for (k, tower) in self.towers.iter_mut().enumerate() {
            for (l, layer) in tower.layers_mut().iter_mut().enumerate() {
                let g = &grads.towers[k].layers[l];
                let (mw, mb) = &mut self.tower_moments[k][l];
                self.adam.update(&mut layer.weights, &g.weights, mw);
                self.adam.update(&mut layer.bias, &g.bias, mb);
            }
        }
        let dim = self.schema.embedding_dim();
        for (t, table) in self.tables.iter_mut().enumerate() {
            for f in 0..self.schema.field_count() {
                let g = &grads.tables[t];
                self.adam.update_rows(
                    table.field_mut(f),
                    g.field(f),
                    &mut self.table_moments[t][f],
                    dim,
                    g.touched_rows(f),
                );
            }
        }
    }
}

/// Gradients shaped like a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub tables: Vec<EmbeddingGrad>,
    pub towers: Vec<MlpGrads>,
}

impl Grads {
    pub fn clear(&mut self) {
        self.tables.iter_mut().for_each(EmbeddingGrad::clear);
        self.towers.iter_mut().for_each(MlpGrads::clear);
    }

    pub fn is_finite(&self) -> bool {
        self.tables.iter().all(EmbeddingGrad::is_finite)
            && self.towers.iter().all(MlpGrads::is_finite)
    }

    /// Same order as [`ParamStore::flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        self.tables
            .iter()
            .flat_map(|t| t.values())
            .chain(self.towers.iter().flat_map(|t| t.values()))
            .copied()
            .collect()
    }

    /// Mutable view in flat order; lets tests corrupt a single entry.
    pub fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tables
            .iter_mut()
            .flat_map(|t| t.values_mut())
            .chain(self.towers.iter_mut().flat_map(|t| t.values_mut()))
    }
}
