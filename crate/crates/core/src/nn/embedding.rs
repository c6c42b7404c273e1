//! Per-field embedding tables with sum pooling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::feature::{validate, FieldSchema, SparseSample, Violation};

/// Uniform init half-width for embedding entries.
pub const EMBEDDING_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    schema: FieldSchema,
    /// One `vocab x dim` row-major matrix per field.
    tables: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn zeros(schema: &FieldSchema) -> Self {
        let dim = schema.embedding_dim();
        let tables = schema.vocab_sizes().iter().map(|&v| vec![0.0; v * dim]).collect();
        Self {
            schema: schema.clone(),
            tables,
        }
    }

    pub fn random<R: Rng + ?Sized>(schema: &FieldSchema, rng: &mut R) -> Self {
        let mut t = Self::zeros(schema);
        for table in &mut t.tables {
            for w in table.iter_mut() {
                *w = rng.gen_range(-EMBEDDING_INIT_SCALE..=EMBEDDING_INIT_SCALE);
            }
        }
        t
    }

    pub fn schema(&self) -> &FieldSchema {
        &self.schema
    }

    pub fn dim(&self) -> usize {
        self.schema.embedding_dim()
    }

    pub fn field(&self, field: usize) -> &[f64] {
        &self.tables[field]
    }

    pub fn field_mut(&mut self, field: usize) -> &mut [f64] {
        &mut self.tables[field]
    }

    pub fn row(&self, field: usize, id: usize) -> &[f64] {
        let d = self.dim();
        &self.tables[field][id * d..(id + 1) * d]
    }

    pub fn row_mut(&mut self, field: usize, id: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.tables[field][id * d..(id + 1) * d]
    }

    pub fn num_params(&self) -> usize {
        self.tables.iter().map(Vec::len).sum()
    }

    /// Sum-pools each field's active rows into its slice of `out`; fields are
    /// concatenated in schema order and empty fields stay zero.
    pub fn embed_and_pool(&self, sample: &SparseSample, out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        if out.len() != self.schema.input_width() {
            return Err(Error::Shape(format!(
                "pool buffer has {} entries, expected {}",
                out.len(),
                self.schema.input_width()
            )));
        }
        match validate(sample, &self.schema) {
            Ok(()) | Err(Violation::ConversionWithoutClick) => {}
            Err(v) => return Err(Error::InvalidSample(v)),
        }
        out.fill(0.0);
        for feat in &sample.features {
            let f = feat.field as usize;
            let row = self.row(f, feat.id as usize);
            for (o, w) in out[f * d..(f + 1) * d].iter_mut().zip(row) {
                *o += w;
            }
        }
        Ok(())
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = &f64> {
        self.tables.iter().flatten()
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tables.iter_mut().flatten()
    }
}

/// Gradient of an [`EmbeddingTable`], dense storage plus a touched-row list so
/// that only rows seen in the batch are visited.
#[derive(Debug, Clone)]
pub struct EmbeddingGrad {
    dim: usize,
    grads: Vec<Vec<f64>>,
    touched_flag: Vec<Vec<bool>>,
    touched: Vec<Vec<u32>>,
}

impl EmbeddingGrad {
    pub fn new(schema: &FieldSchema) -> Self {
        let dim = schema.embedding_dim();
        Self {
            dim,
            grads: schema.vocab_sizes().iter().map(|&v| vec![0.0; v * dim]).collect(),
            touched_flag: schema.vocab_sizes().iter().map(|&v| vec![false; v]).collect(),
            touched: vec![Vec::new(); schema.field_count()],
        }
    }

    /// Adds the pooled-input gradient of one sample onto the rows it used.
    pub fn scatter(&mut self, sample: &SparseSample, d_input: &[f64]) {
        let d = self.dim;
        for feat in &sample.features {
            let f = feat.field as usize;
            let id = feat.id as usize;
            if !self.touched_flag[f][id] {
                self.touched_flag[f][id] = true;
                self.touched[f].push(feat.id);
            }
            let row = &mut self.grads[f][id * d..(id + 1) * d];
            for (g, x) in row.iter_mut().zip(&d_input[f * d..(f + 1) * d]) {
                *g += x;
            }
        }
    }

    pub fn touched_rows(&self, field: usize) -> &[u32] {
        &self.touched[field]
    }

    pub fn row(&self, field: usize, id: usize) -> &[f64] {
        &self.grads[field][id * self.dim..(id + 1) * self.dim]
    }

    pub fn field(&self, field: usize) -> &[f64] {
        &self.grads[field]
    }

    /// Zeroes the touched rows only.
    pub fn clear(&mut self) {
        let d = self.dim;
        for f in 0..self.grads.len() {
            for &id in &self.touched[f] {
                let id = id as usize;
                self.grads[f][id * d..(id + 1) * d].fill(0.0);
                self.touched_flag[f][id] = false;
            }
            self.touched[f].clear();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().enumerate().all(|(f, g)| {
            self.touched[f].iter().all(|&id| {
                let id = id as usize;
                g[id * self.dim..(id + 1) * self.dim].iter().all(|x| x.is_finite())
            })
        })
    }

    pub(crate) fn values(&self) -> impl Iterator<Item = &f64> {
        self.grads.iter().flatten()
    }

    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.grads.iter_mut().flatten()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::Feature;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schema() -> FieldSchema {
        FieldSchema::new(vec![5, 3, 7], 4).unwrap()
    }

    #[test]
    fn zero_table_pools_to_zero() {
        let t = EmbeddingTable::zeros(&schema());
        let s = SparseSample::new(0, vec![Feature::new(0, 1), Feature::new(2, 6)], false, false);
        let mut out = vec![1.0; 12];
        t.embed_and_pool(&s, &mut out).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn repeated_id_doubles_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = EmbeddingTable::random(&schema(), &mut rng);
        let s = SparseSample::new(0, vec![Feature::new(1, 2), Feature::new(1, 2)], false, false);
        let mut out = vec![0.0; 12];
        t.embed_and_pool(&s, &mut out).unwrap();
        for (k, &x) in out[4..8].iter().enumerate() {
            assert_eq!(x, 2.0 * t.row(1, 2)[k]);
        }
        assert!(out[..4].iter().chain(&out[8..]).all(|&x| x == 0.0));
    }

    #[test]
    fn out_of_range_id_is_error() {
        let t = EmbeddingTable::zeros(&schema());
        let s = SparseSample::new(0, vec![Feature::new(1, 3)], false, false);
        let mut out = vec![0.0; 12];
        assert!(t.embed_and_pool(&s, &mut out).is_err());
    }

    #[test]
    fn scatter_tracks_and_clears_rows() {
        let mut g = EmbeddingGrad::new(&schema());
        let s = SparseSample::new(0, vec![Feature::new(0, 4), Feature::new(0, 4)], false, false);
        let d: Vec<f64> = (0..12).map(|i| i as f64).collect();
        g.scatter(&s, &d);
        assert_eq!(g.touched_rows(0), &[4]);
        assert_eq!(g.row(0, 4), &[0.0, 2.0, 4.0, 6.0]);
        g.clear();
        assert!(g.touched_rows(0).is_empty());
        assert!(g.values().all(|&x| x == 0.0));
    }
}
