//! Sparse multi-field impressions with sequential click -> conversion labels.
//!
//! An impression carries a handful of `field:id` tokens. A field may hold zero,
//! one or several ids (multi-hot); an empty field pools to a zero embedding.

use std::fmt;

use crate::error::{Error, Result};

/// Default embedding width per field.
pub const DEFAULT_EMBEDDING_DIM: usize = 18;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FieldSchema {
    vocab_sizes: Vec<usize>,
    embedding_dim: usize,
}

impl FieldSchema {
    pub fn new(vocab_sizes: Vec<usize>, embedding_dim: usize) -> Result<Self> {
        if vocab_sizes.is_empty() {
            return Err(Error::Config("schema needs at least one field".into()));
        }
        if let Some(f) = vocab_sizes.iter().position(|&v| v == 0) {
            return Err(Error::Config(format!("field {f} has an empty vocabulary")));
        }
        if embedding_dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        Ok(Self {
            vocab_sizes,
            embedding_dim,
        })
    }

    /// `field_count` fields that all share one vocabulary size.
    pub fn uniform(field_count: usize, vocab_size: usize, embedding_dim: usize) -> Result<Self> {
        Self::new(vec![vocab_size; field_count], embedding_dim)
    }

    pub fn field_count(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn vocab_sizes(&self) -> &[usize] {
        &self.vocab_sizes
    }

    pub fn vocab_size(&self, field: usize) -> usize {
        self.vocab_sizes[field]
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    /// Width of the pooled, concatenated embedding vector fed to the MLP.
    pub fn input_width(&self) -> usize {
        self.embedding_dim * self.vocab_sizes.len()
    }
}

/// One active feature id inside a field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Feature {
    pub field: u32,
    pub id: u32,
}

impl Feature {
    pub fn new(field: u32, id: u32) -> Self {
        Self { field, id }
    }
}

/// One logged impression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseSample {
    pub timestamp: i64,
    /// Active tokens in logged order. Several tokens may share a field.
    pub features: Vec<Feature>,
    /// Click label.
    pub y: bool,
    /// Conversion label. Never set without `y`.
    pub z: bool,
}

impl SparseSample {
    pub fn new(timestamp: i64, features: Vec<Feature>, y: bool, z: bool) -> Self {
        Self {
            timestamp,
            features,
            y,
            z,
        }
    }

    /// Ids active in `field`, in logged order.
    pub fn field_ids(&self, field: usize) -> impl Iterator<Item = u32> + '_ {
        self.features
            .iter()
            .filter(move |f| f.field as usize == field)
            .map(|f| f.id)
    }

    /// Label of the click-and-convert task, `y & z`.
    pub fn ctcvr_label(&self) -> bool {
        self.y && self.z
    }
}

/// The first rule a sample breaks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ConversionWithoutClick,
    FieldOutOfRange { field: usize, field_count: usize },
    IdOutOfRange { field: usize, id: u32, vocab_size: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ConversionWithoutClick => write!(f, "conversion without click"),
            Violation::FieldOutOfRange { field, field_count } => {
                write!(f, "field {field} out of range (schema has {field_count} fields)")
            }
            Violation::IdOutOfRange {
                field,
                id,
                vocab_size,
            } => write!(
                f,
                "id out of range in field {field} (id {id}, vocab size {vocab_size})"
            ),
        }
    }
}

impl std::error::Error for Violation {}

pub fn validate(sample: &SparseSample, schema: &FieldSchema) -> Result<(), Violation> {
    if sample.z && !sample.y {
        return Err(Violation::ConversionWithoutClick);
    }
    for feat in &sample.features {
        let field = feat.field as usize;
        if field >= schema.field_count() {
            return Err(Violation::FieldOutOfRange {
                field,
                field_count: schema.field_count(),
            });
        }
        let vocab_size = schema.vocab_size(field);
        if feat.id as usize >= vocab_size {
            return Err(Violation::IdOutOfRange {
                field,
                id: feat.id,
                vocab_size,
            });
        }
    }
    Ok(())
}

/// A time-ordered collection of impressions that all conform to one schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    schema: FieldSchema,
    samples: Vec<SparseSample>,
}

impl Dataset {
    pub fn new(schema: FieldSchema, samples: Vec<SparseSample>) -> Result<Self> {
        for s in &samples {
            validate(s, &schema).map_err(Error::InvalidSample)?;
        }
        if let Some(i) = samples
            .windows(2)
            .position(|w| w[1].timestamp < w[0].timestamp)
        {
            return Err(Error::Unsorted { index: i + 1 });
        }
        Ok(Self { schema, samples })
    }

    pub fn empty(schema: FieldSchema) -> Self {
        Self {
            schema,
            samples: Vec::new(),
        }
    }

    /// Skips validation; callers guarantee the invariants.
    pub(crate) fn from_parts_unchecked(schema: FieldSchema, samples: Vec<SparseSample>) -> Self {
        debug_assert!(samples.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        Self { schema, samples }
    }

    pub fn schema(&self) -> &FieldSchema {
        &self.schema
    }

    pub fn samples(&self) -> &[SparseSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<SparseSample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn click_count(&self) -> usize {
        self.samples.iter().filter(|s| s.y).count()
    }

    pub fn conversion_count(&self) -> usize {
        self.samples.iter().filter(|s| s.z).count()
    }

    /// Clicked impressions only, order preserved.
    pub fn clicked_subset(&self) -> Dataset {
        let samples = self.samples.iter().filter(|s| s.y).cloned().collect();
        Dataset::from_parts_unchecked(self.schema.clone(), samples)
    }

    /// First `floor(N/2)` samples train, the rest test.
    pub fn time_split(&self) -> Result<(Dataset, Dataset)> {
        if self.samples.len() < 2 {
            return Err(Error::InsufficientData);
        }
        let mid = self.samples.len() / 2;
        let (a, b) = self.samples.split_at(mid);
        Ok((
            Dataset::from_parts_unchecked(self.schema.clone(), a.to_vec()),
            Dataset::from_parts_unchecked(self.schema.clone(), b.to_vec()),
        ))
    }

    /// Keeps the samples whose index is flagged, order preserved.
    pub(crate) fn select(&self, keep: impl Fn(usize) -> bool) -> Dataset {
        let samples = self
            .samples
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, s)| s.clone())
            .collect();
        Dataset::from_parts_unchecked(self.schema.clone(), samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> FieldSchema {
        FieldSchema::new(vec![4, 4, 4, 5], 2).unwrap()
    }

    fn sample(ts: i64, y: bool, z: bool) -> SparseSample {
        SparseSample::new(ts, vec![Feature::new(0, 1), Feature::new(3, 4)], y, z)
    }

    #[test]
    fn schema_rejects_degenerate_shapes() {
        assert!(FieldSchema::new(vec![], 4).is_err());
        assert!(FieldSchema::new(vec![3, 0], 4).is_err());
        assert!(FieldSchema::new(vec![3], 0).is_err());
        assert_eq!(FieldSchema::uniform(20, 500, 18).unwrap().input_width(), 360);
    }

    #[test]
    fn validate_accepts_clicked_conversion() {
        assert_eq!(validate(&sample(0, true, true), &schema()), Ok(()));
    }

    #[test]
    fn validate_rejects_conversion_without_click() {
        let err = validate(&sample(0, false, true), &schema()).unwrap_err();
        assert_eq!(err, Violation::ConversionWithoutClick);
        assert_eq!(err.to_string(), "conversion without click");
    }

    #[test]
    fn validate_rejects_id_at_vocab_boundary() {
        let s = SparseSample::new(0, vec![Feature::new(3, 5)], false, false);
        let err = validate(&s, &schema()).unwrap_err();
        assert!(matches!(err, Violation::IdOutOfRange { field: 3, .. }));
        assert!(err.to_string().starts_with("id out of range in field 3"));
    }

    #[test]
    fn validate_rejects_unknown_field() {
        let s = SparseSample::new(0, vec![Feature::new(4, 0)], false, false);
        assert!(matches!(
            validate(&s, &schema()),
            Err(Violation::FieldOutOfRange { field: 4, .. })
        ));
    }

    #[test]
    fn dataset_rejects_unsorted() {
        let err = Dataset::new(schema(), vec![sample(2, false, false), sample(1, false, false)])
            .unwrap_err();
        assert!(matches!(err, Error::Unsorted { index: 1 }));
    }

    #[test]
    fn clicked_subset_filters_in_order() {
        let samples: Vec<_> = (0..10).map(|t| sample(t, t % 3 == 0 && t > 0, false)).collect();
        let d = Dataset::new(schema(), samples).unwrap();
        let c = d.clicked_subset();
        assert_eq!(c.len(), 3);
        let ts: Vec<_> = c.samples().iter().map(|s| s.timestamp).collect();
        assert_eq!(ts, vec![3, 6, 9]);
        assert_eq!(c.clicked_subset(), c);
    }

    #[test]
    fn clicked_subset_of_unclicked_is_empty() {
        let d = Dataset::new(schema(), (0..5).map(|t| sample(t, false, false)).collect()).unwrap();
        assert!(d.clicked_subset().is_empty());
    }

    #[test]
    fn time_split_sizes() {
        for (n, expect) in [(10, (5, 5)), (11, (5, 6)), (2, (1, 1))] {
            let d = Dataset::new(schema(), (0..n).map(|t| sample(t, false, false)).collect())
                .unwrap();
            let (a, b) = d.time_split().unwrap();
            assert_eq!((a.len(), b.len()), expect);
        }
        let one = Dataset::new(schema(), vec![sample(0, false, false)]).unwrap();
        assert!(matches!(one.time_split(), Err(Error::InsufficientData)));
    }

    #[test]
    fn multi_hot_field_ids() {
        let s = SparseSample::new(
            0,
            vec![Feature::new(1, 2), Feature::new(0, 1), Feature::new(1, 2)],
            false,
            false,
        );
        assert_eq!(s.field_ids(1).collect::<Vec<_>>(), vec![2, 2]);
        assert_eq!(s.field_ids(2).count(), 0);
    }
}
