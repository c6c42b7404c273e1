//! Competitor strategies that alter what the single-tower CVR trainer sees:
//! AMAN negative sampling, positive oversampling and inverse-pCTR weighting.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::feature::{Dataset, SparseSample};
use crate::models::{train_on, BaseModel, Role, TrainConfig};

pub const AMAN_RATES: [f64; 4] = [0.1, 0.2, 0.5, 1.0];
pub const OVERSAMPLE_FACTORS: [usize; 4] = [2, 3, 5, 10];
pub const DEFAULT_WEIGHT_CAP: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplingMethod {
    Aman,
    Oversample,
    Unbias,
}

impl SamplingMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplingMethod::Aman => "AMAN",
            SamplingMethod::Oversample => "OVERSAMPLE",
            SamplingMethod::Unbias => "UNBIAS",
        }
    }
}

impl fmt::Display for SamplingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "AMAN" => Ok(SamplingMethod::Aman),
            "OVERSAMPLE" => Ok(SamplingMethod::Oversample),
            "UNBIAS" => Ok(SamplingMethod::Unbias),
            _ => Err(Error::Config(format!("unknown sampling method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub method: SamplingMethod,
    /// AMAN: fraction of un-clicked impressions added. OVERSAMPLE: copies
    /// per positive. Ignored by UNBIAS.
    pub rate: f64,
    pub weight_cap: f64,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        match self.method {
            SamplingMethod::Aman if !(self.rate > 0.0 && self.rate <= 1.0) => {
                Err(Error::Config("AMAN rate must lie in (0, 1]".into()))
            }
            SamplingMethod::Oversample if !(self.rate >= 1.0 && self.rate.fract() == 0.0) => {
                Err(Error::Config("oversampling factor must be an integer >= 1".into()))
            }
            SamplingMethod::Unbias if !(self.weight_cap >= 1.0) => {
                Err(Error::Config("weight cap must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Whether `rate` is one of the searched grid values for the method.
    pub fn on_grid(&self) -> bool {
        match self.method {
            SamplingMethod::Aman => AMAN_RATES.contains(&self.rate),
            SamplingMethod::Oversample => OVERSAMPLE_FACTORS.iter().any(|&k| k as f64 == self.rate),
            SamplingMethod::Unbias => true,
        }
    }
}

/// Clicked impressions plus `round(rate * pool)` un-clicked ones drawn
/// without replacement. Time order is kept.
pub fn aman_augment(d: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config("AMAN rate must lie in (0, 1]".into()));
    }
    let unclicked: Vec<usize> = (0..d.len()).filter(|&i| !d.samples()[i].y).collect();
    let take = (rate * unclicked.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; d.len()];
    for (i, s) in d.samples().iter().enumerate() {
        keep[i] = s.y;
    }
    for j in index::sample(&mut rng, unclicked.len(), take) {
        keep[unclicked[j]] = true;
    }
    Ok(d.select(|i| keep[i]))
}

/// Every `z = 1` sample repeated `k` times, adjacent to the original so the
/// result stays time-ordered. Training order is randomized by the trainer.
pub fn oversample_positives(d_clicked: &Dataset, k: usize) -> Result<Dataset> {
    if k == 0 {
        return Err(Error::Config("oversampling factor must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(d_clicked.len() + (k - 1) * d_clicked.conversion_count());
    for s in d_clicked.samples() {
        let copies = if s.z { k } else { 1 };
        out.extend(std::iter::repeat(s).take(copies).cloned());
    }
    Ok(Dataset::from_parts_unchecked(d_clicked.schema().clone(), out))
}

pub fn unbias_weight(pctr: f64, cap: f64) -> f64 {
    (1.0 / pctr).min(cap)
}

/// `min(1 / pctr(x), cap)` for each sample, pCTR from `ctr_model`.
pub fn unbias_weights(d_clicked: &Dataset, ctr_model: &BaseModel, cap: f64) -> Result<Vec<f64>> {
    if !(cap >= 1.0) {
        return Err(Error::Config("weight cap must be at least 1".into()));
    }
    Ok(ctr_model
        .predict(d_clicked.samples())?
        .into_iter()
        .map(|p| unbias_weight(p, cap))
        .collect())
}

fn clicked_or_err(d: &Dataset) -> Result<Vec<&SparseSample>> {
    let clicked: Vec<&SparseSample> = d.samples().iter().filter(|s| s.y).collect();
    if clicked.is_empty() {
        return Err(Error::NoClickedSamples);
    }
    Ok(clicked)
}

/// BASE trainer on the AMAN-augmented training set, label `z`.
pub fn train_aman(d: &Dataset, rate: f64, seed: u64, cfg: &TrainConfig) -> Result<BaseModel> {
    let set = aman_augment(d, rate, seed)?;
    train_on(d.schema(), set.samples().iter().collect(), None, Role::CvrOnClicked, cfg)
}

pub fn train_oversample(d: &Dataset, k: usize, cfg: &TrainConfig) -> Result<BaseModel> {
    clicked_or_err(d)?;
    let set = oversample_positives(&d.clicked_subset(), k)?;
    train_on(d.schema(), set.samples().iter().collect(), None, Role::CvrOnClicked, cfg)
}

/// BASE trainer on clicked samples with each CE term weighted by
/// [`unbias_weight`].
pub fn train_unbias(d: &Dataset, ctr_model: &BaseModel, cap: f64, cfg: &TrainConfig) -> Result<BaseModel> {
    clicked_or_err(d)?;
    let clicked = d.clicked_subset();
    let weights = unbias_weights(&clicked, ctr_model, cap)?;
    train_on(
        d.schema(),
        clicked.samples().iter().collect(),
        Some(weights),
        Role::CvrOnClicked,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::{Feature, FieldSchema};

    fn log(clicked: usize, converted: usize, unclicked: usize) -> Dataset {
        let schema = FieldSchema::uniform(1, 10, 2).unwrap();
        let mut samples = Vec::new();
        for t in 0..clicked + unclicked {
            let y = t < clicked;
            let z = t < converted;
            samples.push(SparseSample::new(t as i64, vec![Feature::new(0, (t % 10) as u32)], y, z));
        }
        // Interleave so clicked and un-clicked share the timeline.
        samples.sort_by_key(|s| (s.timestamp % 7, s.timestamp));
        for (t, s) in samples.iter_mut().enumerate() {
            s.timestamp = t as i64;
        }
        Dataset::new(schema, samples).unwrap()
    }

    #[test]
    fn aman_counts() {
        let d = log(10, 2, 100);
        let all = aman_augment(&d, 1.0, 0).unwrap();
        assert_eq!(all.len(), 110);
        let some = aman_augment(&d, 0.2, 0).unwrap();
        assert_eq!(some.len(), 30);
        assert_eq!(some.click_count(), 10);
        assert!(some.samples().iter().filter(|s| !s.y).all(|s| !s.z));
        assert_eq!(some, aman_augment(&d, 0.2, 0).unwrap());
        assert_ne!(some, aman_augment(&d, 0.2, 1).unwrap());
        assert!(aman_augment(&d, 0.0, 0).is_err());
        assert!(aman_augment(&d, 1.5, 0).is_err());
    }

    #[test]
    fn oversample_counts() {
        let d = log(100, 5, 0);
        assert_eq!(oversample_positives(&d, 1).unwrap(), d);
        let o = oversample_positives(&d, 3).unwrap();
        assert_eq!(o.len(), 110);
        assert_eq!(o.conversion_count(), 15);
        assert!((o.conversion_count() as f64 / o.len() as f64 - 0.13636).abs() < 1e-4);
        assert!(oversample_positives(&d, 0).is_err());
    }

    #[test]
    fn weight_examples() {
        assert!((unbias_weight(0.04, 1000.0) - 25.0).abs() < 1e-12);
        assert_eq!(unbias_weight(1e-5, 1000.0), 1000.0);
        assert_eq!(unbias_weight(1.0, 1000.0), 1.0);
    }

    #[test]
    fn config_validation() {
        let c = SamplingConfig {
            method: SamplingMethod::Oversample,
            rate: 3.0,
            weight_cap: DEFAULT_WEIGHT_CAP,
            seed: 0,
        };
        assert!(c.validate().is_ok() && c.on_grid());
        assert!(SamplingConfig { rate: 2.5, ..c }.validate().is_err());
        assert!(!SamplingConfig { rate: 4.0, ..c }.on_grid());
        let a = SamplingConfig {
            method: SamplingMethod::Aman,
            rate: 0.2,
            ..c
        };
        assert!(a.validate().is_ok() && a.on_grid());
        assert_eq!("aman".parse::<SamplingMethod>().unwrap(), SamplingMethod::Aman);
    }
}
