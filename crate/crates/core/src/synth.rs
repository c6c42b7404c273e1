//! Synthetic impression -> click -> conversion world with known ground truth.
//!
//! Each field holds one hidden click weight and one hidden "independent"
//! conversion weight per id. For an impression `x`:
//!
//! ```text
//! s_click(x) = sum over active ids of click weights
//! s_indep(x) = sum over active ids of independent weights
//! true_pctr  = sigmoid(s_click + b_ctr)
//! true_pcvr  = sigmoid(rho * s_click + (1 - rho) * s_indep + b_cvr)
//! ```
//!
//! `rho` sets how strongly conversion propensity follows click propensity,
//! and therefore how unrepresentative the clicked subspace is. Offsets are
//! calibrated so the mean CTR and the mean CVR among clicks hit targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};

use crate::error::{Error, Result};
use crate::feature::{Dataset, Feature, FieldSchema, SparseSample};
use crate::metrics::{auc, spearman};
use crate::models::CvrPredictor;
use crate::nn::mlp::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Popularity {
    /// Id ranks drawn from Zipf with this exponent.
    Zipf(f64),
    Uniform,
}

/// Knobs of a synthetic world.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub field_count: usize,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub target_ctr: f64,
    /// Conversion rate among clicked impressions.
    pub target_cvr: f64,
    pub rho: f64,
    pub popularity: Popularity,
    /// Standard deviation of the summed click score (and of the summed
    /// independent score) before offsets.
    pub score_scale: f64,
    pub probe_n: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            field_count: 20,
            vocab_size: 500,
            embedding_dim: 18,
            target_ctr: 0.04,
            target_cvr: 0.005,
            rho: 0.8,
            popularity: Popularity::Zipf(1.1),
            score_scale: 1.5,
            probe_n: 100_000,
        }
    }
}

impl WorldConfig {
    pub fn schema(&self) -> Result<FieldSchema> {
        FieldSchema::uniform(self.field_count, self.vocab_size, self.embedding_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x < 1.0;
        if !in_unit(self.target_ctr) || !in_unit(self.target_cvr) {
            return Err(Error::Config("rate targets must lie strictly inside (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config("rho must lie in [0, 1]".into()));
        }
        if !(self.score_scale >= 0.0 && self.score_scale.is_finite()) {
            return Err(Error::Config("score scale must be finite and non-negative".into()));
        }
        if let Popularity::Zipf(s) = self.popularity {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config("zipf exponent must be positive".into()));
            }
        }
        if self.probe_n == 0 {
            return Err(Error::Config("probe size must be positive".into()));
        }
        Ok(())
    }
}

/// True probabilities of one generated impression. Kept out of the dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truth {
    pub pctr: f64,
    pub pcvr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthModel {
    schema: FieldSchema,
    click_weights: Vec<Vec<f64>>,
    indep_weights: Vec<Vec<f64>>,
    pub rho: f64,
    pub b_ctr: f64,
    pub b_cvr: f64,
    pub popularity: Popularity,
}

impl GroundTruthModel {
    /// Hidden weights drawn from `seed`, offsets left at zero.
    pub fn uncalibrated(cfg: &WorldConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let schema = cfg.schema()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = cfg.score_scale / (cfg.field_count as f64).sqrt();
        let normal = Normal::new(0.0, sd).map_err(|e| Error::Config(e.to_string()))?;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            schema
                .vocab_sizes()
                .iter()
                .map(|&v| (0..v).map(|_| normal.sample(rng)).collect())
                .collect()
        };
        let click_weights = draw(&mut rng);
        let indep_weights = draw(&mut rng);
        Ok(Self {
            schema,
            click_weights,
            indep_weights,
            rho: cfg.rho,
            b_ctr: 0.0,
            b_cvr: 0.0,
            popularity: cfg.popularity,
        })
    }

    /// Builds from explicit weights; lets tests pin exact worlds.
    pub fn from_weights(
        schema: FieldSchema,
        click_weights: Vec<Vec<f64>>,
        indep_weights: Vec<Vec<f64>>,
        rho: f64,
        popularity: Popularity,
    ) -> Result<Self> {
        let fits = |w: &Vec<Vec<f64>>| {
            w.len() == schema.field_count()
                && w.iter().zip(schema.vocab_sizes()).all(|(f, &v)| f.len() == v)
        };
        if !fits(&click_weights) || !fits(&indep_weights) {
            return Err(Error::Shape("hidden weights do not match the schema".into()));
        }
        Ok(Self {
            schema,
            click_weights,
            indep_weights,
            rho,
            b_ctr: 0.0,
            b_cvr: 0.0,
            popularity,
        })
    }

    pub fn schema(&self) -> &FieldSchema {
        &self.schema
    }

    fn scores(&self, s: &SparseSample) -> (f64, f64) {
        let mut click = 0.0;
        let mut indep = 0.0;
        for f in &s.features {
            click += self.click_weights[f.field as usize][f.id as usize];
            indep += self.indep_weights[f.field as usize][f.id as usize];
        }
        (click, self.rho * click + (1.0 - self.rho) * indep)
    }

    pub fn true_pctr(&self, s: &SparseSample) -> f64 {
        sigmoid(self.scores(s).0 + self.b_ctr)
    }

    pub fn true_pcvr(&self, s: &SparseSample) -> f64 {
        sigmoid(self.scores(s).1 + self.b_cvr)
    }

    pub fn truth(&self, s: &SparseSample) -> Truth {
        let (c, v) = self.scores(s);
        Truth {
            pctr: sigmoid(c + self.b_ctr),
            pcvr: sigmoid(v + self.b_cvr),
        }
    }

    fn sampler(&self) -> Result<FeatureSampler> {
        Ok(match self.popularity {
            Popularity::Uniform => FeatureSampler::Uniform,
            Popularity::Zipf(s) => FeatureSampler::Zipf(
                self.schema
                    .vocab_sizes()
                    .iter()
                    .map(|&v| Zipf::new(v as u64, s).map_err(|e| Error::Config(e.to_string())))
                    .collect::<Result<_>>()?,
            ),
        })
    }

    fn draw_features<R: Rng>(&self, sampler: &FeatureSampler, rng: &mut R) -> Vec<Feature> {
        (0..self.schema.field_count())
            .map(|f| {
                let id = match sampler {
                    FeatureSampler::Uniform => rng.gen_range(0..self.schema.vocab_size(f)),
                    FeatureSampler::Zipf(z) => z[f].sample(rng) as usize - 1,
                };
                Feature::new(f as u32, id as u32)
            })
            .collect()
    }
}

enum FeatureSampler {
    Uniform,
    Zipf(Vec<Zipf<f64>>),
}

/// Generates `n` impressions with timestamps `0..n`. The truth vector is
/// parallel to the samples.
pub fn gen_dataset(gt: &GroundTruthModel, n: usize, seed: u64) -> Result<(Dataset, Vec<Truth>)> {
    let sampler = gt.sampler()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    for t in 0..n {
        let features = gt.draw_features(&sampler, &mut rng);
        let mut s = SparseSample::new(t as i64, features, false, false);
        let truth = gt.truth(&s);
        s.y = rng.gen::<f64>() < truth.pctr;
        // Always consume the conversion draw so the stream does not depend on y.
        let u: f64 = rng.gen();
        s.z = s.y && u < truth.pcvr;
        samples.push(s);
        truths.push(truth);
    }
    Ok((Dataset::from_parts_unchecked(gt.schema.clone(), samples), truths))
}

const BISECTION_STEPS: usize = 60;
const CALIBRATION_TOLERANCE: f64 = 0.05;

fn bisect(mut lo: f64, mut hi: f64, target: f64, rate: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Expected CTR and CVR-among-clicked over a probe set of features.
pub fn probe_rates(gt: &GroundTruthModel, probe_n: usize, seed: u64) -> Result<(f64, f64)> {
    let scores = probe_scores(gt, probe_n, seed)?;
    Ok(rates_at(&scores, gt.b_ctr, gt.b_cvr))
}

fn probe_scores(gt: &GroundTruthModel, probe_n: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    let sampler = gt.sampler()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..probe_n)
        .map(|_| {
            let s = SparseSample::new(0, gt.draw_features(&sampler, &mut rng), false, false);
            gt.scores(&s)
        })
        .collect();
    Ok(scores)
}

fn rates_at(scores: &[(f64, f64)], b_ctr: f64, b_cvr: f64) -> (f64, f64) {
    let mut clicks = 0.0;
    let mut convs = 0.0;
    for &(c, v) in scores {
        let p = sigmoid(c + b_ctr);
        clicks += p;
        convs += p * sigmoid(v + b_cvr);
    }
    (clicks / scores.len() as f64, convs / clicks)
}

/// Bisects `b_ctr` then `b_cvr` so the expected probe rates hit the targets.
pub fn calibrate_offsets(
    gt: GroundTruthModel,
    target_ctr: f64,
    target_cvr: f64,
    probe_n: usize,
    seed: u64,
) -> Result<GroundTruthModel> {
    let in_unit = |x: f64| x > 0.0 && x < 1.0;
    if !in_unit(target_ctr) || !in_unit(target_cvr) {
        return Err(Error::Calibration("targets must lie strictly inside (0, 1)".into()));
    }
    if probe_n == 0 {
        return Err(Error::Calibration("empty probe".into()));
    }
    let scores = probe_scores(&gt, probe_n, seed)?;
    let (lo, hi) = (-60.0, 60.0);
    let b_ctr = bisect(lo, hi, target_ctr, |b| rates_at(&scores, b, 0.0).0);
    let b_cvr = bisect(lo, hi, target_cvr, |b| rates_at(&scores, b_ctr, b).1);
    let (ctr, cvr) = rates_at(&scores, b_ctr, b_cvr);
    let off = |got: f64, want: f64| ((got - want) / want).abs();
    if off(ctr, target_ctr) > CALIBRATION_TOLERANCE || off(cvr, target_cvr) > CALIBRATION_TOLERANCE {
        return Err(Error::Calibration(format!(
            "reached ctr {ctr:.3e} / cvr {cvr:.3e} for targets {target_ctr:.3e} / {target_cvr:.3e}"
        )));
    }
    Ok(GroundTruthModel { b_ctr, b_cvr, ..gt })
}

/// Hidden weights from `seed`, offsets calibrated on a probe drawn from a
/// derived seed.
pub fn build_world(cfg: &WorldConfig, seed: u64) -> Result<GroundTruthModel> {
    let gt = GroundTruthModel::uncalibrated(cfg, seed)?;
    calibrate_offsets(
        gt,
        cfg.target_ctr,
        cfg.target_cvr,
        cfg.probe_n,
        seed ^ 0x9e37_79b9_7f4a_7c15,
    )
}

/// How a CVR predictor behaves on and off the clicked subspace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasReport {
    /// AUC against sampled `z` on clicked impressions; `None` when the clicked
    /// labels are all one class.
    pub clicked_auc: Option<f64>,
    /// Spearman correlation with the true pCVR over every impression.
    pub rank_corr_all: f64,
    pub mae_clicked: f64,
    pub mae_unclicked: f64,
}

pub fn bias_report(
    predictor: &dyn CvrPredictor,
    gt: &GroundTruthModel,
    eval_set: &Dataset,
) -> Result<BiasReport> {
    let samples = eval_set.samples();
    let pred = predictor.predict_cvr(samples)?;
    let truth: Vec<f64> = samples.iter().map(|s| gt.true_pcvr(s)).collect();

    let (mut clicked_scores, mut clicked_labels) = (Vec::new(), Vec::new());
    let (mut err_c, mut n_c, mut err_u, mut n_u) = (0.0, 0usize, 0.0, 0usize);
    for ((s, &p), &t) in samples.iter().zip(&pred).zip(&truth) {
        if s.y {
            clicked_scores.push(p);
            clicked_labels.push(s.z);
            err_c += (p - t).abs();
            n_c += 1;
        } else {
            err_u += (p - t).abs();
            n_u += 1;
        }
    }
    let mean = |e: f64, n: usize| if n == 0 { 0.0 } else { e / n as f64 };
    Ok(BiasReport {
        clicked_auc: auc(&clicked_scores, &clicked_labels).ok(),
        rank_corr_all: spearman(&pred, &truth),
        mae_clicked: mean(err_c, n_c),
        mae_unclicked: mean(err_u, n_u),
    })
}

#[derive(Clone)]
pub struct TruthPredictor<'a>(pub &'a GroundTruthModel);

impl CvrPredictor for TruthPredictor<'_> {
    fn predict_cvr(&self, samples: &[SparseSample]) -> Result<Vec<f64>> {
        Ok(samples.iter().map(|s| self.0.true_pcvr(s)).collect())
    }
}
