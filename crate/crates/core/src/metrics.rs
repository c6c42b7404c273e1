//! AUC, the two-task evaluation protocol, and seed aggregation.

use std::cmp::Ordering;
use std::fmt::{self, Write as _};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature::Dataset;
use crate::models::{BaseModel, CvrPredictor};

fn check_labels(scores: &[f64], labels: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    Ok((pos, neg))
}

/// Rank-sum AUC with average ranks for ties.
///
/// Ranks are kept doubled so the statistic is an exact integer; the result
/// is bit-identical to [`auc_bruteforce`].
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_labels(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]].total_cmp(&scores[order[i]]) == Ordering::Equal {
            j += 1;
        }
        // 1-based ranks i+1..=j; twice their mean is i + 1 + j.
        let doubled = (i + 1 + j) as u128;
        let in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum2 += doubled * in_group;
        i = j;
    }
    let wins2 = rank_sum2 - (pos as u128) * (pos as u128 + 1);
    Ok(wins2 as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Counts wins and half-ties over every positive/negative pair.
pub fn auc_bruteforce(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_labels(scores, labels)?;
    let mut wins2: u128 = 0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            wins2 += match scores[i].total_cmp(&scores[j]) {
                Ordering::Greater => 2,
                Ordering::Equal => 1,
                Ordering::Less => 0,
            };
        }
    }
    Ok(wins2 as f64 / (2 * pos as u128 * neg as u128) as f64)
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_unstable_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]].total_cmp(&x[order[i]]) == Ordering::Equal {
            j += 1;
        }
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation. A constant input has no rank order and
/// yields 0.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs paired inputs");
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let mean = (n as f64 + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - mean, y - mean);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// AUC of the predictor's pCVR against `z` on the clicked part of `test`.
pub fn eval_cvr_task(predictor: &dyn CvrPredictor, test: &Dataset) -> Result<f64> {
    let clicked = test.clicked_subset();
    let scores = predictor.predict_cvr(clicked.samples())?;
    let labels: Vec<bool> = clicked.samples().iter().map(|s| s.z).collect();
    auc(&scores, &labels)
}

/// AUC of `pctr_shared * pcvr` against `y & z` on every impression of
/// `test`.
pub fn eval_ctcvr_task(
    predictor: &dyn CvrPredictor,
    shared_ctr: &BaseModel,
    test: &Dataset,
) -> Result<f64> {
    let pctr = shared_ctr.predict(test.samples())?;
    ctcvr_auc_with(&pctr, predictor, test)
}

/// [`eval_ctcvr_task`] with the shared CTR predictions already computed.
pub fn ctcvr_auc_with(pctr: &[f64], predictor: &dyn CvrPredictor, test: &Dataset) -> Result<f64> {
    let pcvr = predictor.predict_cvr(test.samples())?;
    if pcvr.len() != pctr.len() {
        return Err(Error::Shape("predictor returned the wrong number of scores".into()));
    }
    let scores: Vec<f64> = pctr.iter().zip(&pcvr).map(|(a, b)| a * b).collect();
    let labels: Vec<bool> = test.samples().iter().map(|s| s.ctcvr_label()).collect();
    auc(&scores, &labels)
}

/// What a report row measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Cvr,
    Ctcvr,
    /// Spearman correlation of pCVR with the true pCVR over all test
    /// impressions; only available on synthetic data.
    CvrRankAll,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Cvr => "cvr",
            Task::Ctcvr => "ctcvr",
            Task::CvrRankAll => "cvr-rank-all",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

/// One number produced by one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub method: String,
    pub task: Task,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRecord {
    pub seed: u64,
    pub measurements: Vec<Measurement>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub task: Task,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub failed: Vec<(u64, String)>,
    pub rows: Vec<ReportRow>,
    pub per_seed: Vec<SeedRecord>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn row(&self, method: &str, task: Task) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.task == task)
    }

    /// Per-seed values for one method and task, in seed order.
    pub fn values(&self, method: &str, task: Task) -> Vec<(u64, f64)> {
        self.per_seed
            .iter()
            .filter_map(|r| {
                r.measurements
                    .iter()
                    .find(|m| m.method == method && m.task == task)
                    .map(|m| (r.seed, m.value))
            })
            .collect()
    }

    fn header(&self, out: &mut String) {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "# dataset: {}", self.dataset);
        let _ = writeln!(out, "# config_hash: {}", self.config_hash);
        let _ = writeln!(out, "# seeds: {}", seeds.join(","));
        for (seed, why) in &self.failed {
            let _ = writeln!(out, "# failed seed {seed}: {why}");
        }
    }

    /// Aggregate table. `auc_std` is the population standard deviation;
    /// `cvr-rank-all` rows hold Spearman correlations rather than AUCs.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        self.header(&mut out);
        out.push_str("# std: population (divide by n)\n");
        out.push_str("method\ttask\tauc_mean\tauc_std\tn_seeds\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}\t{}",
                r.method, r.task, r.auc_mean, r.auc_std, r.n_seeds
            );
        }
        out
    }

    pub fn per_seed_tsv(&self) -> String {
        let mut out = String::new();
        self.header(&mut out);
        out.push_str("seed\tmethod\ttask\tvalue\n");
        for r in &self.per_seed {
            for m in &r.measurements {
                let _ = writeln!(out, "{}\t{}\t{}\t{:.6}", r.seed, m.method, m.task, m.value);
            }
        }
        out
    }

    /// Human-readable table with AUC shown as percentage points.
    pub fn to_display(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:<13} {:>8} {:>7} {:>5}", "method", "task", "mean", "std", "n");
        for r in &self.rows {
            let scale = if r.task == Task::CvrRankAll { 1.0 } else { 100.0 };
            let _ = writeln!(
                out,
                "{:<12} {:<13} {:>8.2} {:>7.2} {:>5}",
                r.method,
                r.task,
                r.auc_mean * scale,
                r.auc_std * scale,
                r.n_seeds
            );
        }
        out
    }
}

/// Aggregates per-seed records into report rows. Row order follows first
/// appearance of each (method, task) pair.
pub fn aggregate(per_seed: &[SeedRecord]) -> Vec<ReportRow> {
    let mut keys: Vec<(String, Task)> = Vec::new();
    for r in per_seed {
        for m in &r.measurements {
            if !keys.iter().any(|(k, t)| *k == m.method && *t == m.task) {
                keys.push((m.method.clone(), m.task));
            }
        }
    }
    keys.into_iter()
        .map(|(method, task)| {
            let vals: Vec<f64> = per_seed
                .iter()
                .flat_map(|r| r.measurements.iter())
                .filter(|m| m.method == method && m.task == task)
                .map(|m| m.value)
                .collect();
            let (auc_mean, auc_std) = mean_std(&vals);
            ReportRow {
                method,
                task,
                auc_mean,
                auc_std,
                n_seeds: vals.len(),
            }
        })
        .collect()
}

/// Runs `experiment` once per seed on up to `jobs` threads and aggregates.
/// Failed seeds are logged, listed in the report and left out of the means.
pub fn repeat_and_aggregate<F>(
    experiment: F,
    seeds: &[u64],
    jobs: usize,
    dataset: &str,
    config_hash: &str,
) -> Result<EvalReport>
where
    F: Fn(u64) -> Result<Vec<Measurement>> + Sync,
{
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let run = |&seed: &u64| (seed, experiment(seed));
    let results: Vec<(u64, Result<Vec<Measurement>>)> = if jobs <= 1 {
        seeds.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| seeds.par_iter().map(run).collect())
    };

    let mut per_seed = Vec::new();
    let mut failed = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(measurements) => per_seed.push(SeedRecord { seed, measurements }),
            Err(e) => {
                log::warn!("seed {seed} failed: {e}");
                failed.push((seed, e.to_string()));
            }
        }
    }
    Ok(EvalReport {
        dataset: dataset.to_owned(),
        config_hash: config_hash.to_owned(),
        seeds: seeds.to_vec(),
        failed,
        rows: aggregate(&per_seed),
        per_seed,
    })
}
