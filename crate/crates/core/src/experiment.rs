//! End-to-end experiment plans: data source, methods, seeds, overrides.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::baselines::{train_aman, train_oversample, train_unbias, DEFAULT_WEIGHT_CAP};
use crate::error::{Error, Result};
use crate::feature::{Dataset, FieldSchema, SparseSample};
use crate::io::{parse_truth, read_log_file, ConfigFile};
use crate::metrics::{
    auc, auc_bruteforce, ctcvr_auc_with, eval_cvr_task, repeat_and_aggregate, spearman,
    EvalReport, Measurement, Task,
};
use crate::models::{
    train_base_cvr, train_esmm, train_independent, CvrPredictor, Division, Role, TrainConfig,
    DIVISION_FLOOR,
};
use crate::nn::gradcheck::{check_store, grad_check};
use crate::nn::mlp::{BatchCache, MlpGrads, MlpTower};
use crate::nn::cross_entropy;
use crate::nn::loss::cross_entropy_grad;
use crate::nn::graph::{Label, Objective};
use crate::nn::{GradCheckConfig, ParamStore};
use crate::synth::{build_world, gen_dataset, Popularity, Truth, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Base,
    Aman,
    Oversample,
    Unbias,
    Division,
    EsmmNs,
    Esmm,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Base,
        Method::Aman,
        Method::Oversample,
        Method::Unbias,
        Method::Division,
        Method::EsmmNs,
        Method::Esmm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Base => "BASE",
            Method::Aman => "AMAN",
            Method::Oversample => "OVERSAMPLE",
            Method::Unbias => "UNBIAS",
            Method::Division => "DIVISION",
            Method::EsmmNs => "ESMM-NS",
            Method::Esmm => "ESMM",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == up)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// A synthetic dataset: world knobs, size, and a base seed mixed with each
/// run seed so every run sees a fresh world.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub world: WorldConfig,
    pub n: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            n: 200_000,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Builds the world and dataset for one run seed.
    pub fn generate(&self, run_seed: u64) -> Result<(crate::synth::GroundTruthModel, Dataset, Vec<Truth>)> {
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        let gt = build_world(&self.world, mix(self.seed, run_seed, 1))?;
        let (d, truths) = gen_dataset(&gt, self.n, mix(self.seed, run_seed, 2))?;
        Ok((gt, d, truths))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    File {
        path: PathBuf,
        truth: Option<PathBuf>,
        sort: bool,
    },
    Synth(SynthSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub source: DataSource,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub aman_rate: f64,
    pub oversample_k: usize,
    pub weight_cap: f64,
    pub division_floor: f64,
    /// Fraction of the training half used; nested across fractions.
    pub fraction: f64,
    /// Dataset fractions for sweeps.
    pub fractions: Vec<f64>,
    pub jobs: usize,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            source: DataSource::Synth(SynthSpec::default()),
            methods: Method::ALL.to_vec(),
            seeds: (0..10).collect(),
            train: TrainConfig::default(),
            aman_rate: 0.1,
            oversample_k: 5,
            weight_cap: DEFAULT_WEIGHT_CAP,
            division_floor: DIVISION_FLOOR,
            fraction: 1.0,
            fractions: vec![0.1, 1.0],
            jobs: 1,
            out: None,
        }
    }
}

/// splitmix64 over `base`, `seed` and a stream tag.
pub fn mix(base: u64, seed: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(seed)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9)
        .wrapping_add(stream);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {v:?} for {key}"))),
    }
}

/// Seeds as a comma list, with `a..b` ranges (end exclusive) allowed.
pub fn parse_seeds(v: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (u64, u64) = (parse_num("seeds", a)?, parse_num("seeds", b)?);
            out.extend(a..b);
        } else {
            out.push(parse_num("seeds", part)?);
        }
    }
    Ok(out)
}

pub fn parse_methods(v: &str) -> Result<Vec<Method>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Method::from_str)
        .collect()
}

impl ExperimentPlan {
    fn synth_mut(&mut self) -> &mut SynthSpec {
        if !matches!(self.source, DataSource::Synth(_)) {
            self.source = DataSource::Synth(SynthSpec::default());
        }
        match &mut self.source {
            DataSource::Synth(s) => s,
            DataSource::File { .. } => unreachable!(),
        }
    }

    fn file_mut(&mut self) -> (&mut Option<PathBuf>, &mut bool) {
        match &mut self.source {
            DataSource::File { truth, sort, .. } => (truth, sort),
            DataSource::Synth(_) => panic!("file settings need a file source"),
        }
    }

    /// Applies one setting. Settings are addressed as `section.key`, the
    /// same names the config file uses.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let name = format!("{section}.{key}");
        let k = name.as_str();
        match (section, key) {
            ("data", "path") => {
                self.source = DataSource::File {
                    path: PathBuf::from(value),
                    truth: None,
                    sort: false,
                }
            }
            ("data", "truth") | ("data", "sort") => {
                if !matches!(self.source, DataSource::File { .. }) {
                    return Err(Error::Config(format!("{k} needs data.path")));
                }
                let (truth, sort) = self.file_mut();
                if key == "truth" {
                    *truth = Some(PathBuf::from(value));
                } else {
                    *sort = parse_bool(k, value)?;
                }
            }
            ("synth", _) => {
                let s = self.synth_mut();
                match key {
                    "n" => s.n = parse_num(k, value)?,
                    "seed" => s.seed = parse_num(k, value)?,
                    "fields" => s.world.field_count = parse_num(k, value)?,
                    "vocab" => s.world.vocab_size = parse_num(k, value)?,
                    "dim" => s.world.embedding_dim = parse_num(k, value)?,
                    "ctr" => s.world.target_ctr = parse_num(k, value)?,
                    "cvr" => s.world.target_cvr = parse_num(k, value)?,
                    "rho" => s.world.rho = parse_num(k, value)?,
                    "score_scale" => s.world.score_scale = parse_num(k, value)?,
                    "probe_n" => s.world.probe_n = parse_num(k, value)?,
                    "popularity" => {
                        s.world.popularity = match value.trim() {
                            "uniform" => Popularity::Uniform,
                            "zipf" => Popularity::Zipf(1.1),
                            other => match other.strip_prefix("zipf:") {
                                Some(x) => Popularity::Zipf(parse_num(k, x)?),
                                None => return Err(Error::Config(format!("bad value {value:?} for {k}"))),
                            },
                        }
                    }
                    _ => return Err(Error::Config(format!("unknown setting {k}"))),
                }
            }
            ("train", "lr") => self.train.adam.lr = parse_num(k, value)?,
            ("train", "beta1") => self.train.adam.beta1 = parse_num(k, value)?,
            ("train", "beta2") => self.train.adam.beta2 = parse_num(k, value)?,
            ("train", "eps") => self.train.adam.eps = parse_num(k, value)?,
            ("train", "batch_size") => self.train.batch_size = parse_num(k, value)?,
            ("train", "epochs") => self.train.epochs = parse_num(k, value)?,
            ("train", "hidden") => self.train.hidden = parse_list(k, value)?,
            ("train", "shuffle") => self.train.shuffle = parse_bool(k, value)?,
            ("run", "methods") => self.methods = parse_methods(value)?,
            ("run", "seeds") => self.seeds = parse_seeds(value)?,
            ("run", "jobs") => self.jobs = parse_num(k, value)?,
            ("run", "out") => self.out = Some(PathBuf::from(value)),
            ("run", "fraction") => self.fraction = parse_num(k, value)?,
            ("sampling", "aman_rate") => self.aman_rate = parse_num(k, value)?,
            ("sampling", "oversample_k") => self.oversample_k = parse_num(k, value)?,
            ("sampling", "weight_cap") => self.weight_cap = parse_num(k, value)?,
            ("sampling", "division_floor") => self.division_floor = parse_num(k, value)?,
            ("sweep", "fractions") => self.fractions = parse_list(k, value)?,
            _ => return Err(Error::Config(format!("unknown setting {k}"))),
        }
        Ok(())
    }

    /// Applies every setting in `cfg`. `data.path` is applied first so file
    /// options may follow it in any order.
    pub fn apply_config(&mut self, cfg: &ConfigFile) -> Result<()> {
        if let Some(p) = cfg.get("data", "path") {
            self.set("data", "path", p)?;
        }
        for (section, entries) in cfg.sections() {
            for (key, value) in entries {
                if section == "data" && key == "path" {
                    continue;
                }
                self.set(section, key, value)?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        self.train.validate()?;
        if let DataSource::Synth(s) = &self.source {
            if s.n == 0 {
                return Err(Error::Config("n must be positive".into()));
            }
            s.world.validate()?;
        }
        if !(self.aman_rate > 0.0 && self.aman_rate <= 1.0) {
            return Err(Error::Config("AMAN rate must lie in (0, 1]".into()));
        }
        if self.oversample_k == 0 {
            return Err(Error::Config("oversampling factor must be at least 1".into()));
        }
        if !(self.weight_cap >= 1.0) {
            return Err(Error::Config("weight cap must be at least 1".into()));
        }
        if !(self.division_floor > 0.0) {
            return Err(Error::Config("division floor must be positive".into()));
        }
        let frac_ok = |f: f64| f > 0.0 && f <= 1.0;
        if !frac_ok(self.fraction) || !self.fractions.iter().all(|&f| frac_ok(f)) {
            return Err(Error::Config("fractions must lie in (0, 1]".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be positive".into()));
        }
        Ok(())
    }

    /// Every setting that affects results, one `key=value` per line.
    /// `jobs` and `out` are left out.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        match &self.source {
            DataSource::File { path, truth, sort } => {
                let _ = writeln!(s, "data.path={}", path.display());
                let _ = writeln!(s, "data.truth={}", truth.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
                let _ = writeln!(s, "data.sort={sort}");
            }
            DataSource::Synth(sp) => {
                let w = &sp.world;
                let _ = writeln!(s, "synth.n={}", sp.n);
                let _ = writeln!(s, "synth.seed={}", sp.seed);
                let _ = writeln!(s, "synth.fields={}", w.field_count);
                let _ = writeln!(s, "synth.vocab={}", w.vocab_size);
                let _ = writeln!(s, "synth.dim={}", w.embedding_dim);
                let _ = writeln!(s, "synth.ctr={:?}", w.target_ctr);
                let _ = writeln!(s, "synth.cvr={:?}", w.target_cvr);
                let _ = writeln!(s, "synth.rho={:?}", w.rho);
                let _ = writeln!(s, "synth.score_scale={:?}", w.score_scale);
                let _ = writeln!(s, "synth.probe_n={}", w.probe_n);
                let _ = writeln!(s, "synth.popularity={:?}", w.popularity);
            }
        }
        let t = &self.train;
        let _ = writeln!(s, "train.lr={:?}", t.adam.lr);
        let _ = writeln!(s, "train.beta1={:?}", t.adam.beta1);
        let _ = writeln!(s, "train.beta2={:?}", t.adam.beta2);
        let _ = writeln!(s, "train.eps={:?}", t.adam.eps);
        let _ = writeln!(s, "train.batch_size={}", t.batch_size);
        let _ = writeln!(s, "train.epochs={}", t.epochs);
        let _ = writeln!(s, "train.hidden={:?}", t.hidden);
        let _ = writeln!(s, "train.shuffle={}", t.shuffle);
        let methods: Vec<&str> = self.methods.iter().map(|m| m.as_str()).collect();
        let _ = writeln!(s, "run.methods={}", methods.join(","));
        let _ = writeln!(s, "run.seeds={:?}", self.seeds);
        let _ = writeln!(s, "run.fraction={:?}", self.fraction);
        let _ = writeln!(s, "sampling.aman_rate={:?}", self.aman_rate);
        let _ = writeln!(s, "sampling.oversample_k={}", self.oversample_k);
        let _ = writeln!(s, "sampling.weight_cap={:?}", self.weight_cap);
        let _ = writeln!(s, "sampling.division_floor={:?}", self.division_floor);
        let _ = writeln!(s, "sweep.fractions={:?}", self.fractions);
        s
    }

    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn dataset_id(&self) -> String {
        match &self.source {
            DataSource::File { path, .. } => path.display().to_string(),
            DataSource::Synth(s) => format!(
                "synth n={} rho={} ctr={} cvr={} seed={}",
                s.n, s.world.rho, s.world.target_ctr, s.world.target_cvr, s.seed
            ),
        }
    }
}

/// Data for one seed: the full log and, when known, true pCVR per sample.
pub struct SeedData {
    pub dataset: Dataset,
    pub truth: Option<Vec<Truth>>,
}

fn load_file(path: &Path, truth: Option<&Path>, sort: bool) -> Result<SeedData> {
    let dataset = read_log_file(path, sort)?;
    let truth = match truth {
        None => None,
        Some(p) => {
            if sort {
                return Err(Error::Config("a truth sidecar cannot be combined with sorting".into()));
            }
            let f = std::fs::File::open(p).map_err(|e| Error::io(p, e))?;
            let t = parse_truth(f)?;
            if t.len() != dataset.len() {
                return Err(Error::Shape(format!(
                    "truth sidecar has {} lines for {} samples",
                    t.len(),
                    dataset.len()
                )));
            }
            Some(t)
        }
    };
    Ok(SeedData { dataset, truth })
}

/// Time split, then keeps a seeded `fraction` of the training half. The
/// kept subsets are nested: a smaller fraction keeps a prefix of the same
/// permutation as a larger one.
pub fn split_with_fraction(
    data: &SeedData,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset, Option<Vec<Truth>>)> {
    let (train, test) = data.dataset.time_split()?;
    let test_truth = data.truth.as_ref().map(|t| t[train.len()..].to_vec());
    if fraction >= 1.0 {
        return Ok((train, test, test_truth));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = (fraction * train.len() as f64).round() as usize;
    let mut keep = vec![false; train.len()];
    for &i in &order[..take] {
        keep[i] = true;
    }
    Ok((train.select(|i| keep[i]), test, test_truth))
}

/// Counters gathered across seeds for the range guarantee.
#[derive(Debug, Default)]
pub struct RangeAudit {
    /// ESMM / ESMM-NS pCVR predictions checked.
    pub checked: AtomicUsize,
    /// Of those, values outside `[0, 1]`.
    pub violations: AtomicUsize,
    /// DIVISION predictions above 1.
    pub division_exceeded: AtomicUsize,
}

/// Trains every planned method on one seed and evaluates both tasks.
pub fn run_seed(plan: &ExperimentPlan, data: &SeedData, seed: u64, audit: &RangeAudit) -> Result<Vec<Measurement>> {
    let (train, test, test_truth) = split_with_fraction(data, plan.fraction, mix(seed, 0, 3))?;
    let cfg = plan.train.with_seed(seed);
    log::info!("seed {seed}: {} train / {} test impressions", train.len(), test.len());

    let ctr = train_independent(&train, Role::CtrOnAll, &cfg)?;
    let pctr = ctr.predict(test.samples())?;
    let mut out = Vec::new();
    let mut record = |method: Method, predictor: &dyn CvrPredictor| -> Result<()> {
        let name = method.as_str().to_owned();
        out.push(Measurement {
            method: name.clone(),
            task: Task::Cvr,
            value: eval_cvr_task(predictor, &test)?,
        });
        out.push(Measurement {
            method: name.clone(),
            task: Task::Ctcvr,
            value: ctcvr_auc_with(&pctr, predictor, &test)?,
        });
        if let Some(truth) = &test_truth {
            let pred = predictor.predict_cvr(test.samples())?;
            let t: Vec<f64> = truth.iter().map(|t| t.pcvr).collect();
            out.push(Measurement {
                method: name,
                task: Task::CvrRankAll,
                value: spearman(&pred, &t),
            });
        }
        Ok(())
    };

    for &method in &plan.methods {
        log::info!("seed {seed}: training {method}");
        match method {
            Method::Base => record(method, &train_base_cvr(&train, &cfg)?)?,
            Method::Aman => record(method, &train_aman(&train, plan.aman_rate, mix(seed, 0, 4), &cfg)?)?,
            Method::Oversample => record(method, &train_oversample(&train, plan.oversample_k, &cfg)?)?,
            Method::Unbias => record(method, &train_unbias(&train, &ctr, plan.weight_cap, &cfg)?)?,
            Method::Division => {
                let ctcvr = train_independent(&train, Role::CtcvrOnAll, &cfg)?;
                let div = Division {
                    ctr: &ctr,
                    ctcvr: &ctcvr,
                    floor: plan.division_floor,
                };
                let exceeded = div.predict(test.samples())?.iter().filter(|d| d.exceeded_one).count();
                audit.division_exceeded.fetch_add(exceeded, Ordering::Relaxed);
                record(method, &div)?;
            }
            Method::EsmmNs | Method::Esmm => {
                let model = train_esmm(&train, method == Method::Esmm, &cfg)?;
                let pcvr = model.predict_cvr(test.samples())?;
                let bad = pcvr.iter().filter(|p| !(0.0..=1.0).contains(*p)).count();
                audit.checked.fetch_add(pcvr.len(), Ordering::Relaxed);
                audit.violations.fetch_add(bad, Ordering::Relaxed);
                record(method, &model)?;
            }
        }
    }
    Ok(out)
}

fn seed_data(plan: &ExperimentPlan, shared: Option<&SeedData>, seed: u64) -> Result<SeedData> {
    match (&plan.source, shared) {
        (DataSource::Synth(spec), _) => {
            let (_, dataset, truth) = spec.generate(seed)?;
            Ok(SeedData {
                dataset,
                truth: Some(truth),
            })
        }
        (DataSource::File { .. }, Some(d)) => Ok(SeedData {
            dataset: d.dataset.clone(),
            truth: d.truth.clone(),
        }),
        (DataSource::File { path, truth, sort }, None) => load_file(path, truth.as_deref(), *sort),
    }
}

/// Result of [`cmd_run`].
#[derive(Debug)]
pub struct RunOutput {
    pub report: EvalReport,
    pub audit: RangeAudit,
}

/// Runs the plan over every seed and writes `report.tsv` and
/// `per_seed.tsv` under `plan.out` when set.
pub fn cmd_run(plan: &ExperimentPlan) -> Result<RunOutput> {
    plan.validate()?;
    let shared = match &plan.source {
        DataSource::File { path, truth, sort } => Some(load_file(path, truth.as_deref(), *sort)?),
        DataSource::Synth(_) => None,
    };
    let audit = RangeAudit::default();
    let hash = plan.config_hash();
    let report = repeat_and_aggregate(
        |seed| {
            let data = seed_data(plan, shared.as_ref(), seed)?;
            run_seed(plan, &data, seed, &audit)
        },
        &plan.seeds,
        plan.jobs,
        &plan.dataset_id(),
        &hash,
    )?;
    if let Some(dir) = &plan.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("report.tsv"), &report.to_tsv())?;
        write_text(&dir.join("per_seed.tsv"), &report.per_seed_tsv())?;
    }
    Ok(RunOutput { report, audit })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug)]
pub struct SweepOutput {
    pub fractions: Vec<f64>,
    pub reports: Vec<EvalReport>,
}

impl SweepOutput {
    pub fn report(&self, fraction: f64) -> Option<&EvalReport> {
        self.fractions
            .iter()
            .position(|&f| f == fraction)
            .map(|i| &self.reports[i])
    }

    fn header(&self, out: &mut String) {
        if let Some(r) = self.reports.first() {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            let _ = writeln!(out, "# dataset: {}", r.dataset);
            let _ = writeln!(out, "# config_hash: {}", r.config_hash);
            let _ = writeln!(out, "# seeds: {}", seeds.join(","));
        }
        for (f, r) in self.fractions.iter().zip(&self.reports) {
            for (seed, why) in &r.failed {
                let _ = writeln!(out, "# failed seed {seed} at fraction {f}: {why}");
            }
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        self.header(&mut out);
        out.push_str("# std: population (divide by n)\n");
        out.push_str("fraction\tmethod\ttask\tauc_mean\tauc_std\tn_seeds\n");
        for (f, r) in self.fractions.iter().zip(&self.reports) {
            for row in &r.rows {
                let _ = writeln!(
                    out,
                    "{f}\t{}\t{}\t{:.6}\t{:.6}\t{}",
                    row.method, row.task, row.auc_mean, row.auc_std, row.n_seeds
                );
            }
        }
        out
    }

    pub fn per_seed_tsv(&self) -> String {
        let mut out = String::new();
        self.header(&mut out);
        out.push_str("fraction\tseed\tmethod\ttask\tvalue\n");
        for (f, r) in self.fractions.iter().zip(&self.reports) {
            for rec in &r.per_seed {
                for m in &rec.measurements {
                    let _ = writeln!(out, "{f}\t{}\t{}\t{}\t{:.6}", rec.seed, m.method, m.task, m.value);
                }
            }
        }
        out
    }
}

/// [`cmd_run`] once per fraction of the training half. Every report carries
/// the hash of the whole sweep plan.
pub fn cmd_sweep(plan: &ExperimentPlan) -> Result<SweepOutput> {
    plan.validate()?;
    if plan.fractions.is_empty() {
        return Err(Error::Config("sweep needs at least one fraction".into()));
    }
    let hash = plan.config_hash();
    let mut reports = Vec::new();
    for &f in &plan.fractions {
        log::info!("sweep: fraction {f}");
        let sub = ExperimentPlan {
            fraction: f,
            out: None,
            ..plan.clone()
        };
        let mut r = cmd_run(&sub)?.report;
        r.config_hash.clone_from(&hash);
        reports.push(r);
    }
    let out = SweepOutput {
        fractions: plan.fractions.clone(),
        reports,
    };
    if let Some(dir) = &plan.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("sweep.tsv"), &out.to_tsv())?;
        write_text(&dir.join("sweep_per_seed.tsv"), &out.per_seed_tsv())?;
    }
    Ok(out)
}

/// Small graphs for finite-difference checks.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckPlan {
    pub fields: usize,
    pub vocab: usize,
    pub dim: usize,
    pub hidden: Vec<usize>,
    /// Input width of the stand-alone tower check; 0 skips it.
    pub mlp_input: usize,
    pub batch: usize,
    pub trials: usize,
    pub seed: u64,
    /// Doubles one analytic coordinate before comparing.
    pub corrupt: bool,
    pub check: GradCheckConfig,
}

impl Default for GradcheckPlan {
    fn default() -> Self {
        Self {
            fields: 3,
            vocab: 5,
            dim: 4,
            hidden: vec![6, 4],
            mlp_input: 8,
            batch: 8,
            trials: 50,
            seed: 0,
            corrupt: false,
            check: GradCheckConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSummary {
    /// `(graph name, worst relative error over trials)`.
    pub graphs: Vec<(String, f64)>,
    pub passed: bool,
}

fn random_batch(schema: &FieldSchema, n: usize, rng: &mut ChaCha8Rng) -> Vec<SparseSample> {
    (0..n)
        .map(|t| {
            let features = (0..schema.field_count())
                .map(|f| crate::feature::Feature::new(f as u32, rng.gen_range(0..schema.vocab_size(f)) as u32))
                .collect();
            let y = rng.gen_bool(0.5);
            let z = y && rng.gen_bool(0.5);
            SparseSample::new(t as i64, features, y, z)
        })
        .collect()
}

fn random_store(schema: &FieldSchema, hidden: &[usize], towers: usize, shared: bool, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    let mut store = ParamStore::init(schema, hidden, towers, shared, Default::default(), rng)?;
    // Embeddings start near zero and biases at zero, which puts hidden
    // units exactly on the ReLU kink when a whole layer is inactive.
    let n_table: usize = store.tables().iter().map(|t| t.num_params()).sum();
    let mut flat = store.flat_params();
    for v in &mut flat[..n_table] {
        *v = rng.gen_range(-0.5..0.5);
    }
    for v in &mut flat[n_table..] {
        *v += rng.gen_range(-0.1..0.1);
    }
    store.set_flat_params(&flat)?;
    Ok(store)
}

/// One random point of a bare tower under mean cross-entropy.
fn mlp_trial(plan: &GradcheckPlan, rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<crate::nn::gradcheck::GradCheckReport> {
    let mut dims = vec![plan.mlp_input];
    dims.extend(&plan.hidden);
    dims.push(2);
    let mut tower = MlpTower::glorot(&dims, rng)?;
    for v in tower.params_mut() {
        *v += rng.gen_range(-0.1..0.1);
    }
    let n = plan.batch;
    let x: Vec<f64> = (0..n * plan.mlp_input).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    let mut cache = BatchCache::default();
    tower.forward_batch(&x, n, &mut cache)?;
    let d_prob: Vec<f64> = (0..n)
        .map(|b| cross_entropy_grad(labels[b], cache.probs[b]) / n as f64)
        .collect();
    let mut grads = MlpGrads::for_tower(&tower);
    tower.backward_batch(&cache, &d_prob, &mut grads, None)?;
    let mut analytic: Vec<f64> = grads.values().copied().collect();
    if plan.corrupt {
        let i = (0..analytic.len())
            .max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs()))
            .unwrap_or(0);
        analytic[i] *= 2.0;
    }
    let mut params: Vec<f64> = tower.params().copied().collect();
    let mut probe = tower.clone();
    let mut probe_cache = BatchCache::default();
    grad_check(
        &mut params,
        &analytic,
        |p| {
            for (dst, src) in probe.params_mut().zip(p) {
                *dst = *src;
            }
            probe.forward_batch(&x, n, &mut probe_cache)?;
            Ok(labels
                .iter()
                .zip(&probe_cache.probs)
                .map(|(&l, &q)| cross_entropy(l, q))
                .sum::<f64>()
                / n as f64)
        },
        cfg,
    )
}

/// Checks BASE, weighted BASE, ESMM and ESMM-NS graphs, plus a bare tower
/// when `mlp_input > 0`, on `trials` random points each.
pub fn cmd_gradcheck(plan: &GradcheckPlan) -> Result<GradcheckSummary> {
    if plan.trials == 0 {
        return Err(Error::Config("trials must be positive".into()));
    }
    let schema = FieldSchema::uniform(plan.fields, plan.vocab, plan.dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let graphs: [(&str, usize, bool, Objective, bool); 4] = [
        ("BASE", 1, true, Objective::Single { label: Label::Conversion }, false),
        ("BASE-weighted", 1, true, Objective::Single { label: Label::Conversion }, true),
        ("ESMM", 2, true, Objective::ESMM, false),
        ("ESMM-NS", 2, false, Objective::ESMM, false),
    ];
    let mut names: Vec<String> = graphs.iter().map(|g| g.0.to_owned()).collect();
    if plan.mlp_input > 0 {
        names.push("MLP".to_owned());
    }
    let mut worst = vec![0.0f64; names.len()];
    let mut passed = true;
    for trial in 0..plan.trials {
        for (g, &(_, towers, shared, objective, weighted)) in graphs.iter().enumerate() {
            let store = random_store(&schema, &plan.hidden, towers, shared, &mut rng)?;
            let batch = random_batch(&schema, plan.batch, &mut rng);
            let refs: Vec<&SparseSample> = batch.iter().collect();
            let weights: Option<Vec<f64>> = weighted.then(|| (0..plan.batch).map(|_| rng.gen_range(1.0..30.0)).collect());
            let corrupt = if plan.corrupt {
                let grad = crate::nn::gradcheck::analytic_gradient(&store, objective, &refs, weights.as_deref())?;
                let i = (0..grad.len())
                    .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
                    .unwrap_or(0);
                Some((i, 2.0))
            } else {
                None
            };
            let cfg = GradCheckConfig {
                seed: mix(plan.seed, trial as u64, g as u64),
                ..plan.check
            };
            let rep = check_store(&store, objective, &refs, weights.as_deref(), corrupt, &cfg)?;
            worst[g] = worst[g].max(rep.max_rel_err);
            passed &= rep.passed;
        }
        if plan.mlp_input > 0 {
            let cfg = GradCheckConfig {
                seed: mix(plan.seed, trial as u64, graphs.len() as u64),
                ..plan.check
            };
            let rep = mlp_trial(plan, &mut rng, &cfg)?;
            let g = graphs.len();
            worst[g] = worst[g].max(rep.max_rel_err);
            passed &= rep.passed;
        }
    }
    Ok(GradcheckSummary {
        graphs: names.into_iter().zip(worst).collect(),
        passed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AucSelftest {
    pub instances: usize,
    pub max_abs_diff: f64,
    pub hand_case: f64,
    pub passed: bool,
}

/// Sorting AUC against the pairwise oracle on random tied instances, plus
/// the `[0.8, 0.5, 0.5, 0.2]` / `[1, 1, 0, 0]` hand case.
pub fn auc_selftest(instances: usize, seed: u64) -> Result<AucSelftest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_abs_diff = 0.0f64;
    let mut done = 0;
    while done < instances {
        let n = rng.gen_range(2..=50);
        // Few distinct levels force ties.
        let levels = rng.gen_range(1..=n);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let (Ok(a), Ok(b)) = (auc(&scores, &labels), auc_bruteforce(&scores, &labels)) else {
            continue;
        };
        max_abs_diff = max_abs_diff.max((a - b).abs());
        done += 1;
    }
    let hand_case = auc(&[0.8, 0.5, 0.5, 0.2], &[true, true, false, false])?;
    Ok(AucSelftest {
        instances,
        max_abs_diff,
        hand_case,
        passed: max_abs_diff <= 1e-12 && hand_case == 0.875,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert_eq!("esmm_ns".parse::<Method>().unwrap(), Method::EsmmNs);
        assert!("XGBOOST".parse::<Method>().is_err());
    }

    #[test]
    fn seeds_and_ranges() {
        assert_eq!(parse_seeds("0..3,7").unwrap(), vec![0, 1, 2, 7]);
        assert!(parse_seeds("a").is_err());
    }

    #[test]
    fn hash_ignores_jobs_and_out() {
        let a = ExperimentPlan::default();
        let b = ExperimentPlan {
            jobs: 4,
            out: Some("x".into()),
            ..a.clone()
        };
        assert_eq!(a.config_hash(), b.config_hash());
        let mut c = a.clone();
        c.set("train", "lr", "0.002").unwrap();
        assert_ne!(a.config_hash(), c.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }

    #[test]
    fn settings_from_config() {
        let cfg = ConfigFile::parse(
            "[synth]\nn = 1000\nrho = 0.3\n[train]\nhidden = 8,4\n[run]\nmethods = BASE, ESMM\nseeds = 0..2\n",
        )
        .unwrap();
        let mut p = ExperimentPlan::default();
        p.apply_config(&cfg).unwrap();
        assert_eq!(p.methods, vec![Method::Base, Method::Esmm]);
        assert_eq!(p.seeds, vec![0, 1]);
        assert_eq!(p.train.hidden, vec![8, 4]);
        let DataSource::Synth(s) = &p.source else { panic!() };
        assert_eq!((s.n, s.world.rho), (1000, 0.3));
        assert!(p.set("run", "methods", "BASE,NOPE").is_err());
        assert!(p.set("train", "nope", "1").is_err());
        assert!(p.set("data", "sort", "true").is_err());
    }

    #[test]
    fn nested_fractions() {
        let spec = SynthSpec {
            n: 2_000,
            world: WorldConfig {
                field_count: 3,
                vocab_size: 20,
                embedding_dim: 2,
                probe_n: 2_000,
                target_cvr: 0.2,
                ..WorldConfig::default()
            },
            seed: 1,
        };
        let (_, dataset, truth) = spec.generate(0).unwrap();
        let data = SeedData {
            dataset,
            truth: Some(truth),
        };
        let (small, test_a, _) = split_with_fraction(&data, 0.1, 9).unwrap();
        let (big, test_b, tt) = split_with_fraction(&data, 0.5, 9).unwrap();
        assert_eq!(test_a, test_b);
        assert_eq!(tt.unwrap().len(), test_a.len());
        assert_eq!(small.len(), 100);
        assert_eq!(big.len(), 500);
        assert!(small.samples().iter().all(|s| big.samples().contains(s)));
    }

    #[test]
    fn selftest_passes() {
        let r = auc_selftest(200, 3).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn gradcheck_detects_corruption() {
        let plan = GradcheckPlan {
            trials: 2,
            ..GradcheckPlan::default()
        };
        assert!(cmd_gradcheck(&plan).unwrap().passed);
        let bad = GradcheckPlan {
            corrupt: true,
            ..plan.clone()
        };
        assert!(!cmd_gradcheck(&bad).unwrap().passed);
        assert!(cmd_gradcheck(&GradcheckPlan { trials: 0, ..plan }).is_err());
    }
}
