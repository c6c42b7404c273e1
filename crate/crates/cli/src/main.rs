use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use esmm::experiment::{
    auc_selftest, cmd_gradcheck, cmd_run, cmd_sweep, ExperimentPlan, GradcheckPlan, SynthSpec,
};
use esmm::io::{write_log_file, write_truth_file, ConfigFile};
use esmm::synth::{Popularity, WorldConfig};

#[derive(Parser)]
#[command(name = "esmm", version, about = "Entire-space CVR modeling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic log and its truth sidecar.
    Synth(SynthArgs),
    /// Train and evaluate methods over seeds.
    Run(PlanArgs),
    /// Repeat `run` over fractions of the training half.
    Sweep(SweepArgs),
    /// Finite-difference check of the BASE and ESMM graphs.
    Gradcheck(GradcheckArgs),
    /// Sorting AUC against the pairwise oracle.
    AucSelftest(SelftestArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200_000, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, default_value_t = 0.04)]
    ctr: f64,
    #[arg(long, default_value_t = 0.005)]
    cvr: f64,
    #[arg(long, default_value_t = 0.8)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    fields: usize,
    #[arg(long, default_value_t = 500)]
    vocab: usize,
    #[arg(long, default_value_t = 18)]
    dim: usize,
    #[arg(long, default_value_t = 1.5)]
    score_scale: f64,
    /// `zipf`, `zipf:<exponent>` or `uniform`.
    #[arg(long, default_value = "zipf")]
    popularity: String,
    #[arg(long, default_value_t = 100_000)]
    probe_n: usize,
    /// Log file to write.
    #[arg(long, default_value = "synth.tsv")]
    out: PathBuf,
    /// Truth sidecar; defaults to `<out>.truth`.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    /// Flat `key = value` config with sections; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Log file to use instead of a synthetic world.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    truth: Option<PathBuf>,
    /// Accept out-of-order timestamps in `--data`.
    #[arg(long, requires = "data")]
    sort: bool,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: Option<u64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    ctr: Option<f64>,
    #[arg(long)]
    cvr: Option<f64>,
    #[arg(long)]
    score_scale: Option<f64>,
    #[arg(long)]
    synth_seed: Option<u64>,
    /// Comma list from BASE, AMAN, OVERSAMPLE, UNBIAS, DIVISION, ESMM-NS, ESMM.
    #[arg(long)]
    methods: Option<String>,
    /// Comma list; `a..b` ranges allowed.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    aman_rate: Option<f64>,
    #[arg(long)]
    oversample_k: Option<usize>,
    #[arg(long)]
    weight_cap: Option<f64>,
    /// Directory for report files.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    plan: PlanArgs,
    /// Comma list of fractions in (0, 1].
    #[arg(long)]
    fractions: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    /// Double one analytic gradient entry; the check must then fail.
    #[arg(long)]
    corrupt: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    fields: usize,
    #[arg(long, default_value_t = 5)]
    vocab: usize,
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long, default_value = "6,4")]
    hidden: String,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 1000)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure classes mapped to exit codes: usage errors exit 2.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn popularity(s: &str) -> anyhow::Result<Popularity> {
    match s {
        "uniform" => Ok(Popularity::Uniform),
        "zipf" => Ok(Popularity::Zipf(1.1)),
        other => {
            let x = other
                .strip_prefix("zipf:")
                .ok_or_else(|| anyhow::anyhow!("unknown popularity {other:?}"))?;
            Ok(Popularity::Zipf(x.parse()?))
        }
    }
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let world = WorldConfig {
        field_count: a.fields,
        vocab_size: a.vocab,
        embedding_dim: a.dim,
        target_ctr: a.ctr,
        target_cvr: a.cvr,
        rho: a.rho,
        popularity: popularity(&a.popularity).map_err(Failure::Usage)?,
        score_scale: a.score_scale,
        probe_n: a.probe_n,
    };
    world.validate().map_err(|e| Failure::Usage(e.into()))?;
    let spec = SynthSpec {
        world,
        n: a.n as usize,
        seed: a.seed,
    };
    eprintln!("generating {} impressions", spec.n);
    let (gt, d, truths) = spec.generate(0).context("generating synthetic world")?;
    let truth_path = a.truth.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".truth");
        p.into()
    });
    write_log_file(&d, &a.out).context("writing log")?;
    write_truth_file(&truths, &truth_path).context("writing truth sidecar")?;
    let clicks = d.click_count();
    let convs = d.conversion_count();
    println!("log: {}", a.out.display());
    println!("truth: {}", truth_path.display());
    println!("impressions: {}", d.len());
    println!("clicks: {clicks}");
    println!("conversions: {convs}");
    println!("ctr: {:.6} (target {})", clicks as f64 / d.len() as f64, a.ctr);
    let cvr = if clicks == 0 { 0.0 } else { convs as f64 / clicks as f64 };
    println!("cvr among clicks: {cvr:.6} (target {})", a.cvr);
    println!("offsets: b_ctr {:.6} b_cvr {:.6}", gt.b_ctr, gt.b_cvr);
    Ok(())
}

fn build_plan(a: &PlanArgs) -> Result<ExperimentPlan, Failure> {
    let usage = |e: esmm::Error| Failure::Usage(e.into());
    let mut plan = ExperimentPlan::default();
    if let Some(path) = &a.config {
        let cfg = ConfigFile::load(path).map_err(usage)?;
        plan.apply_config(&cfg).map_err(usage)?;
    }
    let mut flags: Vec<(&str, &str, String)> = Vec::new();
    if let Some(p) = &a.data {
        flags.push(("data", "path", p.display().to_string()));
    }
    if let Some(p) = &a.truth {
        flags.push(("data", "truth", p.display().to_string()));
    }
    if a.sort {
        flags.push(("data", "sort", "true".into()));
    }
    let opt = |v: Option<String>, section, key, flags: &mut Vec<(&str, &str, String)>| {
        if let Some(v) = v {
            flags.push((section, key, v));
        }
    };
    opt(a.n.map(|v| v.to_string()), "synth", "n", &mut flags);
    opt(a.rho.map(|v| v.to_string()), "synth", "rho", &mut flags);
    opt(a.ctr.map(|v| v.to_string()), "synth", "ctr", &mut flags);
    opt(a.cvr.map(|v| v.to_string()), "synth", "cvr", &mut flags);
    opt(a.score_scale.map(|v| v.to_string()), "synth", "score_scale", &mut flags);
    opt(a.synth_seed.map(|v| v.to_string()), "synth", "seed", &mut flags);
    opt(a.methods.clone(), "run", "methods", &mut flags);
    opt(a.seeds.clone(), "run", "seeds", &mut flags);
    opt(a.jobs.map(|v| v.to_string()), "run", "jobs", &mut flags);
    opt(a.epochs.map(|v| v.to_string()), "train", "epochs", &mut flags);
    opt(a.lr.map(|v| v.to_string()), "train", "lr", &mut flags);
    opt(a.batch_size.map(|v| v.to_string()), "train", "batch_size", &mut flags);
    opt(a.aman_rate.map(|v| v.to_string()), "sampling", "aman_rate", &mut flags);
    opt(a.oversample_k.map(|v| v.to_string()), "sampling", "oversample_k", &mut flags);
    opt(a.weight_cap.map(|v| v.to_string()), "sampling", "weight_cap", &mut flags);
    opt(a.out.as_ref().map(|p| p.display().to_string()), "run", "out", &mut flags);
    for (section, key, value) in flags {
        plan.set(section, key, &value).map_err(usage)?;
    }
    Ok(plan)
}

fn run(a: PlanArgs) -> Result<(), Failure> {
    let plan = build_plan(&a)?;
    plan.validate().map_err(|e| Failure::Usage(e.into()))?;
    eprintln!("config hash {}", plan.config_hash());
    let out = cmd_run(&plan).context("running plan")?;
    print!("{}", out.report.to_display());
    for (seed, why) in &out.report.failed {
        eprintln!("seed {seed} failed: {why}");
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<(), Failure> {
    let mut plan = build_plan(&a.plan)?;
    if let Some(f) = &a.fractions {
        plan.set("sweep", "fractions", f)
            .map_err(|e| Failure::Usage(e.into()))?;
    }
    if plan.fractions.is_empty() {
        return Err(Failure::Usage(anyhow::anyhow!("empty fraction grid")));
    }
    plan.validate().map_err(|e| Failure::Usage(e.into()))?;
    eprintln!("config hash {}", plan.config_hash());
    let out = cmd_sweep(&plan).context("running sweep")?;
    for (f, r) in out.fractions.iter().zip(&out.reports) {
        println!("fraction {f}");
        print!("{}", r.to_display());
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool, Failure> {
    let hidden = a
        .hidden
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Usage(anyhow::anyhow!("bad --hidden: {e}")))?;
    let plan = GradcheckPlan {
        fields: a.fields,
        vocab: a.vocab,
        dim: a.dim,
        hidden,
        trials: a.trials as usize,
        seed: a.seed,
        corrupt: a.corrupt,
        ..GradcheckPlan::default()
    };
    let s = cmd_gradcheck(&plan).context("gradient check")?;
    for (name, err) in &s.graphs {
        println!("{name:<14} max rel err {err:.3e}");
    }
    println!("{}", if s.passed { "PASS" } else { "FAIL" });
    Ok(s.passed)
}

fn selftest(a: SelftestArgs) -> Result<bool, Failure> {
    let r = auc_selftest(a.instances, a.seed).context("auc self-test")?;
    println!("instances: {}", r.instances);
    println!("max |sorted - pairwise|: {:.3e}", r.max_abs_diff);
    println!("hand case: {}", r.hand_case);
    println!("{}", if r.passed { "PASS" } else { "FAIL" });
    Ok(r.passed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a).map(|_| true),
        Command::Run(a) => run(a).map(|_| true),
        Command::Sweep(a) => sweep(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
        Command::AucSelftest(a) => selftest(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
