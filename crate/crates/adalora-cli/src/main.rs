//! `adalora` — run and analyze adaptive low-rank adaptation experiments.
//!
//! Subcommands:
//! - `run`: one experiment (optimizer + scorer + allocator on a planted task)
//! - `sweep`: a scorer × seed grid plus an optional fixed-rank baseline
//! - `report`: aggregate run summaries into the comparison table
//! - `trace`: rank-correlation report from a recorded score trace
//!
//! Configuration precedence: built-in defaults < JSON config file (`--config`)
//! < individual flags. Relative output paths resolve against the
//! `ADALORA_OUT_DIR` environment variable when it is set.

use adalora_core::report::{compare_scorers, render_trace_report, score_trace_report};
use adalora_core::train::{
    resolve_out_dir_from_env, run_experiment_in, ExperimentConfig, RunMetrics, RunSummary,
    TraceRecord, OUT_DIR_ENV,
};
use clap::{Args, Parser, Subcommand};
use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "adalora",
    version,
    about = "Adaptive low-rank adaptation on planted synthetic tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run(RunArgs),
    /// Run a scorer x seed grid (optionally plus a fixed-rank baseline) and
    /// aggregate the results.
    Sweep(SweepArgs),
    /// Aggregate existing run directories into the comparison table.
    Report(ReportArgs),
    /// Print the sensitivity/snr_mean rank-agreement report of one run.
    Trace(TraceArgs),
}

/// Experiment knobs shared by `run` and `sweep`. Every flag mirrors one
/// config field and overrides both the defaults and the config file.
#[derive(Args)]
struct ConfigArgs {
    /// JSON config file with `ExperimentConfig` keys (unknown keys rejected).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Optimizer: ivon or adam.
    #[arg(long)]
    optimizer: Option<String>,
    /// Importance metric: sensitivity, snr_mean, snr_abs, magnitude, inv_sigma.
    #[arg(long)]
    scorer: Option<String>,
    /// Task flavor: regression or classification.
    #[arg(long)]
    task_kind: Option<String>,
    /// Run seed (adapter init, posterior draws, batch order).
    #[arg(long)]
    seed: Option<u64>,
    /// Task seed (teacher weights, planted deltas, data).
    #[arg(long)]
    task_seed: Option<u64>,
    /// Output directory (relative paths go under ADALORA_OUT_DIR).
    #[arg(long)]
    out_dir: Option<String>,

    /// Layer widths, comma separated (e.g. 16,20,20,20,8).
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    /// Planted delta rank per layer, comma separated (e.g. 0,1,3,0).
    #[arg(long, value_delimiter = ',')]
    planted_ranks: Option<Vec<usize>>,
    /// Teacher base-weight std per layer, comma separated.
    #[arg(long, value_delimiter = ',')]
    base_stds: Option<Vec<f64>>,
    /// Scale of the leading planted singular value.
    #[arg(long)]
    delta_scale: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,

    /// Target rank per layer (final budget = target_rank * n_layers).
    #[arg(long)]
    target_rank: Option<usize>,
    /// Starting rank per layer (default: round(1.5 * target_rank)).
    #[arg(long)]
    init_rank: Option<usize>,
    /// Starting total budget (default: round(1.5 * target)).
    #[arg(long)]
    b_init: Option<usize>,
    /// Disable the allocator: plain fixed-rank adapters at target_rank.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    fixed_rank: Option<bool>,

    #[arg(long)]
    t_total: Option<u64>,
    #[arg(long)]
    t_warmup: Option<u64>,
    #[arg(long)]
    t_final: Option<u64>,
    #[arg(long)]
    allocate_every: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    /// Also dump the rank CSV every N steps.
    #[arg(long)]
    ranks_every: Option<u64>,

    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Elevated warm-up learning rate (ivon only).
    #[arg(long)]
    warmup_lr: Option<f64>,
    /// Orthogonality penalty weight.
    #[arg(long)]
    gamma_orth: Option<f64>,
    #[arg(long)]
    init_std: Option<f64>,
    /// Posterior draws averaged per step (ivon only).
    #[arg(long)]
    mc_samples: Option<usize>,

    /// IVON effective sample size (default: n_train).
    #[arg(long)]
    lambda_ess: Option<f64>,
    #[arg(long)]
    ivon_beta1: Option<f64>,
    #[arg(long)]
    ivon_beta2: Option<f64>,
    #[arg(long)]
    ivon_delta: Option<f64>,
    #[arg(long)]
    h_init: Option<f64>,

    /// Sensitivity EMA decay for the score itself.
    #[arg(long)]
    sens_beta1: Option<f64>,
    /// Sensitivity EMA decay for the uncertainty term.
    #[arg(long)]
    sens_beta2: Option<f64>,
    /// Optional EMA smoothing over any metric's scores at allocation time.
    #[arg(long)]
    score_ema_beta: Option<f64>,
    /// Record sensitivity + snr_mean triplet scores at every allocation step.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    record_score_trace: Option<bool>,
}

impl ConfigArgs {
    /// defaults < config file < flags.
    fn build(&self) -> Result<ExperimentConfig, Box<dyn Error>> {
        let mut c = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
                serde_json::from_str::<ExperimentConfig>(&text)
                    .map_err(|e| format!("bad config {}: {e}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        macro_rules! over {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field { c.$field = v.clone(); })*
            };
        }
        over!(optimizer, scorer, task_kind, dims, planted_ranks, base_stds);
        macro_rules! over_copy {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field { c.$field = v; })*
            };
        }
        over_copy!(
            seed, task_seed, delta_scale, n_train, n_val, noise_std, target_rank, fixed_rank,
            t_total, t_warmup, t_final, allocate_every, eval_every, batch_size, lr, warmup_lr,
            gamma_orth, init_std, mc_samples, ivon_beta1, ivon_beta2, ivon_delta, h_init,
            sens_beta1, sens_beta2, record_score_trace,
        );
        // Optional-valued fields: a flag sets the option, absence keeps the
        // file/default value.
        if let Some(v) = &self.out_dir {
            c.out_dir = Some(v.clone());
        }
        if let Some(v) = self.init_rank {
            c.init_rank = Some(v);
        }
        if let Some(v) = self.b_init {
            c.b_init = Some(v);
        }
        if let Some(v) = self.ranks_every {
            c.ranks_every = Some(v);
        }
        if let Some(v) = self.lambda_ess {
            c.lambda_ess = Some(v);
        }
        if let Some(v) = self.score_ema_beta {
            c.score_ema_beta = Some(v);
        }
        Ok(c)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Scorers to sweep, comma separated.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "sensitivity,snr_mean,snr_abs,magnitude,inv_sigma"
    )]
    scorers: Vec<String>,
    /// Seeds per scorer; run i uses task_seed+i and seed+i.
    #[arg(long, default_value_t = 5)]
    runs: u64,
    /// Also run the fixed-rank baseline on the same seeds.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value_t = true)]
    include_fixed: bool,
    /// Directory receiving one subdirectory per run plus the summary table.
    #[arg(long, default_value = "sweep")]
    out_root: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory scanned recursively for summary.json files.
    #[arg(default_value = ".")]
    dir: PathBuf,
    /// Also write summary.csv and summary.txt under the scanned directory.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value_t = false)]
    write: bool,
}

#[derive(Args)]
struct TraceArgs {
    /// Run directory containing score_trace.jsonl.
    dir: PathBuf,
}

fn main() {
    if let Err(e) = dispatch(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<(), Box<dyn Error>> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Report(args) => cmd_report(args),
        Command::Trace(args) => cmd_trace(args),
    }
}

fn cmd_run(args: RunArgs) -> Result<(), Box<dyn Error>> {
    let config = args.config.build()?;
    let out_dir = resolve_out_dir_from_env(&config);
    let run = run_experiment_in(&config, &out_dir)?;
    print_run(&run);
    Ok(())
}

fn print_run(run: &RunMetrics) {
    let s = &run.summary;
    let metric_name = if s.higher_is_better { "accuracy" } else { "rmse" };
    println!(
        "{} [{} / {}]: final {metric_name} {:.6}, best {:.6} @ step {}, ranks {:?}, {} active params",
        run.out_dir.display(),
        s.optimizer,
        s.variant,
        s.final_val_metric,
        s.best_val_metric,
        s.best_step,
        s.final_ranks,
        s.active_params
    );
}

/// `--out-root` resolves like any other relative output path.
fn resolve_root(root: &str) -> PathBuf {
    let path = PathBuf::from(root);
    if path.is_absolute() {
        return path;
    }
    match std::env::var(OUT_DIR_ENV) {
        Ok(r) if !r.is_empty() => PathBuf::from(r).join(path),
        _ => path,
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Box<dyn Error>> {
    let base = args.config.build()?;
    if args.runs == 0 {
        return Err("sweep needs at least one run per scorer".into());
    }
    if args.scorers.is_empty() {
        return Err("sweep needs at least one scorer".into());
    }
    let root = resolve_root(&args.out_root);
    fs::create_dir_all(&root)?;

    let mut summaries: Vec<RunSummary> = Vec::new();
    let mut variants: Vec<(String, bool)> =
        args.scorers.iter().map(|s| (s.clone(), false)).collect();
    if args.include_fixed {
        // The baseline still names a scorer (it feeds the score columns of
        // the metrics log); reuse the first swept one.
        variants.push((args.scorers[0].clone(), true));
    }

    for (scorer, fixed) in &variants {
        for i in 0..args.runs {
            let mut config = base.clone();
            config.scorer = scorer.clone();
            config.fixed_rank = *fixed;
            config.task_seed = base.task_seed + i;
            config.seed = base.seed + i;
            config.out_dir = None;
            let name = format!(
                "{}-{}-t{}-s{}",
                config.optimizer,
                config.variant(),
                config.task_seed,
                config.seed
            );
            let run = run_experiment_in(&config, &root.join(name))?;
            print_run(&run);
            summaries.push(run.summary);
        }
    }

    let report = compare_scorers(&summaries)?;
    fs::write(root.join("summary.csv"), report.to_csv())?;
    let text = report.render_text();
    fs::write(root.join("summary.txt"), &text)?;
    println!("\n{text}");
    println!("summary written to {}", root.join("summary.csv").display());
    Ok(())
}

/// All summary.json files under `dir`, depth-first, stable order.
fn collect_summaries(dir: &Path, out: &mut Vec<RunSummary>) -> Result<(), Box<dyn Error>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_summaries(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "summary.json") {
            let text = fs::read_to_string(&path)?;
            let summary: RunSummary = serde_json::from_str(&text)
                .map_err(|e| format!("bad summary {}: {e}", path.display()))?;
            out.push(summary);
        }
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), Box<dyn Error>> {
    let mut summaries = Vec::new();
    collect_summaries(&args.dir, &mut summaries)?;
    if summaries.is_empty() {
        return Err(format!("no summary.json files under {}", args.dir.display()).into());
    }
    let report = compare_scorers(&summaries)?;
    if args.write {
        fs::write(args.dir.join("summary.csv"), report.to_csv())?;
        fs::write(args.dir.join("summary.txt"), report.render_text())?;
    }
    print!("{}", report.render_text());
    Ok(())
}

fn cmd_trace(args: TraceArgs) -> Result<(), Box<dyn Error>> {
    let path = args.dir.join("score_trace.jsonl");
    let text = fs::read_to_string(&path)
        .map_err(|e| format!("cannot read {} (was the run recorded with record_score_trace?): {e}", path.display()))?;
    let trace: Vec<TraceRecord> = text
        .lines()
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .map_err(|e| format!("bad trace {}: {e}", path.display()))?;
    let agreements = score_trace_report(&trace)?;
    print!("{}", render_trace_report(&agreements));
    Ok(())
}
