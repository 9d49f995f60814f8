//! Experiment configuration, the training loop, and artifact emission.
//!
//! One experiment = one planted task + one optimizer + one importance metric
//! + the budget allocator, driven for `t_total` steps:
//!
//! 1. warm-up at `warmup_lr` (IVON only; Adam warms up at the base rate)
//!    with every triplet active,
//! 2. cubic budget decay with an allocation pass every `allocate_every`
//!    steps — score all triplets, keep the scheduled top-`b`, mask the rest,
//! 3. a final phase at the target budget where allocation keeps running, so
//!    triplets can still trade places at a fixed total.
//!
//! Everything is driven by [`ExperimentConfig`] and a seed; a run writes its
//! artifacts (resolved config, metrics JSON-lines, rank CSV, best checkpoint,
//! final snapshots) into one directory and is bit-reproducible: same config,
//! same bytes.

use crate::budget::{allocate, default_b_init, rank_rows_to_csv, BudgetSchedule, RankRow};
use crate::error::{Error, Result};
use crate::model::{AdapterModel, TargetBatch};
use crate::numerics::SplitMix64;
use crate::optim::{
    AdamConfig, AdamState, GaussianState, IvonConfig, LrSchedule, Optimizer, OptimizerSnapshot,
};
use crate::scoring::{posterior_scores, sensitivity, ImportanceState, ScoreEma, ScorerKind};
use crate::task::{SyntheticTask, Targets, TaskConfig, TaskKind};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// The one environment variable the harness reads: the root directory that
/// relative output paths are resolved against.
pub const OUT_DIR_ENV: &str = "ADALORA_OUT_DIR";

/// Label used in summaries for runs with the allocator disabled.
pub const FIXED_RANK_VARIANT: &str = "fixed_rank_lora";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Ivon,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Ivon => "ivon",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ivon" => Ok(OptimizerKind::Ivon),
            "adam" => Ok(OptimizerKind::Adam),
            other => {
                Err(Error::InvalidConfig(format!("unknown optimizer '{other}'; expected ivon or adam")))
            }
        }
    }
}

/// Full experiment recipe. Every field has a default (the canonical planted
/// task at its validated operating point), unknown keys are rejected, and the
/// whole struct is validated by [`ExperimentConfig::resolve`] before any
/// training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// `"ivon"` or `"adam"`.
    pub optimizer: String,
    /// Importance metric: `"sensitivity"`, `"snr_mean"`, `"snr_abs"`,
    /// `"magnitude"`, or `"inv_sigma"`. The posterior metrics require ivon.
    pub scorer: String,
    /// `"regression"` or `"classification"`.
    pub task_kind: String,
    /// Seed for everything run-side: adapter init, posterior draws, batches.
    pub seed: u64,
    /// Seed for the task itself: teacher, planted deltas, data.
    pub task_seed: u64,
    /// Output directory; relative paths resolve against `ADALORA_OUT_DIR`
    /// (or the working directory). Default: `runs/<derived name>`.
    pub out_dir: Option<String>,

    // -- task --
    pub dims: Vec<usize>,
    pub planted_ranks: Vec<usize>,
    pub base_stds: Vec<f64>,
    pub delta_scale: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub noise_std: f64,

    // -- ranks and budget --
    /// Per-layer target rank; the final budget is `target_rank * n_layers`.
    pub target_rank: usize,
    /// Per-layer starting rank (adapter capacity). Default: `round(1.5 *
    /// target_rank)`.
    pub init_rank: Option<usize>,
    /// Starting total budget. Default: `round(1.5 * b_target)`.
    pub b_init: Option<usize>,
    /// Disable the allocator entirely: every layer keeps exactly
    /// `target_rank` active triplets from start to finish.
    pub fixed_rank: bool,

    // -- schedule --
    pub t_total: u64,
    pub t_warmup: u64,
    pub t_final: u64,
    pub allocate_every: u64,
    pub eval_every: u64,
    /// Also write the rank CSV every this many steps (always written at the
    /// end).
    pub ranks_every: Option<u64>,

    // -- optimization --
    pub batch_size: usize,
    pub lr: f64,
    /// Warm-up learning rate, used by ivon for `t <= t_warmup`. Large models
    /// want this high (e.g. 2.0); the desk-scale default is tuned to the
    /// canonical task.
    pub warmup_lr: f64,
    pub gamma_orth: f64,
    pub init_std: f64,
    /// Posterior draws averaged per step (ivon only).
    pub mc_samples: usize,

    // -- ivon --
    /// Effective sample size; default: `n_train`.
    pub lambda_ess: Option<f64>,
    pub ivon_beta1: f64,
    pub ivon_beta2: f64,
    pub ivon_delta: f64,
    pub h_init: f64,

    // -- scoring --
    pub sens_beta1: f64,
    pub sens_beta2: f64,
    /// Optional EMA smoothing applied to *any* metric's per-scalar scores at
    /// allocation time; off by default (sensitivity has its own smoothing).
    pub score_ema_beta: Option<f64>,
    /// Record triplet scores of both sensitivity and snr_mean at every
    /// allocation step (ivon only) for the correlation report.
    pub record_score_trace: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let task = TaskConfig::default();
        ExperimentConfig {
            optimizer: "ivon".into(),
            scorer: "snr_mean".into(),
            task_kind: task.kind.name().into(),
            seed: 2000,
            task_seed: task.seed,
            out_dir: None,
            dims: task.dims,
            planted_ranks: task.planted_ranks,
            base_stds: task.base_stds,
            delta_scale: task.delta_scale,
            n_train: task.n_train,
            n_val: task.n_val,
            noise_std: task.noise_std,
            target_rank: 1,
            init_rank: None,
            b_init: None,
            fixed_rank: false,
            t_total: 1500,
            t_warmup: 300,
            t_final: 300,
            allocate_every: 100,
            eval_every: 50,
            ranks_every: None,
            batch_size: 64,
            lr: 0.1,
            warmup_lr: 0.5,
            gamma_orth: 0.1,
            init_std: 0.02,
            mc_samples: 1,
            lambda_ess: None,
            ivon_beta1: 0.9,
            ivon_beta2: 0.999,
            ivon_delta: 1e-4,
            h_init: 1.0,
            sens_beta1: 0.85,
            sens_beta2: 0.85,
            score_ema_beta: None,
            record_score_trace: false,
        }
    }
}

/// Config after validation: names parsed, optional knobs filled in.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub config: ExperimentConfig,
    pub optimizer: OptimizerKind,
    pub scorer: ScorerKind,
    pub task: TaskConfig,
    pub init_rank: usize,
    pub b_target: usize,
    pub budget: BudgetSchedule,
    pub lr: LrSchedule,
    pub lambda_ess: f64,
}

impl ExperimentConfig {
    /// Validates every field and resolves the derived quantities. Errors
    /// here are the "before any training" contract: a bad metric/optimizer
    /// pairing or an inconsistent schedule never reaches the loop.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let optimizer: OptimizerKind = self.optimizer.parse()?;
        let scorer: ScorerKind = self.scorer.parse()?;
        if scorer.is_posterior_based() && optimizer == OptimizerKind::Adam {
            return Err(Error::InvalidConfig(format!(
                "scorer '{scorer}' reads the variational posterior; it cannot run under adam"
            )));
        }
        if self.record_score_trace && optimizer == OptimizerKind::Adam {
            return Err(Error::InvalidConfig(
                "score traces compare sensitivity with snr_mean, which needs the ivon posterior"
                    .into(),
            ));
        }
        let kind: TaskKind = self.task_kind.parse()?;
        let task = TaskConfig {
            dims: self.dims.clone(),
            planted_ranks: self.planted_ranks.clone(),
            delta_scale: self.delta_scale,
            base_stds: self.base_stds.clone(),
            n_train: self.n_train,
            n_val: self.n_val,
            noise_std: self.noise_std,
            seed: self.task_seed,
            kind,
        };
        task.validate()?;

        let n_layers = task.n_layers();
        if self.target_rank == 0 {
            return Err(Error::InvalidConfig("target_rank must be positive".into()));
        }
        let init_rank = if self.fixed_rank {
            // Allocator disabled: capacity is exactly the target.
            self.target_rank
        } else {
            self.init_rank.unwrap_or_else(|| (1.5 * self.target_rank as f64).round() as usize)
        };
        if init_rank < self.target_rank {
            return Err(Error::InvalidConfig(format!(
                "init_rank ({init_rank}) must be >= target_rank ({})",
                self.target_rank
            )));
        }
        let max_rank = (0..n_layers).map(|k| task.dims[k].min(task.dims[k + 1])).min().unwrap();
        if init_rank == 0 || init_rank > max_rank {
            return Err(Error::InvalidConfig(format!(
                "init_rank ({init_rank}) must be in 1..={max_rank} for these layer widths"
            )));
        }

        let b_target = self.target_rank * n_layers;
        let capacity = init_rank * n_layers;
        let b_init = if self.fixed_rank {
            b_target
        } else {
            self.b_init.unwrap_or_else(|| default_b_init(b_target))
        };
        if b_init > capacity {
            return Err(Error::InvalidConfig(format!(
                "b_init ({b_init}) exceeds the adapter capacity ({capacity})"
            )));
        }
        let budget = BudgetSchedule {
            b_init,
            b_target,
            t_warmup: self.t_warmup,
            t_final: self.t_final,
            t_total: self.t_total,
        };
        budget.validate()?;
        if self.allocate_every == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig("allocate_every and eval_every must be positive".into()));
        }
        if matches!(self.ranks_every, Some(0)) {
            return Err(Error::InvalidConfig("ranks_every must be positive when set".into()));
        }
        if self.batch_size == 0 || self.batch_size > self.n_train {
            return Err(Error::InvalidConfig(format!(
                "batch_size ({}) must be in 1..={}",
                self.batch_size, self.n_train
            )));
        }
        if self.mc_samples == 0 {
            return Err(Error::InvalidConfig("mc_samples must be positive".into()));
        }
        if !(self.init_std > 0.0) || !self.init_std.is_finite() {
            return Err(Error::InvalidConfig(format!("init_std must be positive, got {}", self.init_std)));
        }
        if !(self.gamma_orth >= 0.0) || !self.gamma_orth.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "gamma_orth must be finite and >= 0, got {}",
                self.gamma_orth
            )));
        }
        let lr = LrSchedule {
            warmup_steps: self.t_warmup,
            // Adam has no elevated warm-up phase: it holds the base rate.
            warmup_lr: match optimizer {
                OptimizerKind::Ivon => self.warmup_lr,
                OptimizerKind::Adam => self.lr,
            },
            base_lr: self.lr,
            total_steps: self.t_total,
        };
        lr.validate()?;
        let lambda_ess = self.lambda_ess.unwrap_or(self.n_train as f64);

        // Normalized copy: optional knobs filled with their resolved values,
        // so the written config is a complete record of the run.
        let mut config = self.clone();
        config.init_rank = Some(init_rank);
        config.b_init = Some(b_init);
        config.lambda_ess = Some(lambda_ess);
        Ok(ResolvedConfig {
            config,
            optimizer,
            scorer,
            task,
            init_rank,
            b_target,
            budget,
            lr,
            lambda_ess,
        })
    }

    /// `variant` column used in summaries: the scorer for adaptive runs, a
    /// fixed label for the LoRA baseline.
    pub fn variant(&self) -> String {
        if self.fixed_rank {
            FIXED_RANK_VARIANT.into()
        } else {
            self.scorer.clone()
        }
    }
}

/// One metrics line, emitted at every evaluation step. `budget` is the
/// scheduled value; `active_rank` is what the model actually holds (they
/// agree at and after every allocation step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub train_loss: f64,
    pub val_metric: f64,
    pub budget: usize,
    pub active_rank: usize,
    pub lr: f64,
    pub score_min: f64,
    pub score_mean: f64,
    pub score_max: f64,
}

/// Best validation point seen so far: the mask set and posterior mean are
/// enough to rebuild the winning model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub step: u64,
    pub val_metric: f64,
    pub masks: Vec<Vec<bool>>,
    pub mu: Vec<f64>,
}

/// Triplet scores of both comparison metrics at one allocation step, in
/// `(layer_id, triplet_index)` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub sensitivity: Vec<f64>,
    pub snr_mean: Vec<f64>,
}

/// Identity + outcome of one finished run; the unit the report aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub optimizer: String,
    pub scorer: String,
    pub task_kind: String,
    pub higher_is_better: bool,
    pub task_seed: u64,
    pub seed: u64,
    pub final_val_metric: f64,
    pub best_val_metric: f64,
    pub best_step: u64,
    pub final_ranks: Vec<usize>,
    pub active_params: usize,
}

/// Everything a run produces, also written to `out_dir` as files.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub records: Vec<MetricRecord>,
    pub summary: RunSummary,
    pub rank_rows: Vec<RankRow>,
    pub best: BestCheckpoint,
    pub trace: Vec<TraceRecord>,
    pub out_dir: PathBuf,
}

/// Resolves the run's output directory: explicit absolute paths win;
/// relative paths (and the derived default) sit under `env_root` when given.
/// The CLI passes the `ADALORA_OUT_DIR` environment variable here.
pub fn resolve_out_dir(config: &ExperimentConfig, env_root: Option<&str>) -> PathBuf {
    let name = config.out_dir.clone().unwrap_or_else(|| {
        format!(
            "runs/{}-{}-t{}-s{}",
            config.optimizer,
            config.variant(),
            config.task_seed,
            config.seed
        )
    });
    let path = PathBuf::from(name);
    if path.is_absolute() {
        return path;
    }
    match env_root {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path,
    }
}

/// `resolve_out_dir` with the root taken from the process environment.
pub fn resolve_out_dir_from_env(config: &ExperimentConfig) -> PathBuf {
    let root = std::env::var(OUT_DIR_ENV).ok();
    resolve_out_dir(config, root.as_deref())
}

/// The two optimizers, kept concrete so the ivon-only multi-sample step
/// stays reachable; everything shared goes through the `Optimizer` trait.
enum Driver {
    Ivon(GaussianState),
    Adam(AdamState),
}

impl Driver {
    fn as_optimizer(&self) -> &dyn Optimizer {
        match self {
            Driver::Ivon(g) => g,
            Driver::Adam(a) => a,
        }
    }

    fn set_lr(&mut self, lr: f64) {
        match self {
            Driver::Ivon(g) => g.set_lr(lr),
            Driver::Adam(a) => a.set_lr(lr),
        }
    }

    fn snapshot(&self) -> OptimizerSnapshot {
        self.as_optimizer().snapshot()
    }

    /// One optimization step on the given batch; returns the batch loss and
    /// the `(theta, grad)` pair the sensitivity stream consumes (the first
    /// draw when several are averaged).
    fn train_step(
        &mut self,
        model: &mut AdapterModel,
        x: &crate::numerics::Matrix,
        target: &TargetBatch<'_>,
        mc_samples: usize,
        rng: &mut SplitMix64,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        match self {
            Driver::Adam(a) => {
                let theta = a.params().to_vec();
                model.set_from_flat(&theta)?;
                let (loss, grad) = model.loss_and_grads(x, target)?;
                a.step(&grad)?;
                Ok((loss, theta, grad))
            }
            Driver::Ivon(g) => {
                if mc_samples == 1 {
                    let theta = g.sample_parameters(rng);
                    model.set_from_flat(&theta)?;
                    let (loss, grad) = model.loss_and_grads(x, target)?;
                    g.step(&theta, &grad)?;
                    Ok((loss, theta, grad))
                } else {
                    let mut draws = Vec::with_capacity(mc_samples);
                    let mut loss_sum = 0.0;
                    for _ in 0..mc_samples {
                        let theta = g.sample_parameters(rng);
                        model.set_from_flat(&theta)?;
                        let (loss, grad) = model.loss_and_grads(x, target)?;
                        loss_sum += loss;
                        draws.push((theta, grad));
                    }
                    g.step_multi(&draws)?;
                    let (theta0, grad0) = draws.swap_remove(0);
                    Ok((loss_sum / mc_samples as f64, theta0, grad0))
                }
            }
        }
    }
}

/// Per-scalar scores of the active metric. Posterior metrics read *only*
/// `(mu, sigma)` from the optimizer — there is no gradient argument on this
/// path, which is the structural form of their zero-overhead claim.
fn per_scalar_scores(
    driver: &Driver,
    importance: &ImportanceState,
    scorer: ScorerKind,
) -> Result<Vec<f64>> {
    if scorer == ScorerKind::Sensitivity {
        return Ok(importance.scores());
    }
    let posterior = driver
        .as_optimizer()
        .posterior()
        .ok_or_else(|| Error::PosteriorUnavailable { scorer: scorer.name().into() })?;
    posterior_scores(scorer, posterior.mean, &posterior.sigma)
}

fn summary_stats(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for &v in values {
        min = min.min(v);
        max = max.max(v);
        sum += v;
    }
    (min, sum / values.len() as f64, max)
}

fn better(candidate: f64, incumbent: f64, higher_is_better: bool) -> bool {
    if higher_is_better {
        candidate > incumbent
    } else {
        candidate < incumbent
    }
}

/// Runs one experiment end to end and writes all artifacts into the resolved
/// output directory:
///
/// - `config_resolved.json` — the normalized config actually used
/// - `metrics.jsonl` — one [`MetricRecord`] per evaluation step
/// - `ranks_final.csv` — final active rank per adapter
/// - `best_checkpoint.json` — masks + posterior mean of the best val step
/// - `model_final.json`, `optimizer_final.json` — end-of-run snapshots
/// - `summary.json` — the [`RunSummary`]
/// - `score_trace.jsonl` — when `record_score_trace` is set
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunMetrics> {
    let resolved = config.resolve()?;
    let out_dir = resolve_out_dir_from_env(config);
    run_resolved(resolved, out_dir)
}

/// `run_experiment` with an explicit output directory (bypasses the
/// environment lookup; used by tests and the sweep driver).
pub fn run_experiment_in(config: &ExperimentConfig, out_dir: &Path) -> Result<RunMetrics> {
    let resolved = config.resolve()?;
    run_resolved(resolved, out_dir.to_path_buf())
}

fn run_resolved(resolved: ResolvedConfig, out_dir: PathBuf) -> Result<RunMetrics> {
    let ResolvedConfig {
        config,
        optimizer,
        scorer,
        task,
        init_rank,
        b_target,
        budget,
        lr,
        lambda_ess,
    } = resolved;

    let task_data = SyntheticTask::generate(&task)?;
    let mut rng_run = SplitMix64::new(config.seed);
    let mut rng_init = rng_run.fork();
    let mut rng_draw = rng_run.fork();
    let mut rng_batch = rng_run.fork();

    let mut model = AdapterModel::new(
        task_data.student_base(),
        init_rank,
        config.init_std,
        config.gamma_orth,
        &mut rng_init,
    )?;
    let flat_dim = model.flat_dim();
    let theta0 = model.to_flat();

    let mut driver = match optimizer {
        OptimizerKind::Ivon => Driver::Ivon(GaussianState::new(
            theta0,
            IvonConfig {
                beta1: config.ivon_beta1,
                beta2: config.ivon_beta2,
                lambda_ess,
                delta: config.ivon_delta,
                h_init: config.h_init,
                lr: config.lr,
            },
        )?),
        OptimizerKind::Adam => {
            Driver::Adam(AdamState::new(theta0, AdamConfig { lr: config.lr, ..AdamConfig::default() })?)
        }
    };

    let mut importance = ImportanceState::new(flat_dim, config.sens_beta1, config.sens_beta2)?;
    let mut score_ema = match config.score_ema_beta {
        Some(beta) => Some(ScoreEma::new(flat_dim, beta)?),
        None => None,
    };

    let x_train = task_data.x_train();
    let x_val = task_data.x_val();
    let (train_targets, val_targets) = match task_data.targets() {
        Targets::Regression { y_train, y_val } => {
            (TargetBatch::Regression(y_train), TargetBatch::Regression(y_val))
        }
        Targets::Classification { y_train, y_val } => {
            (TargetBatch::Classification(y_train), TargetBatch::Classification(y_val))
        }
    };
    let higher_is_better = task.kind.higher_is_better();

    std::fs::create_dir_all(&out_dir)?;
    write_json(&out_dir.join("config_resolved.json"), &config)?;

    let mut perm: Vec<usize> = (0..task.n_train).collect();
    rng_batch.shuffle(&mut perm);
    let mut pos = 0usize;

    let mut records: Vec<MetricRecord> = Vec::new();
    let mut trace: Vec<TraceRecord> = Vec::new();
    let mut best: Option<BestCheckpoint> = None;

    for t in 1..=config.t_total {
        if pos + config.batch_size > task.n_train {
            rng_batch.shuffle(&mut perm);
            pos = 0;
        }
        let idx = &perm[pos..pos + config.batch_size];
        pos += config.batch_size;

        let xb = x_train.select_rows(idx)?;
        let yb_matrix;
        let yb_labels;
        let batch_target = match &train_targets {
            TargetBatch::Regression(y) => {
                yb_matrix = y.select_rows(idx)?;
                TargetBatch::Regression(&yb_matrix)
            }
            TargetBatch::Classification(labels) => {
                yb_labels = idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
                TargetBatch::Classification(&yb_labels)
            }
        };

        let lr_t = lr.lr_at(t);
        driver.set_lr(lr_t);
        let (train_loss, theta, grad) =
            driver.train_step(&mut model, &xb, &batch_target, config.mc_samples, &mut rng_draw)?;
        importance.update(&sensitivity(&theta, &grad)?)?;

        // Allocation: after warm-up, every allocate_every steps; keeps
        // running at constant budget through the final phase.
        if !config.fixed_rank
            && t > config.t_warmup
            && (t - config.t_warmup) % config.allocate_every == 0
        {
            let scheduled = budget.budget_at(t)?;
            let mut per_scalar = per_scalar_scores(&driver, &importance, scorer)?;
            if let Some(ema) = &mut score_ema {
                per_scalar = ema.update(&per_scalar)?.to_vec();
            }
            let triplets = model.triplet_scores(&per_scalar)?;
            let decision = allocate(&triplets, scheduled, t)?;
            model.apply_allocation(&decision)?;

            if config.record_score_trace {
                let sens = model.triplet_scores(&importance.scores())?;
                let snr = model.triplet_scores(&per_scalar_scores(&driver, &importance, ScorerKind::SnrMean)?)?;
                trace.push(TraceRecord {
                    step: t,
                    sensitivity: sens.into_iter().map(|s| s.score).collect(),
                    snr_mean: snr.into_iter().map(|s| s.score).collect(),
                });
            }
        }

        if let Some(every) = config.ranks_every {
            if t % every == 0 {
                let rows = model.rank_distribution("linear");
                std::fs::write(out_dir.join(format!("ranks_step_{t:06}.csv")), rank_rows_to_csv(&rows))?;
            }
        }

        if t % config.eval_every == 0 || t == config.t_total {
            model.set_from_flat(driver.as_optimizer().mean())?;
            let val_metric = model.evaluate(x_val, &val_targets)?;
            let replace = match &best {
                None => true,
                Some(b) => better(val_metric, b.val_metric, higher_is_better),
            };
            if replace {
                best = Some(BestCheckpoint {
                    step: t,
                    val_metric,
                    masks: model.masks(),
                    mu: driver.as_optimizer().mean().to_vec(),
                });
            }
            let per_scalar = per_scalar_scores(&driver, &importance, scorer)?;
            let triplet_scores: Vec<f64> =
                model.triplet_scores(&per_scalar)?.into_iter().map(|s| s.score).collect();
            let (score_min, score_mean, score_max) = summary_stats(&triplet_scores);
            let scheduled = if config.fixed_rank { b_target } else { budget.budget_at(t)? };
            records.push(MetricRecord {
                step: t,
                train_loss,
                val_metric,
                budget: scheduled,
                active_rank: model.total_active_rank(),
                lr: lr_t,
                score_min,
                score_mean,
                score_max,
            });
        }
    }

    // Final state: the model at the posterior mean with its final masks.
    model.set_from_flat(driver.as_optimizer().mean())?;
    let final_val = model.evaluate(x_val, &val_targets)?;
    let rank_rows = model.rank_distribution("linear");
    let best = best.expect("t_total >= 1 guarantees at least one evaluation");

    let summary = RunSummary {
        variant: config.variant(),
        optimizer: config.optimizer.clone(),
        scorer: config.scorer.clone(),
        task_kind: config.task_kind.clone(),
        higher_is_better,
        task_seed: config.task_seed,
        seed: config.seed,
        final_val_metric: final_val,
        best_val_metric: best.val_metric,
        best_step: best.step,
        final_ranks: rank_rows.iter().map(|r| r.rank).collect(),
        active_params: model.total_active_params(),
    };

    write_jsonl(&out_dir.join("metrics.jsonl"), &records)?;
    std::fs::write(out_dir.join("ranks_final.csv"), rank_rows_to_csv(&rank_rows))?;
    write_json(&out_dir.join("best_checkpoint.json"), &best)?;
    write_json(&out_dir.join("model_final.json"), &model.to_snapshot())?;
    write_json(&out_dir.join("optimizer_final.json"), &driver.snapshot())?;
    write_json(&out_dir.join("summary.json"), &summary)?;
    if config.record_score_trace {
        write_jsonl(&out_dir.join("score_trace.jsonl"), &trace)?;
    }

    Ok(RunMetrics { records, summary, rank_rows, best, trace, out_dir })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    std::fs::write(path, body)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> Result<()> {
    let mut body = String::new();
    for v in values {
        body.push_str(&serde_json::to_string(v)?);
        body.push('\n');
    }
    std::fs::write(path, body)?;
    Ok(())
}
