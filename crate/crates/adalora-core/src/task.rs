//! Teacher–student tasks with planted low-rank weight deltas.
//!
//! The teacher is a small stack of linear layers (tanh between layers, linear
//! output). Each layer's weight is `base + delta`, where `delta` has a known
//! rank — possibly zero — built from orthonormal factors with decaying
//! singular values. The student adapts from `base`, so the update it *needs*
//! is exactly the planted delta: per-layer ground-truth importance is known
//! by construction, which is what makes rank-allocation behaviour testable.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SplitMix64};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Which target/metric pair the task produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Continuous targets; validation metric is RMSE (lower is better).
    Regression,
    /// Class labels from teacher-logit argmax; metric is accuracy.
    Classification,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Regression => "regression",
            TaskKind::Classification => "classification",
        }
    }

    /// Metric direction: accuracy counts up, RMSE counts down.
    pub fn higher_is_better(self) -> bool {
        matches!(self, TaskKind::Classification)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(TaskKind::Regression),
            "classification" => Ok(TaskKind::Classification),
            other => Err(Error::InvalidConfig(format!(
                "unknown task kind '{other}'; expected regression or classification"
            ))),
        }
    }
}

/// Generation recipe for one planted task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Layer widths, input first: `dims[i] x dims[i+1]` per layer.
    pub dims: Vec<usize>,
    /// Rank of the planted delta per layer (0 = layer needs no adaptation).
    pub planted_ranks: Vec<usize>,
    /// Leading singular value of each planted delta; the j-th value within a
    /// layer is `delta_scale * (1 - 0.15 j)`.
    pub delta_scale: f64,
    /// Std of the Gaussian base weights, per layer.
    pub base_stds: Vec<f64>,
    pub n_train: usize,
    pub n_val: usize,
    /// Std of the additive target noise (logit jitter for classification).
    pub noise_std: f64,
    pub seed: u64,
    pub kind: TaskKind,
}

impl Default for TaskConfig {
    /// The canonical planted task: four layers with delta ranks {0, 1, 3, 0},
    /// so a correct allocator must concentrate rank on layer 2 (0-based) and
    /// give none to layers 0 and 3. The large output-layer std keeps the
    /// head influential enough that curvature-based scores see the planted
    /// layers too.
    fn default() -> Self {
        TaskConfig {
            dims: vec![16, 20, 20, 20, 8],
            planted_ranks: vec![0, 1, 3, 0],
            delta_scale: 2.0,
            base_stds: vec![0.30, 0.35, 0.35, 0.60],
            n_train: 2048,
            n_val: 512,
            noise_std: 0.01,
            seed: 1000,
            kind: TaskKind::Regression,
        }
    }
}

impl TaskConfig {
    pub fn n_layers(&self) -> usize {
        self.dims.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return Err(Error::InvalidConfig("need at least one layer (two dims)".into()));
        }
        if self.dims.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        let l = self.n_layers();
        if self.planted_ranks.len() != l {
            return Err(Error::InvalidConfig(format!(
                "planted_ranks has {} entries for {l} layers",
                self.planted_ranks.len()
            )));
        }
        if self.base_stds.len() != l {
            return Err(Error::InvalidConfig(format!(
                "base_stds has {} entries for {l} layers",
                self.base_stds.len()
            )));
        }
        for (i, &r) in self.planted_ranks.iter().enumerate() {
            let max = self.dims[i].min(self.dims[i + 1]);
            if r > max {
                return Err(Error::InvalidConfig(format!(
                    "planted rank {r} exceeds min dim {max} at layer {i}"
                )));
            }
        }
        for (i, &s) in self.base_stds.iter().enumerate() {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidConfig(format!("base_stds[{i}] must be positive, got {s}")));
            }
        }
        if !(self.delta_scale >= 0.0) || !self.delta_scale.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "delta_scale must be finite and >= 0, got {}",
                self.delta_scale
            )));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::InvalidConfig("n_train and n_val must be positive".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "noise_std must be finite and >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// Targets for the two task variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Regression { y_train: Matrix, y_val: Matrix },
    Classification { y_train: Vec<usize>, y_val: Vec<usize> },
}

/// A generated task: frozen teacher, student starting point, and data.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    config: TaskConfig,
    /// Per-layer base weights — the student's frozen starting point.
    base: Vec<Matrix>,
    /// Per-layer planted deltas; teacher weight = base + delta.
    delta: Vec<Matrix>,
    x_train: Matrix,
    x_val: Matrix,
    targets: Targets,
}

/// Orthonormalizes the columns of `raw` in place (Gram–Schmidt, run twice for
/// numerical hygiene). Gaussian inputs are almost surely full rank at these
/// sizes; degenerate input is rejected.
fn orthonormal_columns(raw: &Matrix) -> Result<Matrix> {
    let (n, k) = raw.shape();
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| (0..n).map(|i| raw.get(i, j)).collect()).collect();
    for j in 0..k {
        for _pass in 0..2 {
            for prev in 0..j {
                let dot: f64 = (0..n).map(|i| cols[prev][i] * cols[j][i]).sum();
                for i in 0..n {
                    cols[j][i] -= dot * cols[prev][i];
                }
            }
        }
        let norm: f64 = (0..n).map(|i| cols[j][i] * cols[j][i]).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "factor column {j} is numerically dependent; cannot orthonormalize"
            )));
        }
        for i in 0..n {
            cols[j][i] /= norm;
        }
    }
    Matrix::from_fn(n, k, |i, j| cols[j][i])
}

/// Builds a rank-`r` delta `U diag(s) V^T` with orthonormal `U` (d1 x r),
/// `V` (d2 x r) and `s_j = scale * (1 - 0.15 j)`.
fn planted_delta(d1: usize, d2: usize, r: usize, scale: f64, rng: &mut SplitMix64) -> Result<Matrix> {
    if r == 0 {
        return Ok(Matrix::zeros(d1, d2));
    }
    let mut u_raw = Matrix::zeros(d1, r);
    rng.fill_normal(u_raw.as_mut_slice());
    let mut v_raw = Matrix::zeros(d2, r);
    rng.fill_normal(v_raw.as_mut_slice());
    let u = orthonormal_columns(&u_raw)?;
    let v = orthonormal_columns(&v_raw)?;
    Matrix::from_fn(d1, d2, |a, b| {
        (0..r).map(|j| u.get(a, j) * scale * (1.0 - 0.15 * j as f64) * v.get(b, j)).sum()
    })
}

impl SyntheticTask {
    /// Generates teacher, student starting point, and datasets, all from
    /// `config.seed`: the same config reproduces the same task bitwise.
    pub fn generate(config: &TaskConfig) -> Result<SyntheticTask> {
        config.validate()?;
        let mut rng = SplitMix64::new(config.seed);
        let l = config.n_layers();
        let mut base = Vec::with_capacity(l);
        let mut delta = Vec::with_capacity(l);
        for i in 0..l {
            let (d1, d2) = (config.dims[i], config.dims[i + 1]);
            let mut w = Matrix::zeros(d1, d2);
            rng.fill_normal(w.as_mut_slice());
            let w = w.scale(config.base_stds[i])?;
            base.push(w);
            delta.push(planted_delta(d1, d2, config.planted_ranks[i], config.delta_scale, &mut rng)?);
        }

        let n = config.n_train + config.n_val;
        let d_in = config.dims[0];
        let d_out = *config.dims.last().expect("validated");
        let mut x = Matrix::zeros(n, d_in);
        rng.fill_normal(x.as_mut_slice());

        let teacher: Vec<Matrix> =
            base.iter().zip(&delta).map(|(b, d)| b.add(d)).collect::<Result<_>>()?;
        let clean = forward_stack(&teacher, &x)?;
        let mut noise = Matrix::zeros(n, d_out);
        rng.fill_normal(noise.as_mut_slice());
        let noisy = clean.add(&noise.scale(config.noise_std)?)?;

        let split = |m: &Matrix| -> Result<(Matrix, Matrix)> {
            let head = Matrix::from_fn(config.n_train, m.cols(), |i, j| m.get(i, j))?;
            let tail = Matrix::from_fn(config.n_val, m.cols(), |i, j| m.get(config.n_train + i, j))?;
            Ok((head, tail))
        };
        let (x_train, x_val) = split(&x)?;
        let targets = match config.kind {
            TaskKind::Regression => {
                let (y_train, y_val) = split(&noisy)?;
                Targets::Regression { y_train, y_val }
            }
            TaskKind::Classification => {
                let labels: Vec<usize> = (0..n)
                    .map(|i| {
                        let mut best = 0;
                        for j in 1..d_out {
                            if noisy.get(i, j) > noisy.get(i, best) {
                                best = j;
                            }
                        }
                        best
                    })
                    .collect();
                Targets::Classification {
                    y_train: labels[..config.n_train].to_vec(),
                    y_val: labels[config.n_train..].to_vec(),
                }
            }
        };
        Ok(SyntheticTask { config: config.clone(), base, delta, x_train, x_val, targets })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    /// The student's frozen per-layer starting weights (teacher minus delta).
    pub fn student_base(&self) -> &[Matrix] {
        &self.base
    }

    /// The planted per-layer deltas — ground truth for allocation tests.
    pub fn planted_deltas(&self) -> &[Matrix] {
        &self.delta
    }

    pub fn teacher_weights(&self) -> Result<Vec<Matrix>> {
        self.base.iter().zip(&self.delta).map(|(b, d)| b.add(d)).collect()
    }

    pub fn x_train(&self) -> &Matrix {
        &self.x_train
    }

    pub fn x_val(&self) -> &Matrix {
        &self.x_val
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }
}

/// Forward pass through a weight stack: tanh between layers, linear output.
pub fn forward_stack(weights: &[Matrix], x: &Matrix) -> Result<Matrix> {
    let l = weights.len();
    let mut h = x.clone();
    for (i, w) in weights.iter().enumerate() {
        let z = h.matmul(w)?;
        h = if i + 1 < l { z.map(f64::tanh) } else { z };
    }
    Ok(h)
}
