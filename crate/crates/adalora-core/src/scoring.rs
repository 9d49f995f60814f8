//! Importance metrics for SVD triplets.
//!
//! Five per-scalar metrics, selected by name (the exact strings are part of
//! the CLI/config contract):
//!
//! - `"sensitivity"` — `|theta * grad|`, EMA-smoothed by [`ImportanceState`];
//!   the only metric that consumes the gradient stream.
//! - `"snr_mean"` — posterior signal-to-noise `|mu| / sigma`.
//! - `"snr_abs"` — signal-to-noise of `|theta|` under the posterior: since
//!   `|theta|` folds the Gaussian, `E|theta|` and `Std|theta|` have closed
//!   forms in terms of the normal CDF.
//! - `"magnitude"` — `|mu|`.
//! - `"inv_sigma"` — `1 / sigma` (posterior precision as confidence).
//!
//! The four posterior metrics are pure functions of `(mu, sigma)` — the
//! state the variational optimizer already maintains — so scoring them adds
//! no gradient-stream bookkeeping whatsoever; that cost structure is part of
//! the contract and is enforced by the signatures here (no gradient
//! argument exists on the posterior path).
//!
//! Per-scalar scores are folded into one score per triplet as
//! `score(lambda_i) + mean(P column i) + mean(Q row i)`; means (not sums)
//! keep layers of different widths comparable.

use crate::adapter::AdapterLayer;
use crate::error::{Error, Result};
use crate::numerics::{normal_cdf, Matrix};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Floor applied to the folded-normal variance radicand before the square
/// root: for large `mu/sigma` it is a difference of nearly equal numbers and
/// float cancellation can drive it a hair negative.
const RADICAND_FLOOR: f64 = 1e-24;

/// Metric selector; `FromStr`/`Display` use the contract strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Sensitivity,
    SnrMean,
    SnrAbs,
    Magnitude,
    InvSigma,
}

impl ScorerKind {
    pub const ALL: [ScorerKind; 5] = [
        ScorerKind::Sensitivity,
        ScorerKind::SnrMean,
        ScorerKind::SnrAbs,
        ScorerKind::Magnitude,
        ScorerKind::InvSigma,
    ];

    /// True for metrics computed from `(mu, sigma)` alone; they require an
    /// optimizer that maintains a posterior.
    pub fn is_posterior_based(self) -> bool {
        !matches!(self, ScorerKind::Sensitivity)
    }

    pub fn name(self) -> &'static str {
        match self {
            ScorerKind::Sensitivity => "sensitivity",
            ScorerKind::SnrMean => "snr_mean",
            ScorerKind::SnrAbs => "snr_abs",
            ScorerKind::Magnitude => "magnitude",
            ScorerKind::InvSigma => "inv_sigma",
        }
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sensitivity" => Ok(ScorerKind::Sensitivity),
            "snr_mean" => Ok(ScorerKind::SnrMean),
            "snr_abs" => Ok(ScorerKind::SnrAbs),
            "magnitude" => Ok(ScorerKind::Magnitude),
            "inv_sigma" => Ok(ScorerKind::InvSigma),
            other => Err(Error::InvalidConfig(format!(
                "unknown scorer '{other}'; expected one of sensitivity, snr_mean, snr_abs, magnitude, inv_sigma"
            ))),
        }
    }
}

/// Raw sensitivity `|theta_i * grad_i|`.
pub fn sensitivity(theta: &[f64], grad: &[f64]) -> Result<Vec<f64>> {
    if theta.len() != grad.len() {
        return Err(Error::ShapeMismatch(format!(
            "sensitivity: theta {} vs grad {}",
            theta.len(),
            grad.len()
        )));
    }
    Ok(theta.iter().zip(grad).map(|(&t, &g)| (t * g).abs()).collect())
}

/// `|mu_i| / sigma_i`.
pub fn snr_mean(mu: &[f64], sigma: &[f64]) -> Result<Vec<f64>> {
    check_mu_sigma(mu, sigma, "snr_mean")?;
    Ok(mu.iter().zip(sigma).map(|(&m, &s)| m.abs() / s).collect())
}

/// Folded-normal signal-to-noise for one scalar:
/// `E|theta| = mu (2 Phi(mu/sigma) - 1) + sigma sqrt(2/pi) exp(-mu^2 / (2 sigma^2))`,
/// `snr = E|theta| / sqrt(sigma^2 + mu^2 - E|theta|^2)`.
pub fn snr_abs_scalar(mu: f64, sigma: f64) -> f64 {
    let z = mu / sigma;
    let sqrt_2_over_pi = (2.0 / std::f64::consts::PI).sqrt();
    let e_abs = mu * (2.0 * normal_cdf(z) - 1.0) + sigma * sqrt_2_over_pi * (-0.5 * z * z).exp();
    let radicand = (sigma * sigma + mu * mu - e_abs * e_abs).max(RADICAND_FLOOR);
    e_abs / radicand.sqrt()
}

/// `snr_abs_scalar` applied entrywise.
pub fn snr_abs(mu: &[f64], sigma: &[f64]) -> Result<Vec<f64>> {
    check_mu_sigma(mu, sigma, "snr_abs")?;
    Ok(mu.iter().zip(sigma).map(|(&m, &s)| snr_abs_scalar(m, s)).collect())
}

/// `|mu_i|`.
pub fn magnitude(mu: &[f64]) -> Vec<f64> {
    mu.iter().map(|m| m.abs()).collect()
}

/// `1 / sigma_i`.
pub fn inv_sigma(sigma: &[f64]) -> Result<Vec<f64>> {
    for (i, &s) in sigma.iter().enumerate() {
        if !(s > 0.0) {
            return Err(Error::InvalidArgument(format!("inv_sigma: sigma[{i}] = {s}, must be > 0")));
        }
    }
    Ok(sigma.iter().map(|s| 1.0 / s).collect())
}

fn check_mu_sigma(mu: &[f64], sigma: &[f64], op: &str) -> Result<()> {
    if mu.len() != sigma.len() {
        return Err(Error::ShapeMismatch(format!("{op}: mu {} vs sigma {}", mu.len(), sigma.len())));
    }
    for (i, &s) in sigma.iter().enumerate() {
        if !(s > 0.0) {
            return Err(Error::InvalidArgument(format!("{op}: sigma[{i}] = {s}, must be > 0")));
        }
    }
    Ok(())
}

/// Per-scalar scores for a posterior-based metric. This is the whole
/// interface of the posterior scorers: mean and sigma in, scores out — no
/// gradient anywhere. Calling it with `"sensitivity"` is a contract error.
pub fn posterior_scores(kind: ScorerKind, mu: &[f64], sigma: &[f64]) -> Result<Vec<f64>> {
    match kind {
        ScorerKind::SnrMean => snr_mean(mu, sigma),
        ScorerKind::SnrAbs => snr_abs(mu, sigma),
        ScorerKind::Magnitude => {
            check_mu_sigma(mu, sigma, "magnitude")?;
            Ok(magnitude(mu))
        }
        ScorerKind::InvSigma => inv_sigma(sigma),
        ScorerKind::Sensitivity => Err(Error::InvalidArgument(
            "sensitivity is gradient-based; it has no posterior form".into(),
        )),
    }
}

/// EMA smoothing state for the sensitivity metric.
///
/// Per update with raw sensitivities `I^t`:
/// `Ibar^t = beta1 Ibar^{t-1} + (1-beta1) I^t` (smoothed sensitivity), then
/// `Ubar^t = beta2 Ubar^{t-1} + (1-beta2) |I^t - Ibar^t|` (local uncertainty,
/// computed against the *fresh* `Ibar^t`), and the score is
/// `s^t = Ibar^t * Ubar^t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceState {
    i_bar: Vec<f64>,
    u_bar: Vec<f64>,
    beta1: f64,
    beta2: f64,
    step: u64,
}

impl ImportanceState {
    pub fn new(dim: usize, beta1: f64, beta2: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("empty importance state".into()));
        }
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidConfig(format!("importance {name} must be in (0,1), got {b}")));
            }
        }
        Ok(ImportanceState { i_bar: vec![0.0; dim], u_bar: vec![0.0; dim], beta1, beta2, step: 0 })
    }

    pub fn i_bar(&self) -> &[f64] {
        &self.i_bar
    }

    pub fn u_bar(&self) -> &[f64] {
        &self.u_bar
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies both recursions and returns the updated scores `s^t`.
    pub fn update(&mut self, i_t: &[f64]) -> Result<Vec<f64>> {
        if i_t.len() != self.i_bar.len() {
            return Err(Error::ShapeMismatch(format!(
                "importance update: {} vs state {}",
                i_t.len(),
                self.i_bar.len()
            )));
        }
        for (idx, &v) in i_t.iter().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "importance update: I[{idx}] = {v}, must be finite and >= 0"
                )));
            }
        }
        for i in 0..self.i_bar.len() {
            self.i_bar[i] = self.beta1 * self.i_bar[i] + (1.0 - self.beta1) * i_t[i];
            self.u_bar[i] =
                self.beta2 * self.u_bar[i] + (1.0 - self.beta2) * (i_t[i] - self.i_bar[i]).abs();
        }
        self.step += 1;
        Ok(self.scores())
    }

    /// `s = Ibar ⊙ Ubar`; all zeros before the first update.
    pub fn scores(&self) -> Vec<f64> {
        self.i_bar.iter().zip(&self.u_bar).map(|(&i, &u)| i * u).collect()
    }
}

/// Optional EMA applied to any per-scalar score vector (off by default in the
/// harness; sensitivity has its own dedicated smoothing above).
#[derive(Debug, Clone)]
pub struct ScoreEma {
    state: Vec<f64>,
    beta: f64,
    primed: bool,
}

impl ScoreEma {
    pub fn new(dim: usize, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidConfig(format!("score EMA beta must be in (0,1), got {beta}")));
        }
        Ok(ScoreEma { state: vec![0.0; dim], beta, primed: false })
    }

    /// Folds in a new score vector and returns the smoothed scores. The first
    /// observation seeds the state directly (no zero-bias warm-up).
    pub fn update(&mut self, scores: &[f64]) -> Result<&[f64]> {
        if scores.len() != self.state.len() {
            return Err(Error::ShapeMismatch(format!(
                "score EMA: {} vs state {}",
                scores.len(),
                self.state.len()
            )));
        }
        if self.primed {
            for (s, &x) in self.state.iter_mut().zip(scores) {
                *s = self.beta * *s + (1.0 - self.beta) * x;
            }
        } else {
            self.state.copy_from_slice(scores);
            self.primed = true;
        }
        Ok(&self.state)
    }
}

/// Score of one SVD triplet, the unit of allocation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletScore {
    pub layer_id: usize,
    pub triplet_index: usize,
    pub score: f64,
}

/// Folds per-scalar scores (shaped like the layer's `P`, `lambda`, `Q`) into
/// one score per triplet: `s(lambda_i) + mean_a s(P[a,i]) + mean_b s(Q[i,b])`.
pub fn aggregate_triplet(
    layer_id: usize,
    layer: &AdapterLayer,
    p_scores: &Matrix,
    lambda_scores: &[f64],
    q_scores: &Matrix,
) -> Result<Vec<TripletScore>> {
    let (d1, d2) = layer.dims();
    let r = layer.rank();
    if p_scores.shape() != (d1, r) || q_scores.shape() != (r, d2) || lambda_scores.len() != r {
        return Err(Error::ShapeMismatch(format!(
            "aggregate_triplet: scores shaped {}x{} / {} / {}x{} vs layer {d1}x{d2} rank {r}",
            p_scores.rows(),
            p_scores.cols(),
            lambda_scores.len(),
            q_scores.rows(),
            q_scores.cols()
        )));
    }
    let mut out = Vec::with_capacity(r);
    for i in 0..r {
        let p_mean: f64 = (0..d1).map(|a| p_scores.get(a, i)).sum::<f64>() / d1 as f64;
        let q_mean: f64 = (0..d2).map(|b| q_scores.get(i, b)).sum::<f64>() / d2 as f64;
        let score = lambda_scores[i] + p_mean + q_mean;
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("triplet score ({layer_id}, {i}) = {score}")));
        }
        out.push(TripletScore { layer_id, triplet_index: i, score });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SplitMix64;
    use proptest::prelude::*;

    #[test]
    fn scorer_names_round_trip() {
        for kind in ScorerKind::ALL {
            assert_eq!(kind.name().parse::<ScorerKind>().unwrap(), kind);
        }
        assert!("snr".parse::<ScorerKind>().is_err());
        assert!("SNR_MEAN".parse::<ScorerKind>().is_err(), "names are case-sensitive");
        assert!(!ScorerKind::Sensitivity.is_posterior_based());
        assert!(ScorerKind::InvSigma.is_posterior_based());
    }

    #[test]
    fn sensitivity_is_the_absolute_gradient_weight_product() {
        assert_eq!(sensitivity(&[0.0, 0.5], &[3.0, -0.2]).unwrap(), vec![0.0, 0.1]);
        let mut rng = SplitMix64::new(4);
        let theta: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
        let grad: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
        let got = sensitivity(&theta, &grad).unwrap();
        for i in 0..64 {
            assert_eq!(got[i], (theta[i] * grad[i]).abs());
        }
    }

    #[test]
    fn sensitivity_ema_hand_rollouts() {
        let mut st = ImportanceState::new(1, 0.9, 0.9).unwrap();
        st.update(&[1.0]).unwrap();
        assert!((st.i_bar()[0] - 0.1).abs() < 1e-15);

        // From Ibar = 1.0, Ubar = 0: I = 0 gives Ibar = 0.9 and
        // Ubar = 0.1 * |0 - 0.9| = 0.09.
        let mut st2 = ImportanceState { i_bar: vec![1.0], u_bar: vec![0.0], beta1: 0.9, beta2: 0.9, step: 1 };
        let s = st2.update(&[0.0]).unwrap();
        assert!((st2.i_bar()[0] - 0.9).abs() < 1e-15);
        assert!((st2.u_bar()[0] - 0.09).abs() < 1e-15);
        assert!((s[0] - 0.9 * 0.09).abs() < 1e-15);
    }

    #[test]
    fn constant_sensitivity_stream_sends_scores_to_zero() {
        let mut st = ImportanceState::new(1, 0.85, 0.85).unwrap();
        let mut s_last = 0.0;
        for _ in 0..10_000 {
            s_last = st.update(&[2.5]).unwrap()[0];
        }
        // Ubar decays toward |I - Ibar| -> 0, so s << Ibar.
        assert!(s_last < 1e-3 * st.i_bar()[0], "s = {s_last}, Ibar = {}", st.i_bar()[0]);
    }

    #[test]
    fn scores_are_zero_before_any_update() {
        let st = ImportanceState::new(3, 0.85, 0.85).unwrap();
        assert_eq!(st.scores(), vec![0.0; 3]);
    }

    #[test]
    fn negative_raw_sensitivity_is_rejected() {
        let mut st = ImportanceState::new(1, 0.85, 0.85).unwrap();
        assert!(st.update(&[-0.1]).is_err());
    }

    #[test]
    fn snr_mean_cases() {
        assert_eq!(snr_mean(&[0.0], &[2.0]).unwrap(), vec![0.0]);
        assert_eq!(snr_mean(&[3.0], &[1.0]).unwrap(), vec![3.0]);
        assert!(snr_mean(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn snr_abs_at_zero_mean_is_the_scale_free_constant() {
        // sqrt(2/pi) / sqrt(1 - 2/pi), independent of sigma.
        let want = (2.0 / std::f64::consts::PI).sqrt() / (1.0 - 2.0 / std::f64::consts::PI).sqrt();
        assert!((want - 1.3236080967885129).abs() < 1e-15);
        for sigma in [0.1, 1.0, 10.0, 123.0] {
            let got = snr_abs_scalar(0.0, sigma);
            assert!((got - want).abs() < 1e-12, "sigma {sigma}: {got}");
        }
    }

    #[test]
    fn snr_abs_matches_folded_normal_monte_carlo() {
        // Lighter version of the acceptance oracle: 2e5 draws, 1% relative.
        let mut rng = SplitMix64::new(12345);
        for (mu, sigma) in [(0.0, 1.0), (0.5, 1.0), (1.0, 1.0), (2.0, 1.0)] {
            let n = 200_000;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..n {
                let x = (mu + sigma * rng.normal()).abs();
                sum += x;
                sum_sq += x * x;
            }
            let mean = sum / n as f64;
            let std = (sum_sq / n as f64 - mean * mean).sqrt();
            let oracle = mean / std;
            let got = snr_abs_scalar(mu, sigma);
            assert!(
                (got - oracle).abs() / oracle < 0.01,
                "mu {mu}: formula {got} vs MC {oracle}"
            );
        }
    }

    #[test]
    fn snr_abs_approaches_snr_mean_for_large_ratio() {
        for ratio in [6.0, 7.0, 8.0] {
            let a = snr_abs_scalar(ratio, 1.0);
            let m = ratio; // snr_mean at sigma 1
            assert!((a - m).abs() / m <= 1e-4, "ratio {ratio}: {a}");
        }
        // Large-mu example: folded normal is indistinguishable from normal.
        assert!((snr_abs_scalar(5.0, 1.0) - 5.0).abs() < 1e-3);
    }

    #[test]
    fn magnitude_and_inv_sigma_cases() {
        assert_eq!(magnitude(&[-2.0, 0.5]), vec![2.0, 0.5]);
        assert_eq!(inv_sigma(&[0.5, 2.0]).unwrap(), vec![2.0, 0.5]);
        assert!(inv_sigma(&[-1.0]).is_err());
    }

    #[test]
    fn posterior_dispatch_matches_the_individual_metrics() {
        let mu = [0.3, -1.2, 0.0];
        let sigma = [0.5, 1.0, 2.0];
        assert_eq!(posterior_scores(ScorerKind::SnrMean, &mu, &sigma).unwrap(), snr_mean(&mu, &sigma).unwrap());
        assert_eq!(posterior_scores(ScorerKind::SnrAbs, &mu, &sigma).unwrap(), snr_abs(&mu, &sigma).unwrap());
        assert_eq!(posterior_scores(ScorerKind::Magnitude, &mu, &sigma).unwrap(), magnitude(&mu));
        assert_eq!(posterior_scores(ScorerKind::InvSigma, &mu, &sigma).unwrap(), inv_sigma(&sigma).unwrap());
        assert!(posterior_scores(ScorerKind::Sensitivity, &mu, &sigma).is_err());
    }

    #[test]
    fn triplet_aggregation_hand_example() {
        // d1 = d2 = 2, r = 1: lambda score 1, P column {2, 4}, Q row {6, 8}
        // -> 1 + mean(2,4) + mean(6,8) = 1 + 3 + 7 = 11.
        let mut rng = SplitMix64::new(1);
        let layer = AdapterLayer::new(Matrix::zeros(2, 2), 1, 0.02, 0.0, &mut rng).unwrap();
        let p_s = Matrix::from_vec(2, 1, vec![2.0, 4.0]).unwrap();
        let q_s = Matrix::from_vec(1, 2, vec![6.0, 8.0]).unwrap();
        let got = aggregate_triplet(7, &layer, &p_s, &[1.0], &q_s).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].layer_id, 7);
        assert_eq!(got[0].triplet_index, 0);
        assert_eq!(got[0].score, 11.0);
    }

    #[test]
    fn zero_scores_aggregate_to_zero() {
        let mut rng = SplitMix64::new(2);
        let layer = AdapterLayer::new(Matrix::zeros(5, 3), 2, 0.02, 0.0, &mut rng).unwrap();
        let got = aggregate_triplet(
            0,
            &layer,
            &Matrix::zeros(5, 2),
            &[0.0, 0.0],
            &Matrix::zeros(2, 3),
        )
        .unwrap();
        assert!(got.iter().all(|t| t.score == 0.0));
    }

    #[test]
    fn aggregation_matches_independent_recomputation() {
        let mut rng = SplitMix64::new(3);
        let layer = AdapterLayer::new(Matrix::zeros(4, 6), 3, 0.02, 0.0, &mut rng).unwrap();
        let p_s = Matrix::from_fn(4, 3, |_, _| rng.normal().abs()).unwrap();
        let q_s = Matrix::from_fn(3, 6, |_, _| rng.normal().abs()).unwrap();
        let l_s = [0.1, 0.2, 0.3];
        let got = aggregate_triplet(1, &layer, &p_s, &l_s, &q_s).unwrap();
        for i in 0..3 {
            let mut p_sum = 0.0;
            for a in 0..4 {
                p_sum += p_s.get(a, i);
            }
            let mut q_sum = 0.0;
            for b in 0..6 {
                q_sum += q_s.get(i, b);
            }
            let want = l_s[i] + p_sum / 4.0 + q_sum / 6.0;
            assert!((got[i].score - want).abs() < 1e-15);
        }
    }

    #[test]
    fn score_ema_smooths_and_seeds_on_first_observation() {
        let mut ema = ScoreEma::new(2, 0.5).unwrap();
        assert_eq!(ema.update(&[4.0, 2.0]).unwrap(), &[4.0, 2.0]);
        assert_eq!(ema.update(&[0.0, 0.0]).unwrap(), &[2.0, 1.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn snr_mean_is_scale_invariant(mu in -5.0f64..5.0, sigma in 0.01f64..10.0, c in 0.01f64..100.0) {
            let a = snr_mean(&[mu], &[sigma]).unwrap()[0];
            let b = snr_mean(&[c * mu], &[c * sigma]).unwrap()[0];
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }

        #[test]
        fn all_metrics_are_nonnegative_and_finite(mu in -10.0f64..10.0, sigma in 0.01f64..10.0) {
            for kind in [ScorerKind::SnrMean, ScorerKind::SnrAbs, ScorerKind::Magnitude, ScorerKind::InvSigma] {
                let v = posterior_scores(kind, &[mu], &[sigma]).unwrap()[0];
                prop_assert!(v.is_finite() && v >= 0.0, "{kind}: {v}");
            }
        }

        #[test]
        fn snr_abs_stays_finite_out_to_extreme_ratios(ratio in 0.0f64..8.0, sigma in 0.01f64..10.0) {
            let v = snr_abs_scalar(ratio * sigma, sigma);
            prop_assert!(v.is_finite() && v >= 0.0);
        }
    }
}
