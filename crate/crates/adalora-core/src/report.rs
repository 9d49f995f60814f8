//! Cross-run reports: the scorer comparison table and the score-agreement
//! trace.
//!
//! Both consume artifacts that [`crate::train`] wrote — run summaries and
//! score traces — so a report never needs the model or the data, only the
//! files.

use crate::error::{Error, Result};
use crate::stats::{mean, sample_std, spearman};
use crate::train::{RunSummary, TraceRecord};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// One row of the comparison table: a (variant, optimizer) group aggregated
/// over its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: String,
    pub optimizer: String,
    pub n_runs: usize,
    pub mean_final: f64,
    pub std_final: f64,
    pub mean_best: f64,
    pub std_best: f64,
    pub mean_active_params: f64,
    /// Rank of `mean_final` within the table (best, second...), direction
    /// aware.
    pub is_best: bool,
    pub is_second_best: bool,
}

/// The comparison table plus what "better" means for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub higher_is_better: bool,
    pub rows: Vec<ComparisonRow>,
}

/// Groups summaries by (variant, optimizer) and aggregates the validation
/// metrics per group. Every group must cover the *same* multiset of
/// `(task_seed, seed)` pairs — a half-finished sweep would otherwise compare
/// different tasks — and all runs must agree on the metric direction.
pub fn compare_scorers(summaries: &[RunSummary]) -> Result<ComparisonReport> {
    if summaries.is_empty() {
        return Err(Error::InvalidArgument("no run summaries to compare".into()));
    }
    let higher_is_better = summaries[0].higher_is_better;
    if summaries.iter().any(|s| s.higher_is_better != higher_is_better) {
        return Err(Error::InvalidArgument(
            "cannot compare runs with opposite metric directions".into(),
        ));
    }

    let mut groups: BTreeMap<(String, String), Vec<&RunSummary>> = BTreeMap::new();
    for s in summaries {
        groups.entry((s.variant.clone(), s.optimizer.clone())).or_default().push(s);
    }

    let mut seed_sets: Vec<Vec<(u64, u64)>> = Vec::new();
    for members in groups.values() {
        let mut seeds: Vec<(u64, u64)> = members.iter().map(|s| (s.task_seed, s.seed)).collect();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != members.len() {
            return Err(Error::InvalidArgument(format!(
                "duplicate (task_seed, seed) pair in group ({}, {})",
                members[0].variant, members[0].optimizer
            )));
        }
        seed_sets.push(seeds);
    }
    if seed_sets.iter().any(|s| s != &seed_sets[0]) {
        return Err(Error::InvalidArgument(
            "groups cover different (task_seed, seed) sets; refusing to compare unlike tasks"
                .into(),
        ));
    }

    let mut rows: Vec<ComparisonRow> = Vec::new();
    for ((variant, optimizer), members) in &groups {
        let finals: Vec<f64> = members.iter().map(|s| s.final_val_metric).collect();
        let bests: Vec<f64> = members.iter().map(|s| s.best_val_metric).collect();
        let params: Vec<f64> = members.iter().map(|s| s.active_params as f64).collect();
        // Groups are non-empty by construction, so the stats always exist.
        rows.push(ComparisonRow {
            variant: variant.clone(),
            optimizer: optimizer.clone(),
            n_runs: members.len(),
            mean_final: mean(&finals).unwrap(),
            std_final: sample_std(&finals).unwrap(),
            mean_best: mean(&bests).unwrap(),
            std_best: sample_std(&bests).unwrap(),
            mean_active_params: mean(&params).unwrap(),
            is_best: false,
            is_second_best: false,
        });
    }

    // Mark the two leading groups by mean final metric, direction aware.
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        let cmp = rows[a].mean_final.total_cmp(&rows[b].mean_final);
        if higher_is_better {
            cmp.reverse()
        } else {
            cmp
        }
    });
    if let Some(&i) = order.first() {
        rows[i].is_best = true;
    }
    if let Some(&i) = order.get(1) {
        rows[i].is_second_best = true;
    }

    Ok(ComparisonReport { higher_is_better, rows })
}

impl ComparisonReport {
    /// CSV form, one group per line, stable column order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "variant,optimizer,n_runs,mean_final,std_final,mean_best,std_best,mean_active_params,mark\n",
        );
        for r in &self.rows {
            let mark = if r.is_best {
                "best"
            } else if r.is_second_best {
                "second"
            } else {
                ""
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.variant,
                r.optimizer,
                r.n_runs,
                r.mean_final,
                r.std_final,
                r.mean_best,
                r.std_best,
                r.mean_active_params,
                mark
            );
        }
        out
    }

    /// Fixed-width text table for terminals.
    pub fn render_text(&self) -> String {
        let direction = if self.higher_is_better { "higher is better" } else { "lower is better" };
        let mut out = format!("scorer comparison ({direction})\n");
        let _ = writeln!(
            out,
            "{:<18} {:<6} {:>3}  {:>22}  {:>22}  {:>12}",
            "variant", "optim", "n", "final (mean +/- std)", "best (mean +/- std)", "params"
        );
        for r in &self.rows {
            let mark = if r.is_best {
                " <- best"
            } else if r.is_second_best {
                " <- second"
            } else {
                ""
            };
            let _ = writeln!(
                out,
                "{:<18} {:<6} {:>3}  {:>10.6} +/- {:>8.6}  {:>10.6} +/- {:>8.6}  {:>12.1}{}",
                r.variant,
                r.optimizer,
                r.n_runs,
                r.mean_final,
                r.std_final,
                r.mean_best,
                r.std_best,
                r.mean_active_params,
                mark
            );
        }
        out
    }
}

/// Rank agreement between the two score streams at one allocation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceAgreement {
    pub step: u64,
    pub spearman: f64,
}

/// Spearman correlation between the sensitivity and snr_mean triplet scores
/// at every recorded allocation step. Diagnostic only: it quantifies how far
/// the posterior metric's ordering drifts from the gradient metric's, it
/// never feeds back into training.
pub fn score_trace_report(trace: &[TraceRecord]) -> Result<Vec<TraceAgreement>> {
    if trace.is_empty() {
        return Err(Error::InvalidArgument("empty score trace".into()));
    }
    trace
        .iter()
        .map(|rec| {
            let rho = spearman(&rec.sensitivity, &rec.snr_mean).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "rank correlation undefined at step {} (constant or degenerate scores)",
                    rec.step
                ))
            })?;
            Ok(TraceAgreement { step: rec.step, spearman: rho })
        })
        .collect()
}

/// Text form of the trace report.
pub fn render_trace_report(agreements: &[TraceAgreement]) -> String {
    let mut out = String::from("step  spearman(sensitivity, snr_mean)\n");
    for a in agreements {
        let _ = writeln!(out, "{:>5}  {:+.4}", a.step, a.spearman);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(variant: &str, seed: u64, final_val: f64) -> RunSummary {
        RunSummary {
            variant: variant.into(),
            optimizer: "ivon".into(),
            scorer: variant.into(),
            task_kind: "regression".into(),
            higher_is_better: false,
            task_seed: 1000 + seed,
            seed: 2000 + seed,
            final_val_metric: final_val,
            best_val_metric: final_val - 0.01,
            best_step: 100,
            final_ranks: vec![1, 1],
            active_params: 30,
        }
    }

    #[test]
    fn groups_aggregate_and_mark_leaders() {
        let mut rows = Vec::new();
        for seed in 0..3 {
            rows.push(summary("snr_mean", seed, 0.10 + seed as f64 * 0.01));
            rows.push(summary("magnitude", seed, 0.20 + seed as f64 * 0.01));
            rows.push(summary("inv_sigma", seed, 0.15 + seed as f64 * 0.01));
        }
        let report = compare_scorers(&rows).unwrap();
        assert_eq!(report.rows.len(), 3);
        let best = report.rows.iter().find(|r| r.is_best).unwrap();
        assert_eq!(best.variant, "snr_mean");
        assert!((best.mean_final - 0.11).abs() < 1e-12);
        assert!((best.std_final - 0.01).abs() < 1e-12);
        let second = report.rows.iter().find(|r| r.is_second_best).unwrap();
        assert_eq!(second.variant, "inv_sigma");
        assert_eq!(report.rows.iter().filter(|r| r.is_best).count(), 1);
    }

    #[test]
    fn leader_marks_follow_the_metric_direction() {
        let mut rows = Vec::new();
        for seed in 0..2 {
            let mut a = summary("snr_mean", seed, 0.9);
            a.higher_is_better = true;
            let mut b = summary("magnitude", seed, 0.7);
            b.higher_is_better = true;
            rows.push(a);
            rows.push(b);
        }
        let report = compare_scorers(&rows).unwrap();
        assert!(report.higher_is_better);
        assert_eq!(report.rows.iter().find(|r| r.is_best).unwrap().variant, "snr_mean");
    }

    #[test]
    fn mismatched_seed_sets_are_rejected() {
        let rows = vec![
            summary("snr_mean", 0, 0.1),
            summary("snr_mean", 1, 0.1),
            summary("magnitude", 0, 0.2),
            summary("magnitude", 2, 0.2), // different task than snr_mean's
        ];
        let err = compare_scorers(&rows).unwrap_err();
        assert!(err.to_string().contains("different (task_seed, seed) sets"), "{err}");
        // Duplicates inside one group are also structural errors.
        let rows = vec![summary("snr_mean", 0, 0.1), summary("snr_mean", 0, 0.2)];
        assert!(compare_scorers(&rows).is_err());
        // Mixed metric directions never aggregate.
        let mut flipped = summary("magnitude", 0, 0.2);
        flipped.higher_is_better = true;
        assert!(compare_scorers(&[summary("snr_mean", 0, 0.1), flipped]).is_err());
        assert!(compare_scorers(&[]).is_err());
    }

    #[test]
    fn report_is_deterministic_and_round_trips_through_csv() {
        let rows = vec![
            summary("snr_mean", 0, 0.1),
            summary("magnitude", 0, 0.2),
            summary("snr_mean", 1, 0.12),
            summary("magnitude", 1, 0.22),
        ];
        let a = compare_scorers(&rows).unwrap();
        let mut shuffled = rows.clone();
        shuffled.reverse();
        let b = compare_scorers(&shuffled).unwrap();
        assert_eq!(a, b);
        let csv = a.to_csv();
        assert!(csv.starts_with("variant,optimizer,n_runs,"));
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains(",best\n") || csv.ends_with(",best"));
        let text = a.render_text();
        assert!(text.contains("<- best"));
        assert!(text.contains("lower is better"));
    }

    #[test]
    fn trace_report_scores_rank_agreement() {
        let identical = TraceRecord {
            step: 100,
            sensitivity: vec![0.1, 0.5, 0.3, 0.9],
            snr_mean: vec![1.0, 5.0, 3.0, 9.0],
        };
        let reversed = TraceRecord {
            step: 150,
            sensitivity: vec![0.1, 0.5, 0.3, 0.9],
            snr_mean: vec![9.0, 3.0, 5.0, 1.0],
        };
        let report = score_trace_report(&[identical, reversed]).unwrap();
        assert!((report[0].spearman - 1.0).abs() < 1e-12);
        assert!((report[1].spearman + 1.0).abs() < 1e-12);
        let text = render_trace_report(&report);
        assert!(text.contains("+1.0000"));
        assert!(text.contains("-1.0000"));
        assert!(score_trace_report(&[]).is_err());
    }
}
