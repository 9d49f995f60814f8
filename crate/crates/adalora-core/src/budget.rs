//! Global rank budget: the cubic decay schedule and the greedy allocator.
//!
//! The budget counts *active triplets summed over all adapted layers*; the
//! allocator decides which triplets stay active, so rank moves freely between
//! layers as long as the total matches the schedule.
//!
//! Schedule shape: hold the inflated starting budget `b_init` through a
//! warm-up window, decay cubically to `b_target`, then hold `b_target` for a
//! final window. The early surplus lets the scorer observe all directions
//! before pruning begins; the final hold gives training time to settle at the
//! deployment budget (allocation keeps running there — triplets can still
//! swap places at a fixed total).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Piecewise-cubic budget decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    /// Inflated starting budget `b_init >= b_target`.
    pub b_init: usize,
    /// Final (deployment) budget.
    pub b_target: usize,
    /// Steps to hold `b_init` before decay starts.
    pub t_warmup: u64,
    /// Steps to hold `b_target` at the end.
    pub t_final: u64,
    /// Total training steps.
    pub t_total: u64,
}

/// Default starting budget: one and a half times the target, rounded.
pub fn default_b_init(b_target: usize) -> usize {
    (1.5 * b_target as f64).round() as usize
}

impl BudgetSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.b_target == 0 {
            return Err(Error::InvalidConfig("b_target must be positive".into()));
        }
        if self.b_init < self.b_target {
            return Err(Error::InvalidConfig(format!(
                "b_init ({}) must be >= b_target ({})",
                self.b_init, self.b_target
            )));
        }
        if self.t_warmup + self.t_final >= self.t_total {
            return Err(Error::InvalidConfig(format!(
                "t_warmup ({}) + t_final ({}) must be < t_total ({})",
                self.t_warmup, self.t_final, self.t_total
            )));
        }
        Ok(())
    }

    /// Budget at step `t`:
    ///
    /// - `t <= t_warmup`: `b_init`
    /// - `t >= t_total - t_final`: `b_target`
    /// - between: `b_target + (b_init - b_target) * (1 - u)^3` floored, where
    ///   `u` runs linearly from 0 to 1 across the decay window.
    pub fn budget_at(&self, t: u64) -> Result<usize> {
        self.validate()?;
        if t > self.t_total {
            return Err(Error::InvalidArgument(format!(
                "step {t} is past the end of the schedule ({})",
                self.t_total
            )));
        }
        if t <= self.t_warmup {
            return Ok(self.b_init);
        }
        if t >= self.t_total - self.t_final {
            return Ok(self.b_target);
        }
        let span = (self.t_total - self.t_warmup - self.t_final) as f64;
        let u = (t - self.t_warmup) as f64 / span;
        let cubic = (1.0 - u).powi(3);
        let b = self.b_target as f64 + (self.b_init - self.b_target) as f64 * cubic;
        Ok(b.floor() as usize)
    }
}

/// Result of one allocation pass: which triplets hold rank and which are
/// masked, each sorted by `(layer_id, triplet_index)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationDecision {
    pub step: u64,
    pub budget: usize,
    pub kept: Vec<(usize, usize)>,
    pub pruned: Vec<(usize, usize)>,
}

use crate::scoring::TripletScore;

/// Keeps the `budget` highest-scoring triplets across all layers and prunes
/// the rest. Ties break deterministically toward the lower
/// `(layer_id, triplet_index)` pair, so equal inputs always produce equal
/// decisions. Every triplet is re-ranked from scratch — a pruned triplet
/// whose score recovers simply wins its slot back.
pub fn allocate(scores: &[TripletScore], budget: usize, step: u64) -> Result<AllocationDecision> {
    if budget > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "budget {budget} exceeds the {} triplets available",
            scores.len()
        )));
    }
    for t in scores {
        if !t.score.is_finite() {
            return Err(Error::NonFinite(format!(
                "score for triplet ({}, {}) = {}",
                t.layer_id, t.triplet_index, t.score
            )));
        }
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let (ta, tb) = (&scores[a], &scores[b]);
        tb.score
            .partial_cmp(&ta.score)
            .expect("scores checked finite")
            .then_with(|| ta.layer_id.cmp(&tb.layer_id))
            .then_with(|| ta.triplet_index.cmp(&tb.triplet_index))
    });
    let mut kept: Vec<(usize, usize)> = order[..budget]
        .iter()
        .map(|&i| (scores[i].layer_id, scores[i].triplet_index))
        .collect();
    let mut pruned: Vec<(usize, usize)> = order[budget..]
        .iter()
        .map(|&i| (scores[i].layer_id, scores[i].triplet_index))
        .collect();
    kept.sort_unstable();
    pruned.sort_unstable();
    Ok(AllocationDecision { step, budget, kept, pruned })
}

/// One row of the final rank table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRow {
    pub layer: usize,
    pub module: String,
    pub rank: usize,
}

/// Renders rank rows as CSV with the fixed header `layer,module,rank`.
pub fn rank_rows_to_csv(rows: &[RankRow]) -> String {
    let mut out = String::from("layer,module,rank\n");
    for row in rows {
        out.push_str(&format!("{},{},{}\n", row.layer, row.module, row.rank));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schedule() -> BudgetSchedule {
        BudgetSchedule { b_init: 108, b_target: 72, t_warmup: 100, t_final: 200, t_total: 1000 }
    }

    #[test]
    fn budget_holds_b_init_through_warmup() {
        let s = schedule();
        assert_eq!(s.budget_at(0).unwrap(), 108);
        assert_eq!(s.budget_at(100).unwrap(), 108);
        assert_eq!(s.budget_at(101).unwrap() < 108, true);
    }

    #[test]
    fn budget_holds_b_target_through_final_window() {
        let s = schedule();
        assert_eq!(s.budget_at(800).unwrap(), 72);
        assert_eq!(s.budget_at(900).unwrap(), 72);
        assert_eq!(s.budget_at(1000).unwrap(), 72);
    }

    #[test]
    fn budget_midpoint_frozen_value() {
        // Hand-evaluated: u = 350/700, 72 + 36 * 0.5^3 = 76.5 -> floor 76.
        assert_eq!(schedule().budget_at(450).unwrap(), 76);
    }

    #[test]
    fn budget_is_monotone_nonincreasing_over_the_whole_run() {
        let s = schedule();
        let mut prev = s.budget_at(0).unwrap();
        for t in 1..=1000 {
            let b = s.budget_at(t).unwrap();
            assert!(b <= prev, "budget rose at step {t}: {prev} -> {b}");
            assert!((72..=108).contains(&b));
            prev = b;
        }
    }

    #[test]
    fn budget_rejects_out_of_range_steps_and_bad_configs() {
        assert!(schedule().budget_at(1001).is_err());
        let bad = BudgetSchedule { b_init: 10, b_target: 20, ..schedule() };
        assert!(bad.validate().is_err());
        let bad = BudgetSchedule { t_warmup: 500, t_final: 500, ..schedule() };
        assert!(bad.validate().is_err());
        let bad = BudgetSchedule { b_target: 0, b_init: 0, ..schedule() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_b_init_is_one_and_a_half_times_target() {
        assert_eq!(default_b_init(72), 108);
        assert_eq!(default_b_init(3), 5); // 4.5 rounds up
    }

    fn ts(layer: usize, idx: usize, score: f64) -> TripletScore {
        TripletScore { layer_id: layer, triplet_index: idx, score }
    }

    #[test]
    fn allocate_keeps_the_top_scores() {
        let scores = vec![ts(0, 0, 1.0), ts(0, 1, 5.0), ts(1, 0, 3.0), ts(1, 1, 0.5)];
        let d = allocate(&scores, 2, 42).unwrap();
        assert_eq!(d.step, 42);
        assert_eq!(d.kept, vec![(0, 1), (1, 0)]);
        assert_eq!(d.pruned, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn ties_break_toward_lower_layer_then_lower_index() {
        let scores = vec![ts(2, 0, 1.0), ts(0, 1, 1.0), ts(0, 0, 1.0), ts(1, 0, 1.0)];
        let d = allocate(&scores, 2, 0).unwrap();
        assert_eq!(d.kept, vec![(0, 0), (0, 1)]);
    }

    #[test]
    fn full_budget_prunes_nothing() {
        let scores = vec![ts(0, 0, 1.0), ts(0, 1, 2.0)];
        let d = allocate(&scores, 2, 0).unwrap();
        assert_eq!(d.kept.len(), 2);
        assert!(d.pruned.is_empty());
    }

    #[test]
    fn over_budget_and_non_finite_scores_are_rejected() {
        let scores = vec![ts(0, 0, 1.0)];
        assert!(allocate(&scores, 2, 0).is_err());
        let bad = vec![ts(0, 0, f64::NAN)];
        assert!(allocate(&bad, 1, 0).is_err());
    }

    #[test]
    fn a_pruned_triplet_whose_score_recovers_is_reactivated() {
        // Step 1: triplet (0,1) loses its slot.
        let d1 = allocate(&[ts(0, 0, 10.0), ts(0, 1, 1.0), ts(1, 0, 5.0)], 2, 1).unwrap();
        assert_eq!(d1.pruned, vec![(0, 1)]);
        // Step 2: its score recovers past (1,0) and it wins the slot back.
        let d2 = allocate(&[ts(0, 0, 10.0), ts(0, 1, 7.0), ts(1, 0, 5.0)], 2, 2).unwrap();
        assert_eq!(d2.kept, vec![(0, 0), (0, 1)]);
        assert_eq!(d2.pruned, vec![(1, 0)]);
    }

    #[test]
    fn rank_csv_has_the_fixed_header() {
        let rows = vec![
            RankRow { layer: 0, module: "linear".into(), rank: 3 },
            RankRow { layer: 1, module: "linear".into(), rank: 0 },
        ];
        assert_eq!(rank_rows_to_csv(&rows), "layer,module,rank\n0,linear,3\n1,linear,0\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kept_triplets_never_score_below_pruned_ones(
            raw in proptest::collection::vec(-100.0f64..100.0, 1..40),
            budget_frac in 0.0f64..1.0,
        ) {
            let scores: Vec<TripletScore> =
                raw.iter().enumerate().map(|(i, &s)| ts(i / 5, i % 5, s)).collect();
            let budget = ((scores.len() as f64) * budget_frac) as usize;
            let d = allocate(&scores, budget, 0).unwrap();
            prop_assert_eq!(d.kept.len(), budget);
            prop_assert_eq!(d.kept.len() + d.pruned.len(), scores.len());
            let lookup = |key: (usize, usize)| {
                scores.iter().find(|t| (t.layer_id, t.triplet_index) == key).unwrap().score
            };
            let min_kept = d.kept.iter().map(|&k| lookup(k)).fold(f64::INFINITY, f64::min);
            for &p in &d.pruned {
                prop_assert!(lookup(p) <= min_kept);
            }
        }

        #[test]
        fn allocation_is_invariant_under_positive_scaling(
            raw in proptest::collection::vec(0.0f64..100.0, 2..30),
            c in 0.001f64..1000.0,
        ) {
            let scores: Vec<TripletScore> =
                raw.iter().enumerate().map(|(i, &s)| ts(i / 4, i % 4, s)).collect();
            let scaled: Vec<TripletScore> =
                scores.iter().map(|t| ts(t.layer_id, t.triplet_index, t.score * c)).collect();
            let budget = scores.len() / 2;
            let a = allocate(&scores, budget, 0).unwrap();
            let b = allocate(&scaled, budget, 0).unwrap();
            prop_assert_eq!(a.kept, b.kept);
        }

        #[test]
        fn schedule_stays_within_bounds_for_random_configs(
            b_target in 1usize..64,
            extra in 0usize..64,
            t_warmup in 0u64..200,
            t_final in 0u64..200,
            span in 1u64..400,
        ) {
            let s = BudgetSchedule {
                b_init: b_target + extra,
                b_target,
                t_warmup,
                t_final,
                t_total: t_warmup + t_final + span,
            };
            let mut prev = s.budget_at(0).unwrap();
            for t in 0..=s.t_total {
                let b = s.budget_at(t).unwrap();
                prop_assert!(b >= s.b_target && b <= s.b_init);
                prop_assert!(b <= prev);
                prev = b;
            }
            prop_assert_eq!(s.budget_at(0).unwrap(), s.b_init);
            prop_assert_eq!(s.budget_at(s.t_total).unwrap(), s.b_target);
        }
    }
}
