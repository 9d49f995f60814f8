//! Small statistics helpers for diagnostics and reports.

/// Arithmetic mean; `None` for an empty slice.
pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

/// Sample standard deviation (n-1 denominator); zero for a single value,
/// `None` for an empty slice.
pub fn sample_std(values: &[f64]) -> Option<f64> {
    let m = mean(values)?;
    if values.len() < 2 {
        return Some(0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the average 1-based rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return None; // correlation undefined for a constant sequence
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

/// Spearman rank correlation with tie-averaged ranks.
///
/// Returns `None` when undefined: mismatched/short inputs, non-finite values,
/// or zero rank variance on either side (constant vectors).
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return None;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_std_match_hand_values() {
        assert_eq!(mean(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        // Sample std of {2, 4, 4, 4, 5, 5, 7, 9}: variance 32/7.
        let s = sample_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-15);
        assert_eq!(sample_std(&[3.0]).unwrap(), 0.0);
        assert!(mean(&[]).is_none());
        assert!(sample_std(&[]).is_none());
    }

    #[test]
    fn spearman_of_independent_noise_is_near_zero() {
        let mut rng = crate::numerics::SplitMix64::new(42);
        let a: Vec<f64> = (0..200).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..200).map(|_| rng.normal()).collect();
        let rho = spearman(&a, &b).unwrap();
        assert!(rho.abs() < 0.2, "rho = {rho}");
    }

    #[test]
    fn monotone_sequences_correlate_perfectly() {
        let a = [1.0, 2.0, 5.0, 9.0];
        let b = [0.1, 0.2, 0.3, 7.0]; // same order, different values
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = b.iter().rev().copied().collect();
        assert!((spearman(&a, &rev).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_input_is_undefined() {
        let a = [3.0, 3.0, 3.0];
        let b = [1.0, 2.0, 3.0];
        assert!(spearman(&a, &b).is_none());
    }

    #[test]
    fn tie_handling_matches_hand_computation() {
        // a = [1, 2, 2, 4] -> ranks [1, 2.5, 2.5, 4]
        // b = [10, 20, 30, 40] -> ranks [1, 2, 3, 4]
        // Pearson of ranks = cov / (sd_a sd_b); hand value: 0.9486832980505138.
        let a = [1.0, 2.0, 2.0, 4.0];
        let b = [10.0, 20.0, 30.0, 40.0];
        let got = spearman(&a, &b).unwrap();
        assert!((got - 0.9486832980505138).abs() < 1e-12, "{got}");
    }

    #[test]
    fn mismatched_or_tiny_inputs_are_undefined() {
        assert!(spearman(&[1.0], &[2.0]).is_none());
        assert!(spearman(&[1.0, 2.0], &[2.0]).is_none());
    }

    #[test]
    fn average_ranks_handle_tie_groups() {
        let r = average_ranks(&[5.0, 1.0, 5.0, 5.0]);
        assert_eq!(r, vec![3.0, 1.0, 3.0, 3.0]);
    }
}
