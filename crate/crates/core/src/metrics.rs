//! ROC/AUC and calibration diagnostics.
//!
//! The AUC is computed as the pairwise concordance probability (ties count
//! one half), which equals the trapezoid area under the threshold-sweep ROC
//! curve.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("scores and labels must have equal nonzero length")]
    LengthMismatch,
    #[error("AUC needs both classes present")]
    SingleClass,
    #[error("need at least {needed} points for {bins} bins, got {got}")]
    TooFewForBins { needed: usize, bins: usize, got: usize },
}

/// Parallel scores and binary labels.
#[derive(Debug, Clone)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self, MetricsError> {
        if scores.is_empty() || scores.len() != labels.len() {
            return Err(MetricsError::LengthMismatch);
        }
        Ok(ScoredSet { scores, labels })
    }

    fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }
}

/// ROC curve from a threshold sweep over the distinct scores, with its AUC.
#[derive(Debug, Clone)]
pub struct RocCurve {
    /// (FPR, TPR) points from (0,0) to (1,1), non-decreasing in both axes.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Rank-based AUC with ties counted one half (Mann-Whitney form).
fn concordance_auc(set: &ScoredSet) -> f64 {
    let n = set.scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));

    // Average ranks over tied score runs.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && set.scores[order[j]] == set.scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 1) as f64 / 2.0; // 1-based average rank of the run
        for &idx in &order[i..j] {
            if set.labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let pos = set.n_positive() as f64;
    let neg = n as f64 - pos;
    (rank_sum_pos - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

/// ROC curve and AUC. Errors when only one class is present.
pub fn roc_auc(set: &ScoredSet) -> Result<RocCurve, MetricsError> {
    let n = set.scores.len();
    let pos = set.n_positive();
    if pos == 0 || pos == n {
        return Err(MetricsError::SingleClass);
    }
    let neg = n - pos;

    let mut order: Vec<usize> = (0..n).collect();
    // Sweep thresholds from high to low; the classifier is `score >= t`.
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));

    let mut points = Vec::with_capacity(n + 1);
    points.push((0.0, 0.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && set.scores[order[j]] == set.scores[order[i]] {
            if set.labels[order[j]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        i = j;
    }
    Ok(RocCurve { points, auc: concordance_auc(set) })
}

impl RocCurve {
    /// Trapezoid area under the curve; equals the concordance AUC.
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| {
                let (x0, y0) = w[0];
                let (x1, y1) = w[1];
                (x1 - x0) * (y0 + y1) / 2.0
            })
            .sum()
    }
}

/// Assign each score to one of `n_bins` equal-count bins ordered by score.
/// Bin sizes differ by at most one; ties resolve by stable input order.
pub fn quantile_bin(scores: &[f64], n_bins: usize) -> Result<Vec<usize>, MetricsError> {
    assert!(n_bins >= 1);
    let n = scores.len();
    if n < n_bins {
        return Err(MetricsError::TooFewForBins { needed: n_bins, bins: n_bins, got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut bins = vec![0usize; n];
    for (rank, &idx) in order.iter().enumerate() {
        bins[idx] = rank * n_bins / n;
    }
    Ok(bins)
}

/// One row of a calibration table.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRow {
    pub bin: usize,
    pub count: usize,
    pub mean_score: f64,
    pub default_rate: f64,
    /// Mean of the optional companion column (e.g. risk premium).
    pub mean_companion: Option<f64>,
}

/// Per-bin mean score, empirical default rate, and optional companion mean.
pub fn calibration_table(
    set: &ScoredSet,
    bins: &[usize],
    companion: Option<&[f64]>,
) -> Vec<CalibrationRow> {
    let n_bins = bins.iter().copied().max().map_or(0, |b| b + 1);
    let mut count = vec![0usize; n_bins];
    let mut score_sum = vec![0.0; n_bins];
    let mut label_sum = vec![0.0; n_bins];
    let mut comp_sum = vec![0.0; n_bins];
    for (i, &b) in bins.iter().enumerate() {
        count[b] += 1;
        score_sum[b] += set.scores[i];
        label_sum[b] += set.labels[i] as f64;
        if let Some(c) = companion {
            comp_sum[b] += c[i];
        }
    }
    (0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| CalibrationRow {
            bin: b,
            count: count[b],
            mean_score: score_sum[b] / count[b] as f64,
            default_rate: label_sum[b] / count[b] as f64,
            mean_companion: companion.map(|_| comp_sum[b] / count[b] as f64),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn hand_example_auc() {
        let set = ScoredSet::new(vec![0.9, 0.8, 0.3, 0.2], vec![1, 0, 1, 0]).unwrap();
        let curve = roc_auc(&set).unwrap();
        assert_eq!(curve.auc, 0.75);
    }

    #[test]
    fn perfect_ranking_gives_one() {
        let set = ScoredSet::new(vec![0.9, 0.8, 0.3, 0.2], vec![1, 1, 0, 0]).unwrap();
        assert_eq!(roc_auc(&set).unwrap().auc, 1.0);
    }

    #[test]
    fn random_scores_near_half() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.4) as u8).collect();
        let auc = roc_auc(&ScoredSet::new(scores, labels).unwrap()).unwrap().auc;
        assert!((auc - 0.5).abs() < 0.02, "auc = {auc}");
    }

    #[test]
    fn single_class_is_error() {
        let set = ScoredSet::new(vec![0.1, 0.2], vec![1, 1]).unwrap();
        assert!(matches!(roc_auc(&set), Err(MetricsError::SingleClass)));
    }

    #[test]
    fn curve_endpoints_and_monotonicity() {
        let set = ScoredSet::new(
            vec![0.9, 0.8, 0.8, 0.3, 0.2, 0.1],
            vec![1, 0, 1, 1, 0, 0],
        )
        .unwrap();
        let curve = roc_auc(&set).unwrap();
        assert_eq!(*curve.points.first().unwrap(), (0.0, 0.0));
        assert_eq!(*curve.points.last().unwrap(), (1.0, 1.0));
        for w in curve.points.windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn quantile_bin_sizes() {
        // One per bin.
        let scores: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let bins = quantile_bin(&scores, 100).unwrap();
        let mut seen = bins.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..100).collect::<Vec<_>>());

        // All ties: stable order splits 25/25/25/25.
        let scores = vec![1.0; 100];
        let bins = quantile_bin(&scores, 4).unwrap();
        for b in 0..4 {
            assert_eq!(bins.iter().filter(|&&x| x == b).count(), 25);
        }
        assert_eq!(bins[0], 0);
        assert_eq!(bins[99], 3);

        // n=1000 into 100 bins of 10.
        let scores: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let bins = quantile_bin(&scores, 100).unwrap();
        for b in 0..100 {
            assert_eq!(bins.iter().filter(|&&x| x == b).count(), 10);
        }

        assert!(quantile_bin(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn calibration_constant_bin() {
        let set = ScoredSet::new(vec![0.3; 8], vec![0; 8]).unwrap();
        let bins = quantile_bin(&set.scores, 2).unwrap();
        let table = calibration_table(&set, &bins, None);
        assert_eq!(table.len(), 2);
        for row in &table {
            assert_relative_eq!(row.mean_score, 0.3);
            assert_eq!(row.default_rate, 0.0);
            assert!(row.mean_companion.is_none());
        }
    }

    #[test]
    fn calibration_tracks_true_rates() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 20_000;
        let mut scores = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let p: f64 = rng.gen();
            scores.push(p);
            labels.push(rng.gen_bool(p) as u8);
        }
        let set = ScoredSet::new(scores, labels).unwrap();
        let bins = quantile_bin(&set.scores, 20).unwrap();
        for row in calibration_table(&set, &bins, None) {
            assert!(
                (row.mean_score - row.default_rate).abs() <= 0.05,
                "bin {}: score {} vs rate {}",
                row.bin,
                row.mean_score,
                row.default_rate
            );
        }
    }

    #[test]
    fn calibration_companion_mean() {
        let set = ScoredSet::new(vec![0.1, 0.2, 0.8, 0.9], vec![0, 0, 1, 1]).unwrap();
        let bins = quantile_bin(&set.scores, 2).unwrap();
        let companion = vec![1.0, 3.0, 5.0, 7.0];
        let table = calibration_table(&set, &bins, Some(&companion));
        assert_eq!(table[0].mean_companion, Some(2.0));
        assert_eq!(table[1].mean_companion, Some(6.0));
    }

    fn random_set(rng: &mut ChaCha12Rng, n: usize) -> ScoredSet {
        loop {
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 8.0).round() / 8.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.5) as u8).collect();
            if labels.iter().any(|&y| y == 1) && labels.iter().any(|&y| y == 0) {
                return ScoredSet::new(scores, labels).unwrap();
            }
        }
    }

    #[test]
    fn trapezoid_equals_concordance_with_ties() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..200 {
            let set = random_set(&mut rng, 40);
            let curve = roc_auc(&set).unwrap();
            assert_relative_eq!(curve.trapezoid_area(), curve.auc, epsilon = 1e-9);
        }
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            seed in 0u64..500,
        ) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let set = random_set(&mut rng, 30);
            let transformed = ScoredSet::new(
                set.scores.iter().map(|s| (3.0 * s).exp()).collect(),
                set.labels.clone(),
            ).unwrap();
            let a = roc_auc(&set).unwrap().auc;
            let b = roc_auc(&transformed).unwrap().auc;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn reversing_scores_flips_auc(seed in 0u64..500) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let set = random_set(&mut rng, 30);
            let reversed = ScoredSet::new(
                set.scores.iter().map(|s| -s).collect(),
                set.labels.clone(),
            ).unwrap();
            let a = roc_auc(&set).unwrap().auc;
            let b = roc_auc(&reversed).unwrap().auc;
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn calibration_means_stay_in_bin_range(seed in 0u64..200) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let set = random_set(&mut rng, 60);
            let bins = quantile_bin(&set.scores, 5).unwrap();
            for row in calibration_table(&set, &bins, None) {
                let members: Vec<f64> = set
                    .scores
                    .iter()
                    .zip(&bins)
                    .filter(|(_, &b)| b == row.bin)
                    .map(|(s, _)| *s)
                    .collect();
                let lo = members.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = members.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(row.mean_score >= lo - 1e-12 && row.mean_score <= hi + 1e-12);
            }
        }
    }
}
