//! The evaluation metric suite: MAE, R², ICC(3,k), threshold F1 and
//! accuracy, class distribution, and mean ± SD aggregation across repeated
//! runs.
//!
//! All computations are pure. Degenerate inputs (constant truth, zero
//! between-target variance, single-class truth) surface as typed errors or
//! undefined-markers rather than NaNs.

use serde::{Deserialize, Serialize};

/// Aligned clinician/model score pairs for one target (item or total).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedScores {
    pub ids: Vec<String>,
    pub truth: Vec<i32>,
    pub pred: Vec<i32>,
}

impl PairedScores {
    /// Validate lengths (equal, ≥ 2) and the 0..=60 score range.
    pub fn new(ids: Vec<String>, truth: Vec<i32>, pred: Vec<i32>) -> Result<Self, MetricsError> {
        if truth.len() != pred.len() || ids.len() != truth.len() {
            return Err(MetricsError::LengthMismatch {
                truth: truth.len(),
                pred: pred.len(),
            });
        }
        if truth.len() < 2 {
            return Err(MetricsError::TooFewPairs { n: truth.len() });
        }
        for &v in truth.iter().chain(pred.iter()) {
            if !(0..=60).contains(&v) {
                return Err(MetricsError::ValueOutOfRange { value: v });
            }
        }
        Ok(PairedScores { ids, truth, pred })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("paired score lengths differ: truth {truth}, pred {pred}")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("at least 2 pairs are required, got {n}")]
    TooFewPairs { n: usize },
    #[error("score {value} is outside 0..=60")]
    ValueOutOfRange { value: i32 },
    #[error("truth scores are constant; R² is undefined")]
    ConstantTruth,
    #[error("between-target variance is zero; ICC is undefined")]
    ZeroBetweenTargetVariance,
    #[error("ratings matrix has a missing or non-finite cell at ({row}, {col})")]
    MissingCell { row: usize, col: usize },
    #[error("ratings matrix needs at least 2 targets and 2 raters, got {n} x {k}")]
    MatrixTooSmall { n: usize, k: usize },
    #[error("ratings matrix row {row} has {found} raters, expected {expected}")]
    RaggedMatrix {
        row: usize,
        found: usize,
        expected: usize,
    },
}

/// Mean absolute error.
pub fn mae(p: &PairedScores) -> f64 {
    let total: i64 = p
        .truth
        .iter()
        .zip(&p.pred)
        .map(|(&t, &y)| i64::from((t - y).abs()))
        .sum();
    total as f64 / p.len() as f64
}

/// Coefficient of determination, `1 − SSres/SStot`. Unbounded below; errors
/// when the truth is constant (SStot = 0).
pub fn r_squared(p: &PairedScores) -> Result<f64, MetricsError> {
    let n = p.len() as f64;
    let mean: f64 = p.truth.iter().map(|&t| f64::from(t)).sum::<f64>() / n;
    let ss_tot: f64 = p.truth.iter().map(|&t| (f64::from(t) - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(MetricsError::ConstantTruth);
    }
    let ss_res: f64 = p
        .truth
        .iter()
        .zip(&p.pred)
        .map(|(&t, &y)| (f64::from(t) - f64::from(y)).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Sums of squares from the two-way target × rater ANOVA without
/// replication, computed on deviations from the marginal means.
struct AnovaParts {
    ms_targets: f64,
    ms_residual: f64,
    scale: f64,
}

fn two_way_anova(ratings: &[Vec<f64>]) -> Result<AnovaParts, MetricsError> {
    let n = ratings.len();
    let k = ratings.first().map(Vec::len).unwrap_or(0);
    if n < 2 || k < 2 {
        return Err(MetricsError::MatrixTooSmall { n, k });
    }
    for (row, cells) in ratings.iter().enumerate() {
        if cells.len() != k {
            return Err(MetricsError::RaggedMatrix {
                row,
                found: cells.len(),
                expected: k,
            });
        }
        for (col, &cell) in cells.iter().enumerate() {
            if !cell.is_finite() {
                return Err(MetricsError::MissingCell { row, col });
            }
        }
    }

    let row_means: Vec<f64> = ratings
        .iter()
        .map(|row| row.iter().sum::<f64>() / k as f64)
        .collect();
    let col_means: Vec<f64> = (0..k)
        .map(|j| ratings.iter().map(|row| row[j]).sum::<f64>() / n as f64)
        .collect();
    // Grand mean as the mean of column means: exact whenever columns are
    // identical, which keeps the duplicate-column ICC at exactly 1.
    let grand = col_means.iter().sum::<f64>() / k as f64;

    let ss_targets: f64 = row_means.iter().map(|&m| (m - grand).powi(2)).sum::<f64>() * k as f64;
    let ss_residual: f64 = ratings
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, &x)| {
                    let e = (x - row_means[i]) - (col_means[j] - grand);
                    e * e
                })
                .sum::<f64>()
        })
        .sum();

    let ms_targets = ss_targets / (n as f64 - 1.0);
    let ms_residual = ss_residual / ((n as f64 - 1.0) * (k as f64 - 1.0));
    let scale = ratings
        .iter()
        .flat_map(|row| row.iter())
        .map(|&x| x * x)
        .sum::<f64>()
        / (n * k) as f64
        + 1.0;
    Ok(AnovaParts {
        ms_targets,
        ms_residual,
        scale,
    })
}

/// ICC(3,k): two-way mixed, average measures, consistency —
/// `(MS_targets − MS_residual) / MS_targets`.
///
/// `ratings` is n targets × k raters with no missing cells.
pub fn icc_3k(ratings: &[Vec<f64>]) -> Result<f64, MetricsError> {
    let parts = two_way_anova(ratings)?;
    if parts.ms_targets <= parts.scale * 1e-12 {
        return Err(MetricsError::ZeroBetweenTargetVariance);
    }
    Ok((parts.ms_targets - parts.ms_residual) / parts.ms_targets)
}

/// ICC(3,1): the single-measure sibling of [`icc_3k`] —
/// `(MS_targets − MS_residual) / (MS_targets + (k−1)·MS_residual)`.
pub fn icc_3_1(ratings: &[Vec<f64>]) -> Result<f64, MetricsError> {
    let k = ratings.first().map(Vec::len).unwrap_or(0);
    let parts = two_way_anova(ratings)?;
    if parts.ms_targets <= parts.scale * 1e-12 {
        return Err(MetricsError::ZeroBetweenTargetVariance);
    }
    Ok((parts.ms_targets - parts.ms_residual)
        / (parts.ms_targets + (k as f64 - 1.0) * parts.ms_residual))
}

/// Binary classification quality at a severity threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub threshold: i32,
    /// F1 on the at/above-threshold class; `None` when the truth has only
    /// one class (undefined marker).
    pub f1: Option<f64>,
    pub accuracy: f64,
    /// Truth-label counts: (below threshold, at/above threshold).
    pub class_dist: (usize, usize),
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    /// True when the truth has a single class and F1 is undefined.
    pub degenerate_truth: bool,
}

/// Binarize truth and prediction at `value ≥ threshold` and score the
/// at/above-threshold class.
pub fn threshold_classification(p: &PairedScores, threshold: i32) -> ThresholdMetrics {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    let mut tn = 0;
    for (&t, &y) in p.truth.iter().zip(&p.pred) {
        match (t >= threshold, y >= threshold) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let below = tn + fp;
    let at_or_above = tp + fn_;
    let degenerate_truth = below == 0 || at_or_above == 0;
    let f1 = if degenerate_truth {
        None
    } else {
        Some(2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64))
    };
    ThresholdMetrics {
        threshold,
        f1,
        accuracy: (tp + tn) as f64 / p.len() as f64,
        class_dist: (below, at_or_above),
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        true_negatives: tn,
        degenerate_truth,
    }
}

/// The full metric panel for one run of one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_index: u32,
    /// Number of scorable (truth, pred) pairs.
    pub n: usize,
    /// Fraction of eligible instances that were scorable.
    pub coverage: f64,
    pub mae: f64,
    pub r2: Option<f64>,
    pub icc3k: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: f64,
    pub class_dist: (usize, usize),
}

/// Compute the full panel for one run. The clinician/model ICC uses the
/// two-rater matrix (truth column, prediction column).
pub fn compute_run_metrics(
    run_index: u32,
    scores: &PairedScores,
    threshold: i32,
    coverage: f64,
) -> RunMetrics {
    let ratings: Vec<Vec<f64>> = scores
        .truth
        .iter()
        .zip(&scores.pred)
        .map(|(&t, &y)| vec![f64::from(t), f64::from(y)])
        .collect();
    let thresholded = threshold_classification(scores, threshold);
    RunMetrics {
        run_index,
        n: scores.len(),
        coverage,
        mae: mae(scores),
        r2: r_squared(scores).ok(),
        icc3k: icc_3k(&ratings).ok(),
        f1: thresholded.f1,
        accuracy: thresholded.accuracy,
        class_dist: thresholded.class_dist,
    }
}

/// Mean and sample standard deviation of one metric across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub sd: f64,
    /// Runs for which the metric was defined.
    pub n_runs: usize,
    /// SD reported as 0 by convention; flagged so readers can tell.
    pub single_run: bool,
}

fn summarize(values: &[f64]) -> Option<MetricSummary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some(MetricSummary {
        mean,
        sd,
        n_runs: values.len(),
        single_run: values.len() == 1,
    })
}

/// Per-run panels plus across-run mean ± SD for one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedMetrics {
    pub per_run: Vec<RunMetrics>,
    /// Panel over all runs' pairs concatenated.
    pub pooled: Option<RunMetrics>,
    pub mae: Option<MetricSummary>,
    pub r2: Option<MetricSummary>,
    pub icc3k: Option<MetricSummary>,
    pub f1: Option<MetricSummary>,
    pub accuracy: Option<MetricSummary>,
    pub coverage: Option<MetricSummary>,
}

/// Aggregate per-run panels: mean and sample SD per metric. Metrics that
/// were undefined in a run are skipped for that run (their `n_runs` shows it).
pub fn aggregate_runs(per_run: Vec<RunMetrics>, pooled: Option<RunMetrics>) -> AggregatedMetrics {
    let collect =
        |f: fn(&RunMetrics) -> Option<f64>| -> Vec<f64> { per_run.iter().filter_map(f).collect() };
    AggregatedMetrics {
        mae: summarize(&collect(|r| Some(r.mae))),
        r2: summarize(&collect(|r| r.r2)),
        icc3k: summarize(&collect(|r| r.icc3k)),
        f1: summarize(&collect(|r| r.f1)),
        accuracy: summarize(&collect(|r| Some(r.accuracy))),
        coverage: summarize(&collect(|r| Some(r.coverage))),
        per_run,
        pooled,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paired(truth: &[i32], pred: &[i32]) -> PairedScores {
        let ids = (0..truth.len()).map(|i| format!("I{i}")).collect();
        PairedScores::new(ids, truth.to_vec(), pred.to_vec()).unwrap()
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&paired(&[2, 2, 5], &[2, 2, 5])), 0.0);
        assert_eq!(mae(&paired(&[2, 2, 5], &[1, 2, 3])), 1.0);
        assert_eq!(mae(&paired(&[0, 0], &[6, 0])), 3.0);
    }

    #[test]
    fn r_squared_examples() {
        assert_eq!(r_squared(&paired(&[1, 2, 3], &[1, 2, 3])).unwrap(), 1.0);
        // Predicting the truth mean gives exactly zero.
        assert_eq!(r_squared(&paired(&[0, 2, 4], &[2, 2, 2])).unwrap(), 0.0);
        // Anti-correlated predictions go negative; hand computation:
        // SSres = 16 + 0 + 16 = 32, SStot = 8, R² = 1 − 4 = −3.
        assert_eq!(r_squared(&paired(&[0, 2, 4], &[4, 2, 0])).unwrap(), -3.0);
        assert_eq!(
            r_squared(&paired(&[3, 3, 3], &[1, 2, 3])).unwrap_err(),
            MetricsError::ConstantTruth
        );
    }

    #[test]
    fn icc_consistency_is_shift_invariant_and_residual_free() {
        // rater2 = rater1 + 2 with distinct targets: exactly 1.
        let ratings: Vec<Vec<f64>> = vec![vec![1.0, 3.0], vec![2.0, 4.0], vec![5.0, 7.0]];
        assert_eq!(icc_3k(&ratings).unwrap(), 1.0);
    }

    #[test]
    fn icc_duplicate_columns_is_exactly_one() {
        let ratings: Vec<Vec<f64>> = vec![vec![1.0, 1.0], vec![4.0, 4.0], vec![2.0, 2.0]];
        assert_eq!(icc_3k(&ratings).unwrap(), 1.0);
    }

    #[test]
    fn icc_matches_hand_worked_example() {
        // 3 targets x 2 raters: [[1,3],[2,2],[4,6]].
        // Row means 2, 2, 5; col means 7/3, 11/3; grand 3.
        // SS_targets = 2*((2-3)^2+(2-3)^2+(5-3)^2) = 12, MS_targets = 6.
        // Residuals per cell: +-1/3 in row 1, +-2/3... computed by the
        // independent raw-sums oracle below and frozen here.
        let ratings: Vec<Vec<f64>> = vec![vec![1.0, 3.0], vec![2.0, 2.0], vec![4.0, 6.0]];
        let value = icc_3k(&ratings).unwrap();
        let oracle = oracle_icc_3k(&ratings);
        assert!((value - oracle).abs() <= 1e-12);
        assert!((value - 0.888888888888889).abs() < 1e-12);
    }

    #[test]
    fn icc_identical_targets_is_degenerate() {
        let ratings: Vec<Vec<f64>> = vec![vec![2.0, 3.0], vec![2.0, 3.0], vec![2.0, 3.0]];
        assert_eq!(
            icc_3k(&ratings).unwrap_err(),
            MetricsError::ZeroBetweenTargetVariance
        );
    }

    #[test]
    fn icc_rejects_bad_matrices() {
        assert!(matches!(
            icc_3k(&[vec![1.0, 2.0]]),
            Err(MetricsError::MatrixTooSmall { .. })
        ));
        assert!(matches!(
            icc_3k(&[vec![1.0, 2.0], vec![3.0]]),
            Err(MetricsError::RaggedMatrix { .. })
        ));
        assert!(matches!(
            icc_3k(&[vec![1.0, f64::NAN], vec![3.0, 2.0]]),
            Err(MetricsError::MissingCell { row: 0, col: 1 })
        ));
    }

    #[test]
    fn threshold_examples() {
        let perfect = threshold_classification(&paired(&[5, 1, 4], &[5, 1, 4]), 3);
        assert_eq!(perfect.f1, Some(1.0));
        assert_eq!(perfect.accuracy, 1.0);

        let totals = threshold_classification(&paired(&[25, 15], &[25, 25]), 20);
        assert_eq!(totals.accuracy, 0.5);
        assert_eq!(totals.class_dist, (1, 1));

        // truth [3,3,0], pred [0,3,0] at 3: TP=1, FN=1, FP=0 -> F1 = 2/3.
        let partial = threshold_classification(&paired(&[3, 3, 0], &[0, 3, 0]), 3);
        assert_eq!(partial.true_positives, 1);
        assert_eq!(partial.false_negatives, 1);
        assert_eq!(partial.false_positives, 0);
        assert!((partial.f1.unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn threshold_boundary_is_at_or_above() {
        // Item threshold 3: score 2 is negative, 3 is positive.
        let m = threshold_classification(&paired(&[2, 3], &[2, 3]), 3);
        assert_eq!(m.class_dist, (1, 1));
        assert_eq!(m.accuracy, 1.0);
        // Total threshold 20: 19 negative, 20 positive.
        let m = threshold_classification(&paired(&[19, 20], &[19, 20]), 20);
        assert_eq!(m.class_dist, (1, 1));
        assert_eq!(m.true_positives, 1);
        assert_eq!(m.true_negatives, 1);
    }

    #[test]
    fn single_class_truth_marks_f1_undefined() {
        let m = threshold_classification(&paired(&[0, 1], &[5, 0]), 3);
        assert!(m.degenerate_truth);
        assert_eq!(m.f1, None);
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn aggregation_examples() {
        let run = |i: u32, mae_value: f64| RunMetrics {
            run_index: i,
            n: 10,
            coverage: 1.0,
            mae: mae_value,
            r2: Some(0.5),
            icc3k: None,
            f1: Some(0.8),
            accuracy: 0.9,
            class_dist: (5, 5),
        };
        let agg = aggregate_runs(vec![run(1, 1.0), run(2, 3.0)], None);
        let mae = agg.mae.unwrap();
        assert_eq!(mae.mean, 2.0);
        assert!((mae.sd - std::f64::consts::SQRT_2).abs() < 1e-15);
        assert!(!mae.single_run);
        assert!(agg.icc3k.is_none());

        let identical = aggregate_runs(vec![run(1, 2.0), run(2, 2.0)], None);
        assert_eq!(identical.mae.unwrap().sd, 0.0);

        let single = aggregate_runs(vec![run(1, 2.0)], None);
        let mae = single.mae.unwrap();
        assert_eq!(mae.sd, 0.0);
        assert!(mae.single_run);
    }

    #[test]
    fn accuracy_is_one_minus_hamming_fraction() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(2..30);
            let truth: Vec<i32> = (0..n).map(|_| rng.random_range(0..=6)).collect();
            let pred: Vec<i32> = (0..n).map(|_| rng.random_range(0..=6)).collect();
            let p = paired(&truth, &pred);
            let m = threshold_classification(&p, 3);
            let hamming = truth
                .iter()
                .zip(&pred)
                .filter(|(&t, &y)| (t >= 3) != (y >= 3))
                .count();
            assert!((m.accuracy - (1.0 - hamming as f64 / n as f64)).abs() < 1e-15);
        }
    }

    // ------------------------------------------------------------------
    // Independent oracles: algebraically different computation routes used
    // to cross-check the implementations on random instances.
    // ------------------------------------------------------------------

    /// Raw-sums-of-squares two-way ANOVA (computational formulas), as
    /// opposed to the deviation-based route the implementation uses.
    fn oracle_icc_3k(ratings: &[Vec<f64>]) -> f64 {
        let n = ratings.len() as f64;
        let k = ratings[0].len() as f64;
        let total: f64 = ratings.iter().flatten().sum();
        let correction = total * total / (n * k);
        let ss_total: f64 = ratings.iter().flatten().map(|&x| x * x).sum::<f64>() - correction;
        let ss_rows: f64 = ratings
            .iter()
            .map(|row| {
                let s: f64 = row.iter().sum();
                s * s / k
            })
            .sum::<f64>()
            - correction;
        let ss_cols: f64 = (0..ratings[0].len())
            .map(|j| {
                let s: f64 = ratings.iter().map(|row| row[j]).sum();
                s * s / n
            })
            .sum::<f64>()
            - correction;
        let ss_e = ss_total - ss_rows - ss_cols;
        let ms_rows = ss_rows / (n - 1.0);
        let ms_e = ss_e / ((n - 1.0) * (k - 1.0));
        (ms_rows - ms_e) / ms_rows
    }

    fn oracle_mae(truth: &[i32], pred: &[i32]) -> f64 {
        let mut total: i64 = 0;
        for i in 0..truth.len() {
            let d = i64::from(truth[i]) - i64::from(pred[i]);
            total += d.abs();
        }
        total as f64 / truth.len() as f64
    }

    /// Expanded-sums R²: 1 − (Σt² − 2Σty + Σy²) / (Σt² − n·mean²).
    fn oracle_r_squared(truth: &[i32], pred: &[i32]) -> f64 {
        let n = truth.len() as f64;
        let st: f64 = truth.iter().map(|&t| f64::from(t)).sum();
        let stt: f64 = truth.iter().map(|&t| f64::from(t) * f64::from(t)).sum();
        let syy: f64 = pred.iter().map(|&y| f64::from(y) * f64::from(y)).sum();
        let sty: f64 = truth
            .iter()
            .zip(pred)
            .map(|(&t, &y)| f64::from(t) * f64::from(y))
            .sum();
        let ss_res = stt - 2.0 * sty + syy;
        let ss_tot = stt - st * st / n;
        1.0 - ss_res / ss_tot
    }

    /// Precision/recall-route F1 and direct scans for the rest.
    fn oracle_threshold(truth: &[i32], pred: &[i32], threshold: i32) -> (Option<f64>, f64) {
        let tp = truth
            .iter()
            .zip(pred)
            .filter(|(&t, &y)| t >= threshold && y >= threshold)
            .count() as f64;
        let fp = truth
            .iter()
            .zip(pred)
            .filter(|(&t, &y)| t < threshold && y >= threshold)
            .count() as f64;
        let fn_ = truth
            .iter()
            .zip(pred)
            .filter(|(&t, &y)| t >= threshold && y < threshold)
            .count() as f64;
        let positives = truth.iter().filter(|&&t| t >= threshold).count();
        let f1 = if positives == 0 || positives == truth.len() {
            None
        } else if tp == 0.0 {
            Some(0.0)
        } else {
            let precision = tp / (tp + fp);
            let recall = tp / (tp + fn_);
            Some(2.0 * precision * recall / (precision + recall))
        };
        let matches = truth
            .iter()
            .zip(pred)
            .filter(|(&t, &y)| (t >= threshold) == (y >= threshold))
            .count();
        (f1, matches as f64 / truth.len() as f64)
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn metric_implementations_match_oracles_on_random_instances() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(31415);
        let mut icc_checked = 0usize;
        for _ in 0..1000 {
            let n = rng.random_range(2..=25);
            let truth: Vec<i32> = (0..n).map(|_| rng.random_range(0..=6)).collect();
            let pred: Vec<i32> = (0..n).map(|_| rng.random_range(0..=6)).collect();
            let p = paired(&truth, &pred);

            assert!(close(mae(&p), oracle_mae(&truth, &pred), 1e-10));

            if truth.iter().any(|&t| t != truth[0]) {
                assert!(close(
                    r_squared(&p).unwrap(),
                    oracle_r_squared(&truth, &pred),
                    1e-10
                ));
            }

            let threshold = rng.random_range(1..=6);
            let m = threshold_classification(&p, threshold);
            let (oracle_f1, oracle_acc) = oracle_threshold(&truth, &pred, threshold);
            assert!(close(m.accuracy, oracle_acc, 1e-10));
            match (m.f1, oracle_f1) {
                (None, None) => {}
                (Some(a), Some(b)) => assert!(close(a, b, 1e-10)),
                other => panic!("f1 definedness mismatch: {other:?}"),
            }

            let k = rng.random_range(2..=5);
            let ratings: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..k).map(|_| f64::from(rng.random_range(0..=6))).collect())
                .collect();
            match icc_3k(&ratings) {
                Ok(value) => {
                    assert!(close(value, oracle_icc_3k(&ratings), 1e-10));
                    icc_checked += 1;
                }
                Err(MetricsError::ZeroBetweenTargetVariance) => {}
                Err(e) => panic!("unexpected ICC error: {e}"),
            }
        }
        assert!(icc_checked > 900, "too few non-degenerate ICC draws");
    }

    #[test]
    fn icc_shift_invariance_property() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(2718);
        for _ in 0..200 {
            let n = rng.random_range(3..=20);
            let k = rng.random_range(2..=4);
            let ratings: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..k).map(|_| rng.random_range(0.0..6.0)).collect())
                .collect();
            let Ok(base) = icc_3k(&ratings) else { continue };
            let shift_col = rng.random_range(0..k);
            let delta = rng.random_range(-3.0..3.0);
            let shifted: Vec<Vec<f64>> = ratings
                .iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .map(|(j, &x)| if j == shift_col { x + delta } else { x })
                        .collect()
                })
                .collect();
            let moved = icc_3k(&shifted).unwrap();
            assert!(
                (base - moved).abs() < 1e-10,
                "shift changed ICC: {base} vs {moved}"
            );
        }
    }

    #[test]
    fn mae_zero_iff_equal_and_r2_at_most_one() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(99);
        for _ in 0..300 {
            let n = rng.random_range(2..=15);
            let truth: Vec<i32> = (0..n).map(|_| rng.random_range(0..=6)).collect();
            let pred: Vec<i32> = (0..n).map(|_| rng.random_range(0..=6)).collect();
            let p = paired(&truth, &pred);
            let m = mae(&p);
            assert!(m >= 0.0);
            assert_eq!(m == 0.0, truth == pred);
            if let Ok(r2) = r_squared(&p) {
                assert!(r2 <= 1.0);
            }
        }
    }

    #[test]
    fn icc_3_1_relates_to_icc_3k() {
        // Spearman-Brown: icc3k = k*icc31 / (1 + (k-1)*icc31).
        let ratings: Vec<Vec<f64>> = vec![vec![1.0, 3.0], vec![2.0, 2.0], vec![4.0, 6.0]];
        let single = icc_3_1(&ratings).unwrap();
        let average = icc_3k(&ratings).unwrap();
        let k = 2.0;
        let predicted = k * single / (1.0 + (k - 1.0) * single);
        assert!((predicted - average).abs() < 1e-12);
    }

    #[test]
    fn paired_scores_validation() {
        assert!(matches!(
            PairedScores::new(vec!["a".into()], vec![1], vec![1]),
            Err(MetricsError::TooFewPairs { n: 1 })
        ));
        assert!(matches!(
            PairedScores::new(vec!["a".into(), "b".into()], vec![1, 2], vec![1]),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert!(matches!(
            PairedScores::new(vec!["a".into(), "b".into()], vec![1, 61], vec![1, 2]),
            Err(MetricsError::ValueOutOfRange { value: 61 })
        ));
    }
}
